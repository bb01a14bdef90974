"""Procedural toy corpus with known ground truth.

The class is encoded as a blob shape family (lobed blob for ``neoplastic``, ellipse
for ``non_neoplastic``); the "imaging modality" is a render style (``SYNTH_A``:
warm palette with smooth shading, ``SYNTH_B``: cool palette with a vessel-like line
texture). Every video holds one shape instance seen from jittered viewpoints.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Tuple

import cv2
import numpy as np

from latentaug.data_model import (
    NEGATIVE_LABEL,
    POSITIVE_LABEL,
    ImageRecord,
    Manifest,
    Origin,
    Vocabulary,
    save_manifest,
)
from latentaug.exception import ConfigError
from latentaug.process import LatentAugPool, worker_log
from latentaug.utils.imaging import read_mask, to_float, to_uint8, write_image, write_mask
from latentaug.utils.seeding import numpy_rng

logger = logging.getLogger(__name__)

SYNTH_A = "SYNTH_A"
SYNTH_B = "SYNTH_B"

CLASS_FAMILIES = {POSITIVE_LABEL: "lobed", NEGATIVE_LABEL: "ellipse"}
STYLES = (SYNTH_A, SYNTH_B)

# RGB, 0-255
PALETTES = {
    SYNTH_A: {"background": (150, 70, 60), "blob": (235, 160, 130)},
    SYNTH_B: {"background": (40, 80, 130), "blob": (110, 170, 200)},
}

VESSEL_DARKENING = 0.75
DOME_SHADING = 0.15
VIGNETTE = 0.08

MAX_ROTATION_DEG = 15.0
MAX_SCALE_JITTER = 0.08
MAX_SHIFT_PX = 3.0  # at 64 px, scaled with the image size

MODALITY_SCALE = 0.1


@dataclass(frozen=True)
class ToyParams:

    image_size: int = 64
    n_videos: int = 20
    frames_per_video: int = 10
    seed: int = 0
    noise_sigma: float = 3.0 / 255.0
    class_families: Tuple[str, ...] = (POSITIVE_LABEL, NEGATIVE_LABEL)
    modality_styles: Tuple[str, ...] = STYLES

    def __post_init__(self):

        if self.image_size not in (32, 64, 128):
            raise ConfigError(f"image_size must be 32, 64 or 128, got {self.image_size}")
        if self.n_videos < 10:
            raise ConfigError(f"n_videos must be >= 10, got {self.n_videos}")
        if self.frames_per_video < 2:
            raise ConfigError(f"frames_per_video must be >= 2, got {self.frames_per_video}")
        if tuple(sorted(self.class_families)) != tuple(sorted(CLASS_FAMILIES)):
            raise ConfigError(f"class_families must be {sorted(CLASS_FAMILIES)}")
        if tuple(sorted(self.modality_styles)) != STYLES:
            raise ConfigError(f"modality_styles must be {list(STYLES)}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class BlobShape:
    """One shape instance in units of the image size, centered near the middle."""

    family: str
    radius: float
    center: Tuple[float, float]
    petals: int = 0
    amplitude: float = 0.0
    phase: float = 0.0
    aspect: float = 1.0
    angle: float = 0.0

    @classmethod
    def sample(cls, family, rng):

        radius = rng.uniform(0.18, 0.24)
        center = tuple(0.5 + rng.uniform(-3.0, 3.0, size=2) / 64.0)

        if family == "lobed":
            return cls(
                family,
                radius,
                center,
                petals=int(rng.integers(3, 7)),
                amplitude=rng.uniform(0.2, 0.3),
                phase=rng.uniform(0.0, 2.0 * math.pi),
            )

        return cls(family, radius, center, aspect=rng.uniform(0.6, 0.8), angle=rng.uniform(0.0, math.pi))

    def outline(self, n_points=256):

        theta = np.linspace(0.0, 2.0 * math.pi, n_points, endpoint=False)

        if self.family == "lobed":
            r = self.radius * (1.0 + self.amplitude * np.cos(self.petals * (theta - self.phase)))
            return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)

        a = self.radius * 1.1
        pts = np.stack([a * np.cos(theta), a * self.aspect * np.sin(theta)], axis=1)
        c, s = math.cos(self.angle), math.sin(self.angle)
        return pts @ np.array([[c, s], [-s, c]])


@dataclass(frozen=True)
class FrameSpec:

    video_index: int
    frame_index: int
    label: str
    modality: str
    shape: BlobShape

    @property
    def video_id(self):
        return f"v{self.video_index:03d}"

    @property
    def image_path(self):
        return f"images/{self.video_id}_f{self.frame_index:03d}.png"

    @property
    def mask_path(self):
        return f"images/{self.video_id}_f{self.frame_index:03d}_mask.png"


class ModalityGuess(NamedTuple):

    modality: str
    confidence: float
    score: float


class ShapeScore(NamedTuple):

    score: float
    degenerate: bool


def plan_frames(params):
    """Per-frame render plan; labels alternate per video then get shuffled (50:50)."""

    labels = [params.class_families[i % 2] for i in range(params.n_videos)]
    order = numpy_rng(params.seed, "corpus", "labels").permutation(params.n_videos)
    labels = [labels[i] for i in order]

    frames = []
    for v, label in enumerate(labels):

        rng = numpy_rng(params.seed, "corpus", "video", v)
        shape = BlobShape.sample(CLASS_FAMILIES[label], rng)

        n_a = params.frames_per_video // 2 + (v % 2) * (params.frames_per_video % 2)
        modalities = [SYNTH_A] * n_a + [SYNTH_B] * (params.frames_per_video - n_a)
        modalities = [modalities[i] for i in rng.permutation(len(modalities))]

        frames += [FrameSpec(v, f, label, m, shape) for f, m in enumerate(modalities)]

    return frames


def render_frame(params, spec):
    """Render one frame; returns ``(uint8 RGB image, bool mask)``."""

    size = params.image_size
    rng = numpy_rng(params.seed, "corpus", "frame", spec.video_index, spec.frame_index)

    rotation = math.radians(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    scale = 1.0 + rng.uniform(-MAX_SCALE_JITTER, MAX_SCALE_JITTER)
    shift = rng.uniform(-MAX_SHIFT_PX, MAX_SHIFT_PX, size=2) * size / 64.0

    c, s = math.cos(rotation), math.sin(rotation)
    center = np.asarray(spec.shape.center) * size + shift
    pts = center + scale * size * (spec.shape.outline() @ np.array([[c, s], [-s, c]]))

    mask = np.zeros((size, size), dtype=np.uint8)
    cv2.fillPoly(mask, [np.rint(pts * 16).astype(np.int32)], 1, lineType=cv2.LINE_8, shift=4)
    inside = mask.astype(bool)

    palette = PALETTES[spec.modality]
    background = np.asarray(palette["background"], dtype=np.float32) / 255.0
    blob = np.asarray(palette["blob"], dtype=np.float32) / 255.0

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    if spec.modality == SYNTH_A:

        rho = np.hypot(xx - center[0], yy - center[1])
        rho = rho / max(float(rho[inside].max()), 1.0)
        d = np.hypot(xx - size / 2.0, yy - size / 2.0) / (size / math.sqrt(2.0))

        shade = (1.0 - DOME_SHADING * rho**2)[..., None]
        vignette = (1.0 - VIGNETTE * d**2)[..., None]
        image = np.where(inside[..., None], blob * shade, background * vignette)

    else:

        image = np.where(inside[..., None], blob, background)

        vessels = np.zeros((size, size), dtype=np.uint8)
        for _ in range(int(rng.integers(4, 8))):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            point = rng.uniform(0.0, size, size=2)
            walk = [point]
            for _ in range(6):
                angle += rng.uniform(-0.6, 0.6)
                point = point + size / 8.0 * np.array([math.cos(angle), math.sin(angle)])
                walk.append(point)
            cv2.polylines(vessels, [np.rint(np.array(walk)).astype(np.int32)], False, 1, 1, cv2.LINE_8)

        image = np.where(vessels[..., None] > 0, image * VESSEL_DARKENING, image)

    image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)

    return to_uint8(np.clip(image, 0.0, 1.0)), inside


def _render_worker(item):

    params, out_dir, spec = item
    out_dir = Path(out_dir)

    image, mask = render_frame(params, spec)
    write_image(out_dir / spec.image_path, image)
    write_mask(out_dir / spec.mask_path, mask)

    if spec.frame_index == 0:
        worker_log("debug", f"Corpus: rendering video {spec.video_id} ({spec.label})")

    return ImageRecord(
        path=spec.image_path,
        label=spec.label,
        modality=spec.modality,
        video_id=spec.video_id,
        origin=Origin.REAL,
        extra={"mask": spec.mask_path},
    )


def build_corpus(params, out_dir, jobs=1, log_queue=None, command="corpus build"):
    """Render the corpus into ``out_dir`` and write ``out_dir/manifest.tsv``.

    Frames are independent work items with their own random streams, so the
    output does not depend on ``jobs``.
    """

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    frames = plan_frames(params)
    logger.info(
        f"Corpus: rendering {len(frames)} frames ({params.n_videos} videos, {params.image_size}px) into {out_dir}"
    )

    pool = LatentAugPool(jobs=jobs, log_queue=log_queue)
    records = pool.map(_render_worker, [(params, out_dir.as_posix(), spec) for spec in frames])

    manifest = Manifest(
        tuple(records),
        Vocabulary(params.class_families, params.modality_styles),
        {"command": command, "seed": str(params.seed)},
        out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.tsv")

    return manifest


def record_mask(manifest, record):
    """Reference mask stored beside a corpus image."""

    mask_path = record.get("mask")
    if mask_path is None:
        raise FileNotFoundError(f"record {record.path!r} has no reference mask")
    return read_mask(manifest.resolve(mask_path))


def modality_oracle(image):
    """Guess the render style from the red/blue balance.

    ``score = (mean R - mean B) / (mean R + mean B)``: warm ``SYNTH_A`` renders score
    well above 0, cool ``SYNTH_B`` renders well below. A neutral gray scores 0 and
    gets confidence 0.5.
    """

    image = to_float(image)
    r = float(image[..., 0].mean())
    b = float(image[..., 2].mean())
    score = (r - b) / (r + b + 1e-6)

    modality = SYNTH_A if score >= 0 else SYNTH_B
    confidence = 0.5 + 0.5 * math.tanh(abs(score) / MODALITY_SCALE)

    return ModalityGuess(modality, confidence, score)


def segment_blob(image):
    """Foreground mask of the main blob, or ``None`` when nothing separates from the background."""

    image = to_float(image)

    border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]])
    background = np.median(border, axis=0)
    dist = np.linalg.norm(image - background, axis=2)

    peak = float(dist.max())
    if peak < 1e-3:
        return None

    # a 3x3 median removes the one-pixel vessel lines
    dist = cv2.medianBlur(to_uint8(dist / peak), 3)
    _, binary = cv2.threshold(dist, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)

    n, labels, stats, _ = cv2.connectedComponentsWithStats(binary, connectivity=8)
    if n < 2:
        return None

    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    component = (labels == largest).astype(np.uint8)

    contours, _ = cv2.findContours(component, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    filled = np.zeros_like(component)
    cv2.drawContours(filled, contours, -1, 1, thickness=cv2.FILLED)

    return filled.astype(bool)


def shape_oracle(image, reference_mask):
    """Intersection over union of the segmented blob and ``reference_mask``.

    Degenerate images (flat, or no separable foreground) score 0 with the flag set.
    """

    image = to_float(image)
    if float(image.std()) < 1e-3:
        return ShapeScore(0.0, True)

    segmented = segment_blob(image)
    if segmented is None:
        return ShapeScore(0.0, True)

    reference = np.asarray(reference_mask).astype(bool)
    if reference.shape != segmented.shape:
        h, w = segmented.shape
        reference = cv2.resize(reference.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST) > 0

    union = int(np.logical_or(segmented, reference).sum())
    if union == 0:
        return ShapeScore(0.0, True)

    return ShapeScore(int(np.logical_and(segmented, reference).sum()) / union, False)
