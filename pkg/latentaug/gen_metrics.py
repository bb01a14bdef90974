"""Generative-model quality: Frechet distance between feature statistics ("toy-FID").

Features come from a small residual classifier trained on the corpus itself
(:func:`train_feature_extractor`); the same feature space is the perceptual loss of
the inversion encoder. Values are not comparable to Inception-based FID.
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F
from sklearn.covariance import LedoitWolf
from sklearn.linear_model import LogisticRegression

from latentaug.checkpoint import Checkpoint, load_module_state, module_state
from latentaug.data_model import load_manifest
from latentaug.exception import ConfigError, SampleSizeError
from latentaug.networks import ResidualClassifier
from latentaug.utils.imaging import images_to_tensor, read_image, to_float
from latentaug.utils.training import encode_targets, fit_classifier, load_images, seeded

logger = logging.getLogger(__name__)

METRIC_NAME = "toy-FID"
EIGEN_FLOOR = 1e-8
EXTRACTOR_KIND = "feature_extractor"


@dataclass(frozen=True)
class FeatureExtractorConfig:

    image_size: int = 64
    feature_dim: int = 64
    width: int = 16
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 1e-3
    target: str = "label_modality"
    seed: int = 0
    device: str = "cpu"

    def __post_init__(self):

        if self.target not in ("label", "label_modality"):
            raise ConfigError(f"target must be 'label' or 'label_modality', got {self.target!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")


@dataclass(frozen=True)
class FidResult:

    value: float
    mean_term: float
    trace_term: float
    floor_hits: int
    shrinkage: bool
    n_a: int
    n_b: int
    metric: str = METRIC_NAME

    def __float__(self):
        return self.value

    def detail(self):
        return dataclasses.asdict(self)


class FeatureExtractor:
    """Penultimate-layer features of a trained :class:`ResidualClassifier`."""

    def __init__(self, network, image_size, classes, corpus_hash="", device="cpu"):

        self.network = network.to(device).eval()
        for param in self.network.parameters():
            param.requires_grad_(False)
        self.image_size = int(image_size)
        self.classes = tuple(classes)
        self.corpus_hash = corpus_hash
        self.device = device

    @property
    def feature_dim(self):
        return self.network.feature_dim

    def feature_tensor(self, x):
        """Differentiable features of ``[batch, 3, H, W]`` images in ``[-1, 1]``."""

        if x.shape[-1] != self.image_size:
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False, antialias=True)
        return self.network.features(x)

    @torch.no_grad()
    def features(self, images, batch_size=64):
        """``(N, feature_dim)`` float64 features of ``(H, W, 3)`` images in [0, 1], in input order."""

        images = [to_float(im) for im in images]
        out = []
        for start in range(0, len(images), batch_size):
            x = images_to_tensor(images[start : start + batch_size], self.device)
            out.append(self.feature_tensor(x).double().cpu().numpy())
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim))

    def to_checkpoint(self, config=None, seed=0):

        config = dict(config or {})
        config.update(image_size=self.image_size, feature_dim=self.feature_dim, width=self.network.stem[0].out_channels)
        return Checkpoint(
            kind=EXTRACTOR_KIND,
            config=config,
            state=module_state(self.network),
            seed=seed,
            meta={"classes": list(self.classes), "corpus_hash": self.corpus_hash},
        )

    @classmethod
    def from_checkpoint(cls, checkpoint, device="cpu"):

        cfg = checkpoint.config
        network = ResidualClassifier(len(checkpoint.meta["classes"]), cfg["width"], cfg["feature_dim"])
        load_module_state(network, checkpoint.state)
        return cls(network, cfg["image_size"], checkpoint.meta["classes"], checkpoint.meta.get("corpus_hash", ""), device)

    @classmethod
    def load(cls, path, device="cpu"):
        return cls.from_checkpoint(Checkpoint.load(path, kind=EXTRACTOR_KIND), device)


def extract_features(images, extractor, batch_size=64):
    return extractor.features(images, batch_size)


def _targets(manifest, target):

    if target == "label":
        values = [r.label for r in manifest.records]
    else:
        values = [f"{r.label}/{r.modality}" for r in manifest.records]
    classes = tuple(sorted(set(values)))
    return encode_targets(values, classes), classes


def train_feature_extractor(manifest, config=FeatureExtractorConfig()):
    """Train the feature network as a small classifier; returns a :class:`FeatureExtractor`.

    With ``target="label_modality"`` the classes are label/modality combinations, so
    the features respond to both blob shape and render style.
    """

    if len(manifest) < 2:
        raise SampleSizeError("feature extractor needs at least two images")

    targets, classes = _targets(manifest, config.target)
    images = load_images(manifest, config.image_size)

    logger.info(f"Features: training extractor on {len(images)} images, classes {', '.join(classes)}")

    with seeded(config.seed, "init", "extractor"):
        network = ResidualClassifier(len(classes), config.width, config.feature_dim)

    def accuracy(y_true, y_pred):
        return float(np.mean(y_true == y_pred))

    _, score, _ = fit_classifier(
        network,
        images,
        targets,
        images[:0],
        targets[:0],
        accuracy,
        learning_rate=config.learning_rate,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        device=config.device,
        log_prefix="Features",
    )

    return FeatureExtractor(network, config.image_size, classes, manifest.content_hash(), config.device)


def linear_probe_accuracy(features, labels, seed=0):
    """Training accuracy of a logistic-regression probe (feature separability check)."""

    probe = LogisticRegression(max_iter=2000, random_state=seed)
    probe.fit(features, labels)
    return float(probe.score(features, labels))


def feature_statistics(features, shrinkage="auto"):
    """Mean and covariance of ``(N, D)`` features.

    Sets smaller than ``D / 4`` use the Ledoit-Wolf estimator when ``shrinkage`` is
    ``"auto"`` (or always with ``"always"``); ``"never"`` raises instead.

    Returns ``(mu, sigma, shrunk)``.
    """

    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise SampleSizeError(f"features must be a 2-D matrix, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise SampleSizeError("features contain non-finite values")

    n, dim = features.shape
    if n < 2:
        raise SampleSizeError(f"need at least 2 samples, got {n}")

    shrunk = shrinkage == "always" or (shrinkage == "auto" and n < dim / 4)
    if shrinkage == "never" and n < dim / 4:
        raise SampleSizeError(f"{n} samples is below the covariance floor of {dim / 4:g} for {dim} features")

    mu = features.mean(axis=0)
    if shrunk:
        logger.warning(f"FID: {n} samples for {dim} features, using Ledoit-Wolf shrinkage")
        sigma = LedoitWolf().fit(features).covariance_
    else:
        sigma = np.cov(features, rowvar=False)

    return mu, np.atleast_2d(sigma), shrunk


def _sqrt_psd(matrix):
    """Symmetric square root with negative eigenvalues clamped to 0; returns ``(root, floor_hits)``."""

    matrix = (matrix + matrix.T) / 2.0
    eigvals, eigvecs = scipy.linalg.eigh(matrix)
    floor_hits = int(np.sum(eigvals < EIGEN_FLOOR))
    root = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T
    return root, floor_hits


def frechet_distance(mu_a, sigma_a, mu_b, sigma_b):
    """``||mu_a - mu_b||^2 + tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^(1/2))``.

    ``tr((A B)^(1/2))`` is the sum of the square roots of the eigenvalues of the
    symmetric product ``sqrt(A) B sqrt(A)``, i.e. the singular values of
    ``sqrt(B) sqrt(A)``; taking them from the SVD keeps identical inputs at an
    exact zero up to roundoff. Covariance eigenvalues below zero are clamped and
    those under ``EIGEN_FLOOR`` counted as floor hits.

    Returns ``(value, mean_term, trace_term, floor_hits)``.
    """

    mu_a, mu_b = np.asarray(mu_a, dtype=np.float64), np.asarray(mu_b, dtype=np.float64)
    sigma_a, sigma_b = np.atleast_2d(sigma_a).astype(np.float64), np.atleast_2d(sigma_b).astype(np.float64)

    sqrt_a, hits_a = _sqrt_psd(sigma_a)
    sqrt_b, hits_b = _sqrt_psd(sigma_b)
    cross = np.linalg.svd(sqrt_b @ sqrt_a, compute_uv=False).sum()

    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    trace_term = float(np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * cross)
    value = max(mean_term + trace_term, 0.0)

    return value, mean_term, trace_term, hits_a + hits_b


def fid(set_a, set_b, extractor=None, shrinkage="auto"):
    """toy-FID between two image sets (or two feature matrices when ``extractor`` is None)."""

    if extractor is not None:
        feats_a, feats_b = extractor.features(set_a), extractor.features(set_b)
    else:
        feats_a, feats_b = np.asarray(set_a, dtype=np.float64), np.asarray(set_b, dtype=np.float64)

    mu_a, sigma_a, shrunk_a = feature_statistics(feats_a, shrinkage)
    mu_b, sigma_b, shrunk_b = feature_statistics(feats_b, shrinkage)

    value, mean_term, trace_term, floor_hits = frechet_distance(mu_a, sigma_a, mu_b, sigma_b)

    return FidResult(value, mean_term, trace_term, floor_hits, shrunk_a or shrunk_b, len(feats_a), len(feats_b))


def load_image_set(source, size):
    """Images of a manifest file or of every PNG in a directory."""

    source = Path(source)
    if source.is_dir():
        paths = sorted(p for p in source.glob("*.png") if not p.name.endswith("_mask.png"))
        if not paths:
            raise FileNotFoundError(f"no PNG images in {source}")
        return [read_image(p, size) for p in paths]

    return list(load_images(load_manifest(source), size))
