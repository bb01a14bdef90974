"""Augmentation recipes: modality translation by style mixing and same-modality interpolation.

A job inverts the train-role images of a manifest with a trained encoder, pairs them
under a :class:`PairConstraint`, edits the codes and writes the synthesized images
to ``out_dir`` together with::

    manifest.tsv       augmented records (labels inherited from the sources)
    pairs.csv          one row per generated image
    skip_report.csv    sources that got fewer partners than requested
    provenance.json    command, config hash, checkpoint and manifest hashes

Augmented records keep the primary source's ``video_id`` and list every source video
in ``extra["source_videos"]``; :func:`assign_role` uses that to keep any image derived
from a non-train video out of training.
"""

import csv
import dataclasses
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Tuple

from latentaug.checkpoint import Checkpoint
from latentaug.config import resolve, to_dict
from latentaug.data_model import (
    ImageRecord,
    Manifest,
    Origin,
    Role,
    check_label_inheritance,
    load_manifest,
    load_splits,
    save_manifest,
)
from latentaug.exception import ConfigError, SplitError, VocabularyError
from latentaug.gan_core import GENERATOR_KIND, StyleStack, synthesize
from latentaug.inversion import encode, load_inversion_pair
from latentaug.latent_ops import (
    CrossoverSpec,
    InterpolationSpec,
    PairConstraint,
    default_crossover,
    interpolate,
    sample_pairs,
    style_mix,
    write_pairs_csv,
)
from latentaug.networks import num_style_layers
from latentaug.process import LatentAugPool, worker_log
from latentaug.utils.hashing import config_hash, file_hash
from latentaug.utils.imaging import read_image, write_image

logger = logging.getLogger(__name__)

TRANSLATE = "translate"
INTERPOLATE = "interpolate"
EDIT_TYPES = (TRANSLATE, INTERPOLATE)
DEFAULT_COUNTS = {TRANSLATE: 5, INTERPOLATE: 3}
SKIP_COLUMNS = ("source_id", "reason")

# loaded once per worker process by _load_models
_MODELS = {}


@dataclass(frozen=True)
class AugmentationJob:
    """One augmentation recipe, usually read from the ``[augment]`` section of a job file.

    ``per_image_count`` is the number of partners per source image: target-modality
    images for ``translate`` (default 5), same-modality images for ``interpolate``
    (default 3, each giving one image per lambda).
    """

    edit_type: str = INTERPOLATE
    manifest: str = ""
    encoder: str = ""
    generator: str = ""
    out_dir: str = "augment"
    target_modality: Optional[str] = None
    per_image_count: Optional[int] = None
    crossover: Optional[int] = None
    lambdas: Tuple[float, ...] = (0.25, 0.5, 0.75)
    require_same_modality: bool = True
    splits: Optional[str] = None
    fold: int = 0
    seed: int = 0

    def __post_init__(self):

        if self.edit_type not in EDIT_TYPES:
            raise ConfigError(f"edit_type must be one of {', '.join(EDIT_TYPES)}, got {self.edit_type!r}")
        if self.edit_type == TRANSLATE and not self.target_modality:
            raise ConfigError("a translate job needs target_modality")
        if self.edit_type == INTERPOLATE and self.target_modality:
            raise ConfigError("interpolation pairs images of the same modality; target_modality must be unset")
        if self.per_image_count is not None and self.per_image_count < 1:
            raise ConfigError("per_image_count must be >= 1")

        # validates the lambda grid
        InterpolationSpec(self.lambdas)

    @property
    def count(self):
        return self.per_image_count or DEFAULT_COUNTS[self.edit_type]

    def constraint(self):

        if self.edit_type == TRANSLATE:
            return PairConstraint(target_modality=self.target_modality, partners_per_image=self.count)
        return PairConstraint(require_same_modality=self.require_same_modality, partners_per_image=self.count)

    def interpolation_spec(self):
        return InterpolationSpec(self.lambdas)

    @classmethod
    def from_file(cls, path, overrides=None):
        """Read the ``[augment]`` section; relative paths are taken from the job file's directory."""

        path = Path(path)
        job = resolve(cls, "augment", path, overrides)

        def anchored(value):
            if not value or Path(value).is_absolute():
                return value
            return (path.parent / value).as_posix()

        return dataclasses.replace(
            job,
            manifest=anchored(job.manifest),
            encoder=anchored(job.encoder),
            generator=anchored(job.generator),
            out_dir=anchored(job.out_dir),
            splits=anchored(job.splits),
        )


class FoldSets(NamedTuple):

    train: Manifest
    val: Manifest
    test: Manifest
    excluded: Manifest


def _load_models(encoder_path, generator_path):

    key = (encoder_path, generator_path)
    if _MODELS.get("key") == key:
        return

    encoder, generator = load_inversion_pair(encoder_path, generator_path)
    _MODELS.update(key=key, encoder=encoder, generator=generator)


def _invert_worker(path):

    image = read_image(path)
    return encode(image, _MODELS["encoder"], allow_resize=True).layers


def _synthesize_worker(item):

    out_dir, entries = item
    for rel_path, layers in entries:
        write_image(Path(out_dir) / rel_path, synthesize(StyleStack(layers), _MODELS["generator"]))

    worker_log("debug", f"Augment: wrote {len(entries)} images")
    return len(entries)


def _stem(record_id):
    return Path(record_id).with_suffix("").as_posix().replace("/", "__")


def _source_videos(*records):

    videos = []
    for r in records:
        for v in r.source_videos():
            if v not in videos:
                videos.append(v)
    return ",".join(videos)


def _generator_layers(generator_path):

    config = Checkpoint.load(generator_path, kind=GENERATOR_KIND).config
    return num_style_layers(config["image_size"])


def _write_skip_report(path, skips):

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SKIP_COLUMNS)
        writer.writerows(skips)


def _write_provenance(path, job, command, base, split, n_outputs, n_skipped):

    config = to_dict(job)
    config.pop("out_dir")

    provenance = {
        "command": command,
        "edit_type": job.edit_type,
        "config": config,
        "config_hash": config_hash(config),
        "checkpoints": {"encoder": file_hash(job.encoder), "generator": file_hash(job.generator)},
        "source_manifest": base.content_hash(),
        "fold": None if split is None else split.fold_index,
        "outputs": n_outputs,
        "skipped": n_skipped,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run(job, manifest, split, out_dir, jobs, log_queue, command):

    base = load_manifest(job.manifest) if manifest is None else manifest
    out_dir = Path(job.out_dir if out_dir is None else out_dir)

    if split is None and job.splits:
        folds = load_splits(job.splits)
        if not 0 <= job.fold < len(folds):
            raise SplitError(f"{job.splits} has {len(folds)} folds, fold {job.fold} requested")
        split = folds[job.fold]

    # only real train-role images are edited or used as partners
    pool_records = [
        r for r in base.records
        if r.origin is Origin.REAL and (split is None or split.role_of(r.video_id) is Role.TRAIN)
    ]
    pool = base.with_records(pool_records)

    if job.edit_type == TRANSLATE:
        if job.target_modality not in base.vocabulary.modalities:
            raise VocabularyError(f"target modality {job.target_modality!r} is not in the manifest vocabulary")
        sources = [r for r in pool_records if r.modality != job.target_modality]
    else:
        sources = pool_records

    pairs, skips = sample_pairs(pool, None, job.constraint(), job.seed, sources)

    logger.info(
        f"Augment: {job.edit_type} job, {len(sources)} sources, {len(pairs)} pairs, "
        f"{len(skips)} sources short of partners"
    )
    for skip in skips:
        logger.warning(f"Augment: source {skip.source_id}: {skip.reason}")

    num_layers = _generator_layers(job.generator)
    crossover = CrossoverSpec(job.crossover).check(num_layers) if job.crossover is not None else default_crossover(num_layers)

    pool_runner = LatentAugPool(
        jobs=jobs, initializer=_load_models, initargs=(job.encoder, job.generator), log_queue=log_queue
    )

    needed = list(dict.fromkeys(record_id for pair in pairs for record_id in pair))
    codes = pool_runner.map(_invert_worker, [base.resolve(base[i]).as_posix() for i in needed])
    inversions = {record_id: StyleStack(c) for record_id, c in zip(needed, codes)}

    records, rows = [], []
    work = defaultdict(list)
    partner_index = Counter()

    for source_id, partner_id in pairs:

        source, partner = base[source_id], base[partner_id]
        w_source, w_partner = inversions[source_id], inversions[partner_id]
        j = partner_index[source_id]
        partner_index[source_id] += 1

        if job.edit_type == TRANSLATE:
            edits = [("mix", f"k={crossover.k}", style_mix(w_source, w_partner, crossover), job.target_modality, f"mix{j}")]
        else:
            edits = [
                ("interp", f"lambda={lam:g}", interpolate(w_source, w_partner, lam), source.modality, f"interp{j}_{e}")
                for e, lam in enumerate(job.interpolation_spec().lambdas)
            ]

        for edit, param, styles, modality, tag in edits:

            path = f"images/{_stem(source_id)}_{tag}.png"
            records.append(
                ImageRecord(
                    path=path,
                    label=source.label,
                    modality=modality,
                    video_id=source.video_id,
                    origin=Origin.TRANSLATED if job.edit_type == TRANSLATE else Origin.INTERPOLATED,
                    source_ids=(source_id, partner_id),
                    extra={"edit": edit, "param": param, "source_videos": _source_videos(source, partner)},
                )
            )
            rows.append((source_id, partner_id, edit, param))
            work[source_id].append((path, styles.layers))

    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    pool_runner.map(_synthesize_worker, [(out_dir.as_posix(), entries) for entries in work.values()])

    augmented = Manifest(
        tuple(records),
        base.vocabulary,
        {"command": command, "seed": str(job.seed), "source_manifest": base.content_hash()},
        out_dir,
    )
    check_label_inheritance(augmented, reference=base)

    save_manifest(augmented, out_dir / "manifest.tsv")
    write_pairs_csv(out_dir / "pairs.csv", rows)
    _write_skip_report(out_dir / "skip_report.csv", skips)
    _write_provenance(out_dir / "provenance.json", job, command, base, split, len(records), len(skips))

    logger.info(f"Augment: wrote {len(records)} images to {out_dir}")

    return augmented


def run_translation(job, manifest=None, split=None, out_dir=None, jobs=1, log_queue=None, command="augment run"):
    """Style-mix every train-role source with up to ``job.count`` same-label target-modality images.

    Outputs keep the source's coarse layers (shape) and take the target's fine layers
    (appearance); they carry the source label and the target modality.
    """

    if job.edit_type != TRANSLATE:
        raise ConfigError(f"run_translation needs a translate job, got {job.edit_type!r}")
    return _run(job, manifest, split, out_dir, jobs, log_queue, command)


def run_interpolation(job, manifest=None, split=None, out_dir=None, jobs=1, log_queue=None, command="augment run"):
    """Interpolate every train-role source with up to ``job.count`` same-label partners at each lambda."""

    if job.edit_type != INTERPOLATE:
        raise ConfigError(f"run_interpolation needs an interpolate job, got {job.edit_type!r}")
    return _run(job, manifest, split, out_dir, jobs, log_queue, command)


def run_job(job, manifest=None, split=None, out_dir=None, jobs=1, log_queue=None, command="augment run"):

    runner = run_translation if job.edit_type == TRANSLATE else run_interpolation
    return runner(job, manifest, split, out_dir, jobs, log_queue, command)


def assign_role(record, split, video_of=None):
    """Role of ``record`` under ``split``.

    Real records take their video's role. Augmented records are ``train`` when every
    source video is a train video and ``excluded`` otherwise; without a
    ``source_videos`` entry the sources are looked up through ``video_of``
    (record id -> video id).

    Raises
    ------
    SplitError
        a real record's video is not in the split
    """

    if record.origin is Origin.REAL:
        role = split.role_of(record.video_id)
        if role is None:
            raise SplitError(f"video {record.video_id!r} of {record.path!r} is not in fold {split.fold_index}")
        return role

    videos = list(record.source_videos())
    if record.get("source_videos") is None and video_of is not None:
        videos += [video_of[s] for s in record.source_ids if s in video_of]

    if all(split.role_of(v) is Role.TRAIN for v in videos):
        return Role.TRAIN
    return Role.EXCLUDED


def fold_sets(manifest, split, video_of=None):
    """Train/val/test manifests of one fold; augmented records only ever enter training."""

    by_role = defaultdict(list)
    for r in manifest.records:
        by_role[assign_role(r, split, video_of)].append(r)

    def subset(role):
        return manifest.with_records(by_role[role])

    return FoldSets(subset(Role.TRAIN), subset(Role.VAL), subset(Role.TEST), subset(Role.EXCLUDED))


def merge_manifests(base, augmented):
    """Concatenate ``base`` and augmented manifests into one manifest rooted at ``base.root``.

    Raises
    ------
    VocabularyError
        an augmented manifest's vocabulary differs from ``base``
    ManifestInvariantError
        two records share a path
    LabelInheritanceError
        an edited record's label differs from one of its sources
    """

    records = list(base.records)
    chain = [base.content_hash()[:12]]

    for aug in augmented:

        if not aug.vocabulary.same_as(base.vocabulary):
            raise VocabularyError(
                f"cannot merge vocabularies {aug.vocabulary.labels}/{aug.vocabulary.modalities} "
                f"into {base.vocabulary.labels}/{base.vocabulary.modalities}"
            )

        for r in aug.records:
            path = r.path
            if base.root is not None and aug.root is not None:
                path = Path(os.path.relpath(aug.resolve(r), base.root)).as_posix()
            records.append(r.replace(path=path))

        chain.append(aug.content_hash()[:12])

    merged = base.with_records(records, merged_from=" + ".join(chain))
    logger.info(f"Augment: merged {len(base)} base and {len(merged) - len(base)} augmented records")
    return merged
