"""Labeled image corpus representation and the video-level split engine.

A :class:`Manifest` is an ordered, immutable list of :class:`ImageRecord` plus the
label/modality vocabulary. On disk it is UTF-8 text: ``#label:`` / ``#modality:``
header lines, then one tab-separated record per line::

    path  label  modality  video_id  origin  source_ids[,...]  [key=value;...]

Record paths are relative to the manifest file's directory and double as record ids.
"""

import collections
import dataclasses
import enum
import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from latentaug.exception import (
    LabelInheritanceError,
    ManifestInvariantError,
    ManifestParseError,
    SplitError,
    VocabularyError,
)
from latentaug.utils.hashing import bytes_hash
from latentaug.utils.seeding import numpy_rng

logger = logging.getLogger(__name__)

MODALITIES = ("WLI", "NBI", "DYED", "SYNTH_A", "SYNTH_B")
POSITIVE_LABEL = "neoplastic"
NEGATIVE_LABEL = "non_neoplastic"

# modalities used by the translation/interpolation experiments unless asked otherwise
EXPERIMENT_MODALITIES = ("WLI", "NBI", "SYNTH_A", "SYNTH_B")


class Origin(str, enum.Enum):

    REAL = "real"
    TRANSLATED = "translated"
    INTERPOLATED = "interpolated"
    GENERATED = "generated"


class Role(str, enum.Enum):

    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    # records only: augmented images whose sources are not all train-role videos
    EXCLUDED = "excluded"


EDITED_ORIGINS = (Origin.TRANSLATED, Origin.INTERPOLATED)

# separators of the manifest's extra column; "=" is allowed in values
EXTRA_KEY_RESERVED = (";", "=", "\t", "\n", "\r")
EXTRA_VALUE_RESERVED = (";", "\t", "\n", "\r")


@dataclass(frozen=True)
class ImageRecord:

    path: str
    label: str
    modality: str
    video_id: str
    origin: Origin = Origin.REAL
    source_ids: Tuple[str, ...] = ()
    extra: Tuple[Tuple[str, str], ...] = ()

    def __post_init__(self):

        try:
            object.__setattr__(self, "origin", Origin(self.origin))
        except ValueError:
            raise ManifestInvariantError(self.path, f"unknown origin {self.origin!r}") from None

        object.__setattr__(self, "source_ids", tuple(self.source_ids))
        extra = self.extra.items() if isinstance(self.extra, Mapping) else self.extra
        object.__setattr__(self, "extra", tuple(sorted((str(k), str(v)) for k, v in extra)))

        # extra is stored as one "k=v;k=v" manifest column
        for k, v in self.extra:
            if any(c in k for c in EXTRA_KEY_RESERVED) or any(c in v for c in EXTRA_VALUE_RESERVED):
                raise ManifestInvariantError(self.path, f"extra item {k!r}={v!r} contains a reserved character")

        if not self.path:
            raise ManifestInvariantError(self.path, "empty path")
        if self.origin is Origin.REAL and self.source_ids:
            raise ManifestInvariantError(self.path, "real records cannot have source ids")
        if self.origin in EDITED_ORIGINS and not self.source_ids:
            raise ManifestInvariantError(self.path, f"{self.origin.value} record needs source ids")

    @property
    def record_id(self):
        return self.path

    @property
    def is_augmented(self):
        return self.origin is not Origin.REAL

    def get(self, key, default=None):

        for k, v in self.extra:
            if k == key:
                return v
        return default

    def source_videos(self):
        """Video ids of every image this record was made from (its own for real records)."""

        listed = self.get("source_videos")
        if listed:
            return tuple(v for v in listed.split(",") if v)
        return (self.video_id,)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Vocabulary:

    labels: Tuple[str, ...]
    modalities: Tuple[str, ...]

    def __post_init__(self):

        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "modalities", tuple(self.modalities))

        unknown = [m for m in self.modalities if m not in MODALITIES]
        if unknown:
            raise VocabularyError(f"unknown modality {unknown[0]!r}; allowed: {', '.join(MODALITIES)}")
        if len(set(self.labels)) != len(self.labels) or len(set(self.modalities)) != len(self.modalities):
            raise VocabularyError("vocabulary has duplicate entries")

    def same_as(self, other):
        return set(self.labels) == set(other.labels) and set(self.modalities) == set(other.modalities)


@dataclass(frozen=True, eq=False)
class Manifest:

    records: Tuple[ImageRecord, ...]
    vocabulary: Vocabulary
    provenance: Dict[str, str] = field(default_factory=dict)
    root: Optional[Path] = None

    def __post_init__(self):

        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "provenance", {str(k): str(v) for k, v in self.provenance.items()})
        if self.root is not None:
            object.__setattr__(self, "root", Path(self.root))
        self.validate()

    def validate(self):

        seen = set()
        for rec in self.records:

            if rec.path in seen:
                raise ManifestInvariantError(rec.path, "duplicate path")
            seen.add(rec.path)

            if rec.label not in self.vocabulary.labels:
                raise VocabularyError(f"record {rec.path!r}: label {rec.label!r} not in vocabulary")
            if rec.modality not in self.vocabulary.modalities:
                raise VocabularyError(f"record {rec.path!r}: modality {rec.modality!r} not in vocabulary")

        check_label_inheritance(self)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, record_id):
        return self.by_id[record_id]

    def __contains__(self, record_id):
        return record_id in self.by_id

    @functools.cached_property
    def by_id(self):
        return {r.path: r for r in self.records}

    def video_ids(self):
        return sorted({r.video_id for r in self.records})

    def resolve(self, record):
        """Absolute path of ``record`` (records are relative to the manifest directory)."""

        path = Path(record.path if isinstance(record, ImageRecord) else record)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path

    def with_records(self, records, **provenance):

        prov = dict(self.provenance)
        prov.update(provenance)
        return Manifest(tuple(records), self.vocabulary, prov, self.root)

    def serialize(self):

        lines = [
            "#label: " + ",".join(self.vocabulary.labels),
            "#modality: " + ",".join(self.vocabulary.modalities),
        ]
        lines += [f"#{k}: {v}" for k, v in sorted(self.provenance.items())]

        for r in self.records:
            cols = [r.path, r.label, r.modality, r.video_id, r.origin.value, ",".join(r.source_ids)]
            if r.extra:
                cols.append(";".join(f"{k}={v}" for k, v in r.extra))
            lines.append("\t".join(cols))

        return "\n".join(lines) + "\n"

    def content_hash(self):
        return bytes_hash(self.serialize())


@dataclass(frozen=True, eq=False)
class SplitAssignment:

    fold_index: int
    roles: Mapping[str, Role]

    def __post_init__(self):

        object.__setattr__(self, "roles", {str(v): Role(r) for v, r in sorted(self.roles.items())})
        if any(r is Role.EXCLUDED for r in self.roles.values()):
            raise SplitError("videos can only be train, val or test")

    def role_of(self, video_id):
        return self.roles.get(video_id)

    def videos(self, role):
        role = Role(role)
        return [v for v, r in self.roles.items() if r is role]


def load_manifest(path):
    """Parse a manifest file.

    Raises
    ------
    ManifestParseError
        malformed line (carries the line number)
    ManifestInvariantError, VocabularyError
        a record breaks a manifest invariant (names the record)
    """

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")

    labels = modalities = None
    provenance = {}
    records = []

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):

            line = raw.rstrip("\r\n")
            if not line.strip():
                continue

            if line.startswith("#"):
                key, sep, value = line[1:].partition(":")
                if not sep:
                    raise ManifestParseError(path, lineno, "header line needs 'key: value'")
                key, value = key.strip(), value.strip()
                items = tuple(v.strip() for v in value.split(",") if v.strip())
                if key == "label":
                    labels = items
                elif key == "modality":
                    modalities = items
                else:
                    provenance[key] = value
                continue

            cols = line.split("\t")
            if len(cols) not in (6, 7):
                raise ManifestParseError(path, lineno, f"expected 6 or 7 tab-separated fields, got {len(cols)}")

            rec_path, label, modality, video_id, origin, sources = cols[:6]
            try:
                origin = Origin(origin)
            except ValueError:
                raise ManifestParseError(path, lineno, f"unknown origin {origin!r}") from None

            extra = {}
            if len(cols) == 7 and cols[6]:
                for item in cols[6].split(";"):
                    k, sep, v = item.partition("=")
                    if not sep:
                        raise ManifestParseError(path, lineno, f"bad extra item {item!r}")
                    extra[k] = v

            records.append(
                ImageRecord(
                    path=rec_path,
                    label=label,
                    modality=modality,
                    video_id=video_id,
                    origin=origin,
                    source_ids=tuple(s for s in sources.split(",") if s),
                    extra=extra,
                )
            )

    if labels is None or modalities is None:
        raise ManifestParseError(path, 1, "missing '#label:' or '#modality:' header")

    return Manifest(tuple(records), Vocabulary(labels, modalities), provenance, path.parent)


def save_manifest(manifest, path):

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(manifest.serialize())
    return path


def check_label_inheritance(manifest, reference=None):
    """Every edited record must share the label of each of its sources.

    Sources are looked up in ``manifest`` and, when given, ``reference``; sources
    found in neither are not checked.
    """

    lookup = dict(reference.by_id) if reference is not None else {}
    lookup.update(manifest.by_id)

    for rec in manifest.records:
        if rec.origin not in EDITED_ORIGINS:
            continue
        for sid in rec.source_ids:
            src = lookup.get(sid)
            if src is not None and src.label != rec.label:
                raise LabelInheritanceError(
                    rec.path, f"label {rec.label!r} differs from source {sid!r} label {src.label!r}"
                )


def _as_set(value):

    if value is None:
        return None
    if isinstance(value, (str, enum.Enum)):
        value = (value,)
    return {v.value if isinstance(v, enum.Enum) else v for v in value}


def filter_manifest(manifest, predicate=None, *, label=None, modality=None, origin=None):
    """Subset of ``manifest`` in record order; the vocabulary is unchanged.

    ``label``, ``modality`` and ``origin`` accept one value or a collection; all given
    conditions and ``predicate`` must hold.
    """

    labels, modalities, origins = _as_set(label), _as_set(modality), _as_set(origin)

    def keep(r):
        return (
            (labels is None or r.label in labels)
            and (modalities is None or r.modality in modalities)
            and (origins is None or r.origin.value in origins)
            and (predicate is None or predicate(r))
        )

    return Manifest(tuple(r for r in manifest.records if keep(r)), manifest.vocabulary, manifest.provenance, manifest.root)


def video_labels(manifest):
    """Majority label of each video over its real records (ties: alphabetical)."""

    counts = collections.defaultdict(collections.Counter)
    for r in manifest.records:
        if r.origin is Origin.REAL:
            counts[r.video_id][r.label] += 1

    return {
        video: sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        for video, c in sorted(counts.items())
    }


def largest_remainder(total, weights):
    """Split ``total`` into integers proportional to ``weights`` (ties go to the earlier entry)."""

    weights = np.asarray(weights, dtype=float)
    if weights.sum() <= 0:
        return [0] * len(weights)

    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    fractions = quotas - counts
    order = sorted(range(len(weights)), key=lambda i: (-fractions[i], i))
    for i in order[: total - int(counts.sum())]:
        counts[i] += 1

    return [int(c) for c in counts]


def make_splits(manifest, k=5, ratios=(0.6, 0.2, 0.2), seed=0):
    """Video-level, label-stratified K-fold train/val/test assignments.

    Videos of each label stratum (a video's label is its majority label) are shuffled
    with the ``"splits"`` stream of ``seed`` and cut into ``k`` chunks whose sizes
    differ by at most one; the larger chunks of successive labels fall in different
    folds. In fold ``f`` chunk ``f`` is the test set. The fold's validation size is
    chosen so that the fold's validation and training totals are both within one
    video of their ``ratios[1] : ratios[0]`` targets, and it is shared between labels
    in proportion to their remaining videos, starting from chunk ``f + 1``. Every
    video is tested exactly once and the test share is ``1/k``.

    Raises
    ------
    SplitError
        ``k < 2``, bad ratios, or a label with fewer than ``k`` videos
    """

    if int(k) != k or k < 2:
        raise SplitError(f"k must be an integer >= 2, got {k}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise SplitError(f"ratios must be three non-negative shares summing to 1, got {ratios}")
    if abs(ratios[2] - 1.0 / k) > 1e-6:
        logger.warning(f"test share is fixed at 1/{k} by the fold scheme; ratio {ratios[2]} ignored")

    strata = collections.defaultdict(list)
    for video, label in video_labels(manifest).items():
        strata[label].append(video)

    if not strata:
        raise SplitError("manifest has no real records to split")

    for label in sorted(strata):
        if len(strata[label]) < k:
            raise SplitError(f"label {label!r} has {len(strata[label])} videos; {k} folds need at least {k}")

    rng = numpy_rng(seed, "splits")
    chunks = {}
    offset = 0
    for label in sorted(strata):
        videos = sorted(strata[label])
        shuffled = [videos[i] for i in rng.permutation(len(videos))]
        base, extra = divmod(len(shuffled), k)

        # folds holding one extra video rotate across labels
        sizes = [base] * k
        for j in range(extra):
            sizes[(offset + j) % k] += 1
        offset = (offset + extra) % k

        bounds = np.cumsum([0] + sizes)
        chunks[label] = [shuffled[bounds[i] : bounds[i + 1]] for i in range(k)]

    n_videos = sum(len(v) for v in strata.values())
    val_share = ratios[1] / (ratios[0] + ratios[1]) if ratios[0] + ratios[1] > 0 else 0.0
    val_target = n_videos * (1.0 - 1.0 / k) * val_share

    assignments = []
    for fold in range(k):

        rest = {}
        for label in sorted(chunks):
            parts = chunks[label]
            rest[label] = [v for c in parts[fold + 1 :] + parts[:fold] for v in c]

        # fold-level validation size: within one video of both the val and train targets
        n_test = sum(len(chunks[label][fold]) for label in chunks)
        n_val = int(np.floor(val_target - (n_test - n_videos / k) / 2 + 0.5))
        n_val = min(max(n_val, 0), sum(len(r) for r in rest.values()))

        per_label = _share_validation(n_val, {label: len(r) for label, r in rest.items()})

        roles = {}
        for label in sorted(chunks):
            roles.update({v: Role.TEST for v in chunks[label][fold]})
            roles.update({v: Role.VAL for v in rest[label][: per_label[label]]})
            roles.update({v: Role.TRAIN for v in rest[label][per_label[label] :]})

        assignments.append(SplitAssignment(fold, roles))

    return assignments


def _share_validation(n_val, rest_sizes):
    """Split ``n_val`` over labels proportionally to their non-test videos, keeping one training video per label."""

    labels = sorted(rest_sizes)
    quotas = largest_remainder(n_val, [rest_sizes[label] for label in labels])
    caps = [max(rest_sizes[label] - 1, 0) for label in labels]
    counts = [min(q, c) for q, c in zip(quotas, caps)]

    total = sum(rest_sizes.values())
    while sum(counts) < n_val:
        room = [i for i in range(len(labels)) if counts[i] < caps[i]]
        if not room:
            break
        i = max(room, key=lambda i: (n_val * rest_sizes[labels[i]] / total - counts[i], -i))
        counts[i] += 1

    return dict(zip(labels, counts))


def save_splits(assignments, path):

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in sorted(assignments, key=lambda a: a.fold_index):
            for video, role in a.roles.items():
                fh.write(f"{video}\t{a.fold_index}\t{role.value}\n")
    return path


def load_splits(path):

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"split file not found: {path}")

    folds = collections.defaultdict(dict)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ManifestParseError(path, lineno, "expected video_id<TAB>fold<TAB>role")
            video, fold, role = cols
            try:
                folds[int(fold)][video] = Role(role)
            except ValueError as e:
                raise ManifestParseError(path, lineno, str(e)) from None

    return [SplitAssignment(f, roles) for f, roles in sorted(folds.items())]
