"""Latent edits on StyleStacks and constraint-aware pair sampling.

* :func:`style_mix` keeps the coarse layers ``[0, k)`` of the first stack and the
  fine layers ``[k, L)`` of the second.
* :func:`interpolate` returns ``lam * wA + (1 - lam) * wB``; ``lam`` weights the
  *first* argument.
"""

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Tuple

import numpy as np
from sklearn.metrics import silhouette_score

from latentaug.exception import ConfigError, LatentOpsError, ShapeError
from latentaug.gan_core import StyleStack
from latentaug.utils.seeding import numpy_rng

PAIRS_COLUMNS = ("source_id", "partner_id", "edit_type", "param")
MIN_CLUSTER_SAMPLES = 5


@dataclass(frozen=True)
class CrossoverSpec:

    k: int

    def check(self, num_layers):

        if not 0 <= self.k <= num_layers:
            raise LatentOpsError(f"crossover k={self.k} outside [0, {num_layers}]")
        return self


def default_crossover(num_layers):
    """Half the layers (rounded up) from the shape source, the rest from the style source."""

    return CrossoverSpec(math.ceil(num_layers / 2))


@dataclass(frozen=True)
class InterpolationSpec:

    lambdas: Tuple[float, ...] = (0.25, 0.5, 0.75)

    def __post_init__(self):

        lambdas = tuple(float(x) for x in self.lambdas)
        if not lambdas:
            raise ConfigError("interpolation needs at least one lambda")
        if any(not 0.0 < x < 1.0 for x in lambdas):
            raise ConfigError(f"interpolation lambdas must lie in (0, 1), got {lambdas}")
        if list(lambdas) != sorted(set(lambdas)):
            raise ConfigError(f"interpolation lambdas must be sorted ascending without repeats, got {lambdas}")
        object.__setattr__(self, "lambdas", lambdas)


@dataclass(frozen=True)
class PairConstraint:

    require_same_label: bool = True
    require_same_modality: bool = False
    target_modality: Optional[str] = None
    partners_per_image: int = 3
    compatible: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):

        if not self.require_same_label:
            raise ConfigError("pairs must always share the label")
        if self.partners_per_image < 1:
            raise ConfigError("partners_per_image must be >= 1")
        if self.require_same_modality and self.target_modality is not None:
            raise ConfigError("require_same_modality and target_modality are mutually exclusive")

    def eligible(self, source, partner):

        if partner.path == source.path:
            return False
        if self.require_same_label and partner.label != source.label:
            return False
        if self.require_same_modality and partner.modality != source.modality:
            return False
        if self.target_modality is not None and partner.modality != self.target_modality:
            return False
        if self.compatible is not None and not self.compatible(source, partner):
            return False
        return True


class SkipEntry(NamedTuple):

    source_id: str
    reason: str


class PairRecord(NamedTuple):

    source_id: str
    partner_id: str
    edit_type: str
    param: str


def _check_pair(w1, w2):

    if w1.shape != w2.shape:
        raise ShapeError(f"style stacks differ in shape: {w1.shape} vs {w2.shape}")


def style_mix(w1, w2, spec):
    """Layers ``[0, k)`` from ``w1`` and ``[k, L)`` from ``w2``."""

    _check_pair(w1, w2)
    k = spec.k if isinstance(spec, CrossoverSpec) else int(spec)
    CrossoverSpec(k).check(w1.num_layers)

    return StyleStack(np.concatenate([w1.layers[:k], w2.layers[k:]], axis=0))


def interpolate(wA, wB, lam):
    """``lam * wA + (1 - lam) * wB`` on every layer; ``lam`` in [0, 1]."""

    _check_pair(wA, wB)
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise LatentOpsError(f"lambda must be in [0, 1], got {lam}")

    return StyleStack(lam * wA.layers + (1.0 - lam) * wB.layers)


def interpolation_sweep(wA, wB, spec=InterpolationSpec()):
    """Interpolants for every lambda of ``spec``, from closest-to-``wB`` to closest-to-``wA``."""

    return [interpolate(wA, wB, lam) for lam in spec.lambdas]


def sample_pairs(manifest, inversions, constraint, seed, sources=None):
    """Partners for each source record under ``constraint``.

    Every source draws up to ``partners_per_image`` distinct eligible partners,
    uniformly without replacement, from its own ``("pairs", source_id)`` stream, so
    the result does not depend on source order. Sources with fewer eligible partners
    than requested keep what exists and get a skip-report entry.

    Returns ``(pairs, skips)``: a list of ``(source_id, partner_id)`` and a list of
    :class:`SkipEntry`.
    """

    if inversions is not None:
        missing = [r.path for r in manifest.records if r.path not in inversions]
        if missing:
            raise LatentOpsError(f"{len(missing)} records have no inversion, e.g. {missing[0]!r}")

    by_label = defaultdict(list)
    for r in manifest.records:
        by_label[r.label].append(r)

    sources = manifest.records if sources is None else sources
    pairs, skips = [], []

    for source in sources:

        eligible = [p for p in by_label[source.label] if constraint.eligible(source, p)]
        wanted = constraint.partners_per_image

        if not eligible:
            skips.append(SkipEntry(source.path, "no eligible partner"))
            continue

        rng = numpy_rng(seed, "pairs", source.path)
        chosen = rng.choice(len(eligible), min(wanted, len(eligible)), replace=False)
        pairs += [(source.path, eligible[i].path) for i in chosen]

        if len(chosen) < wanted:
            skips.append(SkipEntry(source.path, f"only {len(chosen)} of {wanted} eligible partners"))

    return pairs, skips


def write_pairs_csv(path, rows):

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAIRS_COLUMNS)
        for row in rows:
            writer.writerow(PairRecord(*row))
    return path


def read_pairs_csv(path):

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != PAIRS_COLUMNS:
            raise LatentOpsError(f"{path}: expected header {','.join(PAIRS_COLUMNS)}")
        return [PairRecord(*row) for row in reader if row]


def cluster_diagnostic(inversions_by_label):
    """Silhouette score of layer-averaged codes grouped by label, in [-1, 1].

    Needs at least two labels with ``MIN_CLUSTER_SAMPLES`` codes each.
    """

    groups = {label: list(codes) for label, codes in inversions_by_label.items()}
    if len(groups) < 2 or any(len(c) < MIN_CLUSTER_SAMPLES for c in groups.values()):
        sizes = ", ".join(f"{label}: {len(c)}" for label, c in sorted(groups.items()))
        raise LatentOpsError(
            f"cluster diagnostic needs >= 2 labels with >= {MIN_CLUSTER_SAMPLES} codes each ({sizes})"
        )

    features, labels = [], []
    for label in sorted(groups):
        for codes in groups[label]:
            features.append(codes.mean() if isinstance(codes, StyleStack) else np.asarray(codes).mean(axis=0))
            labels.append(label)

    return float(silhouette_score(np.asarray(features, dtype=np.float64), labels))
