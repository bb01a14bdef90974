"""``latentaug`` command line.

Every subcommand accepts ``--seed``, ``--config``, ``--out``, ``--jobs`` and
``--log-level``, logs to ``<out>/latentaug.log`` and writes ``<out>/run_record.json``
beside its outputs. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import csv
import dataclasses
import difflib
import json
import logging
import re
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Tuple

import multiprocess as mp
import numpy as np

from latentaug import __version__
from latentaug.augmentation import AugmentationJob, run_job
from latentaug.checkpoint import Checkpoint
from latentaug.classifier_eval import ClassifierConfig, cross_validate, default_grid, write_report
from latentaug.config import output_root, read_section, resolve, to_dict
from latentaug.data_model import Origin, load_manifest, make_splits, save_splits
from latentaug.exception import LatentAugError, UsageError
from latentaug.gan_core import GENERATOR_KIND, GanConfig, StyleStack, load_generator, synthesize, train_gan
from latentaug.gen_metrics import (
    FeatureExtractor,
    FeatureExtractorConfig,
    fid,
    linear_probe_accuracy,
    load_image_set,
    train_feature_extractor,
)
from latentaug.inversion import (
    EncoderConfig,
    encode,
    invert,
    invert_by_optimization,
    layer_variance,
    load_inversion_pair,
    train_encoder,
)
from latentaug.latent_ops import (
    InterpolationSpec,
    cluster_diagnostic,
    default_crossover,
    interpolate,
    interpolation_sweep,
    style_mix,
)
from latentaug.logger import LatentAugLogger
from latentaug.report import interpolation_row, report_grid
from latentaug.synthetic_corpus import ToyParams, build_corpus
from latentaug.utils.imaging import read_image, write_image
from latentaug.utils.training import load_images

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

RUN_RECORD = "run_record.json"

DEFAULT_OUT = {
    "corpus build": "corpus",
    "split make": "splits",
    "gan train": "gan",
    "encoder train": "encoder",
    "invert": "inversions",
    "edit mix": "edits",
    "edit interp": "edits",
    "edit sweep": "edits",
    "classify cv": "cv",
    "metrics fid": "metrics",
    "metrics train-extractor": "metrics",
    "metrics cluster": "metrics",
    "report grid": "report",
}


@dataclass(frozen=True)
class SplitConfig:

    k: int = 5
    ratios: Tuple[float, ...] = (0.6, 0.2, 0.2)
    seed: int = 0


@dataclass
class RunRecord:

    command: str
    argv: list
    started: str
    config: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    seed: Optional[int] = None
    finished: str = ""
    version: str = __version__
    nondeterministic_kernels: bool = False

    def save(self, out_dir):

        path = Path(out_dir) / RUN_RECORD
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        return path


def _now():
    return datetime.now().isoformat(timespec="seconds")


class _Parser(argparse.ArgumentParser):
    """Raises :class:`UsageError` instead of exiting, with a close-match suggestion."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {self._suggest(message)}")

    def _suggest(self, message):

        word, candidates = None, []

        unknown = re.search(r"unrecognized arguments: (.*)", message)
        choice = re.search(r"invalid choice: '?([^' ]*)'? \(choose from (.*)\)", message)

        if unknown:
            flags = [t for t in unknown.group(1).split() if t.startswith("-")]
            word = flags[0].split("=")[0] if flags else None
            candidates = list(self._option_string_actions)
        elif choice:
            word = choice.group(1)
            candidates = [c.strip().strip("'") for c in choice.group(2).split(",")]

        matches = difflib.get_close_matches(word, candidates, n=1) if word else []
        return f"{message} (did you mean {matches[0]}?)" if matches else message


def _common(parser):

    parser.add_argument("--seed", type=int, default=None, help="root seed (overrides the config file)")
    parser.add_argument("--config", type=str, default=None, help="INI config file")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    parser.add_argument("--log-level", type=str, default="info", choices=("debug", "info", "warning", "error"))


def _leaf(subparsers, name, command, handler, help_text):

    parser = subparsers.add_parser(name, help=help_text, description=help_text)
    _common(parser)
    parser.set_defaults(command=command, handler=handler, leaf=parser)
    return parser


def _group(subparsers, name, help_text):

    parser = subparsers.add_parser(name, help=help_text)
    return parser.add_subparsers(dest=f"{name}_command", metavar="ACTION", required=True, parser_class=_Parser)


def _overrides(**values):
    return {k: v for k, v in values.items() if v is not None}


def _csv_list(value):
    return tuple(v.strip() for v in value.split(",") if v.strip()) if value else None


### handlers ###


def _corpus_build(args, run, out_dir, log_queue):

    params = resolve(
        ToyParams,
        "corpus",
        args.config,
        _overrides(seed=args.seed, image_size=args.size, n_videos=args.videos, frames_per_video=args.frames),
    )
    manifest = build_corpus(params, out_dir, args.jobs, log_queue, command=run.command)

    run.config, run.seed = to_dict(params), params.seed
    run.hashes["manifest"] = manifest.content_hash()


def _split_make(args, run, out_dir, log_queue):

    config = resolve(SplitConfig, "split", args.config, _overrides(seed=args.seed, k=args.k, ratios=args.ratios))
    manifest = load_manifest(args.manifest)
    splits = make_splits(manifest, config.k, config.ratios, config.seed)
    save_splits(splits, Path(out_dir) / "splits.tsv")

    run.config, run.seed = to_dict(config), config.seed
    run.hashes["manifest"] = manifest.content_hash()


def _load_extractor(path):
    return FeatureExtractor.load(path) if path else None


def _gan_train(args, run, out_dir, log_queue):

    config = resolve(
        GanConfig, "gan", args.config, _overrides(seed=args.seed, steps=args.steps, batch_size=args.batch_size)
    )
    manifest = load_manifest(args.manifest)
    checkpoint = train_gan(manifest, config, _load_extractor(args.extractor), out_dir)
    checkpoint.save(Path(out_dir) / "generator.npz")

    run.config, run.seed = to_dict(config), config.seed
    run.hashes.update(manifest=manifest.content_hash(), generator=checkpoint.state_hash())
    run.nondeterministic_kernels = checkpoint.meta["nondeterministic_kernels"]


def _encoder_train(args, run, out_dir, log_queue):

    config = resolve(
        EncoderConfig, "encoder", args.config, _overrides(seed=args.seed, steps=args.steps, batch_size=args.batch_size)
    )
    manifest = load_manifest(args.manifest)
    generator = Checkpoint.load(args.generator, kind=GENERATOR_KIND)
    checkpoint = train_encoder(manifest, generator, config, _load_extractor(args.extractor))
    checkpoint.save(Path(out_dir) / "encoder.npz")

    run.config, run.seed = to_dict(config), config.seed
    run.hashes.update(manifest=manifest.content_hash(), generator=generator.state_hash(), encoder=checkpoint.state_hash())
    run.nondeterministic_kernels = checkpoint.meta["nondeterministic_kernels"]


def _invert(args, run, out_dir, log_queue):

    settings = dict(read_section(args.config, "invert"))
    optimize_steps = int(args.optimize_steps if args.optimize_steps is not None else settings.get("optimize_steps", 0))
    seed = args.seed if args.seed is not None else int(settings.get("seed", 0))

    encoder, generator = load_inversion_pair(args.encoder, args.generator)
    extractor = _load_extractor(args.extractor)

    out_dir = Path(out_dir)
    (out_dir / "codes").mkdir(parents=True, exist_ok=True)
    rows, tiles = [], []

    for path in args.images:

        image = read_image(path)
        result = invert(image, encoder, generator, extractor, allow_resize=args.allow_resize)
        stem = Path(path).stem
        np.save(out_dir / "codes" / f"{stem}.npy", result.styles.layers)

        row = {"image": Path(path).as_posix(), "method": "encoder", **result.distortion}
        row.update(layer_variance=layer_variance(result.styles), degenerate=result.degenerate, resized=result.resized)
        rows.append(row)
        tiles += [read_image(path, generator.image_size), result.reconstruction]

        if optimize_steps:
            projected = invert_by_optimization(
                image, generator, optimize_steps, seed, extractor, allow_resize=args.allow_resize
            )
            np.save(out_dir / "codes" / f"{stem}_optimized.npy", projected.styles.layers)
            row = {"image": Path(path).as_posix(), "method": "optimization", **projected.distortion}
            row.update(
                layer_variance=layer_variance(projected.styles), degenerate=projected.degenerate, resized=projected.resized
            )
            rows.append(row)

    columns = ["image", "method", "l2", "pyramid"] + (["perceptual"] if extractor else []) + [
        "layer_variance", "degenerate", "resized"
    ]
    with open(out_dir / "distortion.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    report_grid(tiles, out_dir / "reconstructions.png", columns=2)

    run.config = {"allow_resize": args.allow_resize, "optimize_steps": optimize_steps}
    run.seed = seed


def _load_styles(path):

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"style code not found: {path}")
    return StyleStack(np.load(path))


def _edit(args, run, out_dir, log_queue):

    generator = load_generator(args.generator)
    w_a, w_b = _load_styles(args.a), _load_styles(args.b)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if run.command == "edit mix":
        k = args.k if args.k is not None else default_crossover(w_a.num_layers).k
        styles, name = style_mix(w_a, w_b, k), f"mix_k{k}"
        run.config = {"k": k}
    elif run.command == "edit interp":
        styles, name = interpolate(w_a, w_b, args.lam), f"interp_{args.lam:g}"
        run.config = {"lambda": args.lam}
    else:
        spec = InterpolationSpec(args.lambdas)
        images = [synthesize(s, generator, args.noise_seed) for s in interpolation_sweep(w_a, w_b, spec)]
        row = interpolation_row(synthesize(w_a, generator, args.noise_seed), synthesize(w_b, generator, args.noise_seed), images)
        report_grid(row, out_dir / "sweep.png", columns=len(row))
        run.config = {"lambdas": list(spec.lambdas), "noise_seed": args.noise_seed}
        return

    np.save(out_dir / f"{name}.npy", styles.layers)
    write_image(out_dir / f"{name}.png", synthesize(styles, generator, args.noise_seed))
    run.config["noise_seed"] = args.noise_seed


def _augment_run(args, run, out_dir, log_queue):

    job = AugmentationJob.from_file(args.job, _overrides(seed=args.seed))
    manifest = run_job(job, out_dir=out_dir, jobs=args.jobs, log_queue=log_queue, command=run.command)

    run.config, run.seed = to_dict(job), job.seed
    run.hashes["manifest"] = manifest.content_hash()


def _classify_cv(args, run, out_dir, log_queue):

    base = resolve(ClassifierConfig, "classifier", args.config, _overrides(seed=args.seed, epochs=args.epochs))
    grid = [base] if args.no_grid else default_grid(base)
    jobs = [AugmentationJob.from_file(path) for path in args.augment]
    manifest = load_manifest(args.manifest)

    report = cross_validate(
        manifest,
        jobs,
        grid,
        k=args.k,
        seed=base.seed,
        train_modalities=_csv_list(args.train_modalities),
        test_modalities=_csv_list(args.test_modalities),
        jobs=args.jobs,
        out_dir=out_dir,
        log_queue=log_queue,
    )
    write_report(report, out_dir)
    print((Path(out_dir) / "report.txt").read_text())

    run.config = {"classifier": to_dict(base), "grid_size": len(grid), "k": args.k, "augment": list(args.augment)}
    run.seed = base.seed
    run.hashes["manifest"] = manifest.content_hash()


def _metrics_fid(args, run, out_dir, log_queue):

    extractor = FeatureExtractor.load(args.extractor)
    set_a = load_image_set(args.a, extractor.image_size)
    set_b = load_image_set(args.b, extractor.image_size)
    result = fid(set_a, set_b, extractor, args.shrinkage)

    with open(Path(out_dir) / "fid.json", "w", encoding="utf-8") as fh:
        json.dump(result.detail(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{result.metric} {result.value:.6f}")

    run.config = {"shrinkage": args.shrinkage}


def _metrics_train_extractor(args, run, out_dir, log_queue):

    config = resolve(FeatureExtractorConfig, "features", args.config, _overrides(seed=args.seed, epochs=args.epochs))
    manifest = load_manifest(args.manifest)
    extractor = train_feature_extractor(manifest, config)
    checkpoint = extractor.to_checkpoint(to_dict(config), config.seed)
    checkpoint.save(Path(out_dir) / "extractor.npz")

    probe = linear_probe_accuracy(
        extractor.features(load_images(manifest, config.image_size)), [r.label for r in manifest.records], config.seed
    )
    logger.info(f"Features: linear probe accuracy on labels {probe:.3f}")

    run.config, run.seed = to_dict(config), config.seed
    run.hashes.update(manifest=manifest.content_hash(), extractor=checkpoint.state_hash())


def _metrics_cluster(args, run, out_dir, log_queue):

    manifest = load_manifest(args.manifest)
    encoder, _ = load_inversion_pair(args.encoder, args.generator)

    by_label = defaultdict(list)
    for r in manifest.records:
        if r.origin is Origin.REAL:
            by_label[r.label].append(encode(read_image(manifest.resolve(r)), encoder, allow_resize=True))

    score = cluster_diagnostic(by_label)
    with open(Path(out_dir) / "cluster.json", "w", encoding="utf-8") as fh:
        json.dump({"silhouette": score, "counts": {k: len(v) for k, v in sorted(by_label.items())}}, fh, indent=2)
        fh.write("\n")
    print(f"silhouette {score:.4f}")

    run.hashes["manifest"] = manifest.content_hash()


def _report_grid(args, run, out_dir, log_queue):

    sources = args.images[0] if len(args.images) == 1 and Path(args.images[0]).suffix in (".tsv", ".txt") else args.images
    report_grid(sources, Path(out_dir) / args.name, args.columns, args.rows, _csv_list(args.captions), args.cell_size)

    run.config = {"columns": args.columns, "rows": args.rows, "captions": args.captions}


### parser ###


def build_parser():

    parser = _Parser(prog="latentaug", description="GAN-inversion data augmentation for image classifiers")
    parser.add_argument("--version", action="version", version=f"latentaug {__version__}")
    sub = parser.add_subparsers(dest="group", metavar="COMMAND", required=True, parser_class=_Parser)

    corpus = _group(sub, "corpus", "synthetic toy corpus")
    p = _leaf(corpus, "build", "corpus build", _corpus_build, "render the toy corpus and its manifest")
    p.add_argument("--videos", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--size", type=int, default=None)

    split = _group(sub, "split", "video-level splits")
    p = _leaf(split, "make", "split make", _split_make, "write K-fold train/val/test video assignments")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--ratios", type=str, default=None, help="train,val,test shares")

    gan = _group(sub, "gan", "style-based generator")
    p = _leaf(gan, "train", "gan train", _gan_train, "train the generator with adaptive augmentation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--extractor", default=None, help="feature extractor checkpoint for FID")

    encoder = _group(sub, "encoder", "inversion encoder")
    p = _leaf(encoder, "train", "encoder train", _encoder_train, "train the encoder against a frozen generator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--extractor", default=None, help="feature extractor checkpoint for the perceptual loss")

    p = _leaf(sub, "invert", "invert", _invert, "invert images and report distortion")
    p.add_argument("images", nargs="+")
    p.add_argument("--encoder", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--extractor", default=None)
    p.add_argument("--allow-resize", action="store_true")
    p.add_argument("--optimize-steps", type=int, default=None, help="also run latent optimization")

    edit = _group(sub, "edit", "latent edits")
    for name, help_text in (
        ("mix", "style-mix two codes (coarse layers of A, fine layers of B)"),
        ("interp", "interpolate two codes"),
        ("sweep", "interpolation sweep row: A, interpolants, B"),
    ):
        p = _leaf(edit, name, f"edit {name}", _edit, help_text)
        p.add_argument("--a", required=True, help="style code .npy")
        p.add_argument("--b", required=True, help="style code .npy")
        p.add_argument("--generator", required=True)
        p.add_argument("--noise-seed", type=int, default=None)
        if name == "mix":
            p.add_argument("--k", type=int, default=None, help="crossover layer")
        elif name == "interp":
            p.add_argument("--lambda", dest="lam", type=float, required=True, help="weight on A")
        else:
            p.add_argument("--lambdas", type=lambda v: tuple(float(x) for x in v.split(",")), default=(0.25, 0.5, 0.75))

    augment = _group(sub, "augment", "augmentation jobs")
    p = _leaf(augment, "run", "augment run", _augment_run, "run a translation or interpolation job file")
    p.add_argument("job")

    classify = _group(sub, "classify", "downstream classification")
    p = _leaf(classify, "cv", "classify cv", _classify_cv, "video-level K-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--augment", nargs="*", default=[], help="augmentation job files")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--train-modalities", default=None)
    p.add_argument("--test-modalities", default=None)
    p.add_argument("--no-grid", action="store_true", help="train only the configured hyperparameters")

    metrics = _group(sub, "metrics", "generative metrics")
    p = _leaf(metrics, "fid", "metrics fid", _metrics_fid, "toy-FID between two image sets")
    p.add_argument("--a", required=True, help="image directory or manifest")
    p.add_argument("--b", required=True, help="image directory or manifest")
    p.add_argument("--extractor", required=True)
    p.add_argument("--shrinkage", choices=("auto", "never", "always"), default="auto")
    p = _leaf(metrics, "train-extractor", "metrics train-extractor", _metrics_train_extractor, "train the feature extractor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p = _leaf(metrics, "cluster", "metrics cluster", _metrics_cluster, "silhouette of inverted codes by label")
    p.add_argument("--manifest", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--generator", required=True)

    report = _group(sub, "report", "figures")
    p = _leaf(report, "grid", "report grid", _report_grid, "tile images into a grid")
    p.add_argument("images", nargs="+", help="manifest or image files")
    p.add_argument("--columns", type=int, required=True)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--captions", default=None, help="comma-separated row captions")
    p.add_argument("--cell-size", type=int, default=None)
    p.add_argument("--name", default="grid.png")

    return parser


def parse_args(argv):

    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra:
        getattr(args, "leaf", parser).error(f"unrecognized arguments: {' '.join(extra)}")
    if args.jobs < 1:
        args.leaf.error("--jobs must be >= 1")
    return args


def _out_dir(args):

    if args.out:
        return Path(args.out)
    if args.command == "augment run":
        return Path(AugmentationJob.from_file(args.job).out_dir)
    return output_root() / DEFAULT_OUT[args.command]


def main(argv=None):

    argv = sys.argv[1:] if argv is None else list(argv)

    try:
        args = parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help / --version
        return e.code or EXIT_OK

    log_queue = mp.get_context("spawn").Queue() if args.jobs > 1 else None
    log = None

    try:

        out_dir = _out_dir(args)
        log = LatentAugLogger(out_dir, log_queue, level=getattr(logging, args.log_level.upper()))
        log.start_logging()

        run = RunRecord(command=args.command, argv=["latentaug"] + argv, started=_now())
        logger.info(f"latentaug {__version__}: {args.command} -> {out_dir}")

        args.handler(args, run, out_dir, log_queue)

        run.finished = _now()
        run.save(out_dir)
        logger.info(f"{args.command}: done")
        return EXIT_OK

    except UsageError as e:
        logging.error(f"{args.command}: {e}")
        print(f"latentaug: {e}", file=sys.stderr)
        return EXIT_USAGE

    except (LatentAugError, OSError) as e:
        logging.error(f"{args.command}: {type(e).__name__}: {e}")
        print(f"latentaug: {e}", file=sys.stderr)
        return EXIT_FAILURE

    except Exception as e:
        logging.exception(f"{args.command}: unexpected failure")
        print(f"latentaug: unexpected failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE

    finally:
        if log is not None:
            log.stop_logging()


if __name__ == "__main__":
    sys.exit(main())
