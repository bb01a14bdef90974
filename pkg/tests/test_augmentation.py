import collections
import json

import numpy as np
import pytest

from latentaug.augmentation import (
    AugmentationJob,
    assign_role,
    fold_sets,
    merge_manifests,
    run_interpolation,
    run_job,
    run_translation,
)
from latentaug.data_model import (
    ImageRecord,
    Manifest,
    Origin,
    Role,
    Vocabulary,
    load_manifest,
    make_splits,
    save_splits,
)
from latentaug.exception import ConfigError, SplitError, VocabularyError
from latentaug.inversion import invert
from latentaug.latent_ops import read_pairs_csv
from latentaug.synthetic_corpus import SYNTH_A, SYNTH_B, modality_oracle, record_mask, shape_oracle
from latentaug.utils.hashing import tree_hash
from latentaug.utils.imaging import read_image


@pytest.fixture(scope="module")
def split(toy_corpus):
    return make_splits(toy_corpus, k=5, seed=0)[0]


@pytest.fixture
def interpolate_job(model_files):

    encoder, generator = model_files
    return AugmentationJob(edit_type="interpolate", encoder=str(encoder), generator=str(generator), seed=1)


@pytest.fixture
def translate_job(model_files):

    encoder, generator = model_files
    return AugmentationJob(
        edit_type="translate", encoder=str(encoder), generator=str(generator), target_modality=SYNTH_B, seed=1
    )


def train_sources(manifest, split, modality=None):
    return [
        r for r in manifest
        if split.role_of(r.video_id) is Role.TRAIN and (modality is None or r.modality == modality)
    ]


class TestJob:

    def test_defaults(self, interpolate_job, translate_job):

        assert interpolate_job.count == 3
        assert translate_job.count == 5
        assert translate_job.constraint().target_modality == SYNTH_B
        assert interpolate_job.constraint().require_same_modality

    def test_translate_needs_target(self):

        with pytest.raises(ConfigError):
            AugmentationJob(edit_type="translate")

    def test_interpolate_rejects_target(self):

        with pytest.raises(ConfigError):
            AugmentationJob(edit_type="interpolate", target_modality=SYNTH_B)

    def test_unknown_edit(self):

        with pytest.raises(ConfigError):
            AugmentationJob(edit_type="rotate")

    def test_bad_lambdas(self):

        with pytest.raises(ConfigError):
            AugmentationJob(lambdas=(0.5, 1.0))

    def test_from_file_anchors_paths(self, tmp_path):

        job_file = tmp_path / "jobs" / "translate.cfg"
        job_file.parent.mkdir()
        job_file.write_text(
            "[augment]\n"
            "edit_type = translate\n"
            "manifest = corpus/manifest.tsv\n"
            "encoder = /models/encoder.npz\n"
            "generator = models/generator.npz\n"
            "target_modality = SYNTH_B\n"
            "per_image_count = 2\n"
            "lambdas = 0.3,0.6\n"
            "out_dir = out\n"
        )

        job = AugmentationJob.from_file(job_file, {"seed": 9})

        assert job.manifest == (tmp_path / "jobs" / "corpus" / "manifest.tsv").as_posix()
        assert job.encoder == "/models/encoder.npz"
        assert job.out_dir == (tmp_path / "jobs" / "out").as_posix()
        assert job.count == 2
        assert job.lambdas == (0.3, 0.6)
        assert job.seed == 9

    def test_from_file_unknown_key(self, tmp_path):

        job_file = tmp_path / "job.cfg"
        job_file.write_text("[augment]\nedit_type = interpolate\nstrength = 2\n")

        with pytest.raises(ConfigError):
            AugmentationJob.from_file(job_file)


class TestInterpolation:

    def test_outputs(self, tmp_path, toy_corpus, split, interpolate_job):

        out = tmp_path / "interp"
        augmented = run_interpolation(interpolate_job, toy_corpus, split, out)

        sources = train_sources(toy_corpus, split)
        assert len(augmented) == len(sources) * 3 * 3

        per_source = collections.Counter(r.source_ids[0] for r in augmented)
        assert set(per_source) == {r.path for r in sources}
        assert set(per_source.values()) == {9}

        for record in augmented:
            source, partner = (toy_corpus[s] for s in record.source_ids)
            assert record.origin is Origin.INTERPOLATED
            assert record.label == source.label == partner.label
            assert record.modality == source.modality == partner.modality
            assert record.video_id == source.video_id
            assert record.get("edit") == "interp"
            assert split.role_of(partner.video_id) is Role.TRAIN
            assert read_image(augmented.resolve(record)).shape == (32, 32, 3)

        assert {r.get("param") for r in augmented} == {"lambda=0.25", "lambda=0.5", "lambda=0.75"}

        assert load_manifest(out / "manifest.tsv").content_hash() == augmented.content_hash()
        assert len(read_pairs_csv(out / "pairs.csv")) == len(augmented)
        assert (out / "skip_report.csv").read_text().splitlines() == ["source_id,reason"]

        provenance = json.loads((out / "provenance.json").read_text())
        assert provenance["source_manifest"] == toy_corpus.content_hash()
        assert provenance["fold"] == 0
        assert provenance["outputs"] == len(augmented)
        assert "out_dir" not in provenance["config"]

    def test_replay_is_byte_identical(self, tmp_path, toy_corpus, split, interpolate_job):

        run_interpolation(interpolate_job, toy_corpus, split, tmp_path / "a")
        run_interpolation(interpolate_job, toy_corpus, split, tmp_path / "b")

        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_wrong_runner(self, toy_corpus, split, interpolate_job):

        with pytest.raises(ConfigError):
            run_translation(interpolate_job, toy_corpus, split)


class TestTranslation:

    def test_outputs(self, tmp_path, toy_corpus, split, translate_job):

        augmented = run_translation(translate_job, toy_corpus, split, tmp_path / "mix")
        sources = train_sources(toy_corpus, split, SYNTH_A)

        assert len(augmented) == len(sources) * 5
        for record in augmented:
            source, partner = (toy_corpus[s] for s in record.source_ids)
            assert record.origin is Origin.TRANSLATED
            assert source.modality == SYNTH_A
            assert partner.modality == SYNTH_B
            assert record.modality == SYNTH_B
            assert record.label == source.label == partner.label
            assert record.get("param") == "k=4"

    def test_crossover_override(self, tmp_path, toy_corpus, split, model_files):

        encoder, generator = model_files
        job = AugmentationJob(
            edit_type="translate",
            encoder=str(encoder),
            generator=str(generator),
            target_modality=SYNTH_B,
            per_image_count=1,
            crossover=6,
        )
        augmented = run_job(job, toy_corpus, split, tmp_path / "mix")

        assert {r.get("param") for r in augmented} == {"k=6"}

    def test_target_outside_vocabulary(self, tmp_path, toy_corpus, split, model_files):

        encoder, generator = model_files
        job = AugmentationJob(edit_type="translate", encoder=str(encoder), generator=str(generator), target_modality="NBI")

        with pytest.raises(VocabularyError):
            run_translation(job, toy_corpus, split, tmp_path / "mix")

    def test_short_partners_are_reported(self, tmp_path, toy_corpus, split, model_files):

        encoder, generator = model_files
        job = AugmentationJob(
            edit_type="translate",
            encoder=str(encoder),
            generator=str(generator),
            target_modality=SYNTH_B,
            per_image_count=50,
        )
        augmented = run_translation(job, toy_corpus, split, tmp_path / "mix")

        skipped = (tmp_path / "mix" / "skip_report.csv").read_text().splitlines()[1:]
        assert len(skipped) == len(train_sources(toy_corpus, split, SYNTH_A))
        assert len(augmented) > 0


class TestSplitsAndMerge:

    def test_augmented_images_never_leave_training(self, tmp_path, toy_corpus, split, interpolate_job):

        augmented = run_interpolation(interpolate_job, toy_corpus, split, tmp_path / "interp")
        merged = merge_manifests(toy_corpus, [augmented])
        sets = fold_sets(merged, split)

        assert len(merged) == len(toy_corpus) + len(augmented)
        assert sum(r.is_augmented for r in sets.train) == len(augmented)
        assert not any(r.is_augmented for r in sets.val)
        assert not any(r.is_augmented for r in sets.test)
        assert len(sets.excluded) == 0

        for record in merged:
            assert merged.resolve(record).is_file()

    def test_leakage_guard(self, toy_corpus, split):

        train_video = split.videos(Role.TRAIN)[0]
        test_video = split.videos(Role.TEST)[0]

        leaky = ImageRecord(
            "aug/leaky.png", "neoplastic", SYNTH_A, train_video, Origin.INTERPOLATED,
            ("x.png", "y.png"), {"source_videos": f"{train_video},{test_video}"},
        )
        clean = leaky.replace(path="aug/clean.png", extra={"source_videos": train_video})

        assert assign_role(leaky, split) is Role.EXCLUDED
        assert assign_role(clean, split) is Role.TRAIN

    def test_leakage_guard_without_source_videos(self, split):

        train_video = split.videos(Role.TRAIN)[0]
        test_video = split.videos(Role.TEST)[0]
        record = ImageRecord("aug/a.png", "neoplastic", SYNTH_A, train_video, Origin.TRANSLATED, ("s.png", "t.png"))

        video_of = {"s.png": train_video, "t.png": test_video}
        assert assign_role(record, split, video_of) is Role.EXCLUDED

    def test_real_record_of_unknown_video(self, split):

        with pytest.raises(SplitError):
            assign_role(ImageRecord("z.png", "neoplastic", SYNTH_A, "v999"), split)

    def test_real_records_take_their_video_role(self, toy_corpus, split):

        sets = fold_sets(toy_corpus, split)

        assert len(sets.train) + len(sets.val) + len(sets.test) == len(toy_corpus)
        assert {r.video_id for r in sets.test} == set(split.videos(Role.TEST))

    def test_merge_rejects_other_vocabulary(self, toy_corpus):

        other = Manifest((), Vocabulary(("neoplastic", "non_neoplastic"), ("WLI", "NBI")))
        with pytest.raises(VocabularyError):
            merge_manifests(toy_corpus, [other])

    def test_job_file_with_splits(self, tmp_path, toy_corpus, model_files):

        encoder, generator = model_files
        save_splits(make_splits(toy_corpus, k=5, seed=0), tmp_path / "splits.tsv")

        job_file = tmp_path / "job.cfg"
        job_file.write_text(
            "[augment]\n"
            "edit_type = interpolate\n"
            f"manifest = {(toy_corpus.root / 'manifest.tsv').as_posix()}\n"
            f"encoder = {encoder.as_posix()}\n"
            f"generator = {generator.as_posix()}\n"
            "splits = splits.tsv\n"
            "fold = 2\n"
            "per_image_count = 1\n"
            "lambdas = 0.5\n"
            "out_dir = fold2\n"
        )

        augmented = run_job(AugmentationJob.from_file(job_file))
        fold2 = make_splits(toy_corpus, k=5, seed=0)[2]

        assert len(augmented) == len(train_sources(toy_corpus, fold2))
        assert (tmp_path / "fold2" / "manifest.tsv").is_file()

    def test_fold_out_of_range(self, tmp_path, toy_corpus, model_files):

        encoder, generator = model_files
        save_splits(make_splits(toy_corpus, k=5, seed=0), tmp_path / "splits.tsv")
        job = AugmentationJob(
            encoder=str(encoder), generator=str(generator), splits=str(tmp_path / "splits.tsv"), fold=7
        )

        with pytest.raises(SplitError):
            run_job(job, toy_corpus, out_dir=tmp_path / "out")


@pytest.mark.slow
def test_worker_count_does_not_change_outputs(tmp_path, toy_corpus, split, interpolate_job):

    run_interpolation(interpolate_job, toy_corpus, split, tmp_path / "serial", jobs=1)
    run_interpolation(interpolate_job, toy_corpus, split, tmp_path / "parallel", jobs=2)

    assert tree_hash(tmp_path / "serial") == tree_hash(tmp_path / "parallel")


def check_random_sub_manifests(tmp_path, toy_corpus, split, model_files, n_trials, seed):

    encoder, generator = model_files
    rng = np.random.default_rng(seed)
    train_videos = set(split.videos(Role.TRAIN))

    for trial in range(n_trials):
        keep = rng.random(len(toy_corpus)) < 0.6
        sub = toy_corpus.with_records([r for r, k in zip(toy_corpus.records, keep) if k])
        pool = train_sources(sub, split)
        count = int(rng.integers(1, 4))
        target = (SYNTH_A, SYNTH_B)[trial % 2]

        jobs = [
            AugmentationJob(
                edit_type="interpolate", encoder=str(encoder), generator=str(generator),
                per_image_count=count, lambdas=(0.5,), seed=trial,
            ),
            AugmentationJob(
                edit_type="translate", encoder=str(encoder), generator=str(generator),
                target_modality=target, per_image_count=count, seed=trial,
            ),
        ]

        for job in jobs:
            augmented = run_job(job, sub, split, tmp_path / f"trial{trial}" / job.edit_type)
            constraint = job.constraint()
            sources = pool if job.edit_type == "interpolate" else [r for r in pool if r.modality != target]

            for record in augmented:
                source, partner = (sub[s] for s in record.source_ids)
                assert source.path != partner.path
                assert record.label == source.label == partner.label
                assert source.video_id in train_videos and partner.video_id in train_videos
                assert set(record.source_videos()) <= train_videos
                if job.edit_type == "interpolate":
                    assert record.modality == source.modality == partner.modality
                else:
                    assert source.modality != target
                    assert record.modality == partner.modality == target

            per_source = collections.Counter(r.source_ids[0] for r in augmented)
            for source in sources:
                n_eligible = sum(constraint.eligible(source, p) for p in pool)
                assert per_source[source.path] == min(count, n_eligible)
            assert set(per_source) <= {r.path for r in sources}


def test_random_sub_manifests(tmp_path, toy_corpus, split, model_files):
    check_random_sub_manifests(tmp_path, toy_corpus, split, model_files, n_trials=6, seed=0)


@pytest.mark.slow
def test_random_sub_manifests_at_scale(tmp_path, toy_corpus, split, model_files):
    check_random_sub_manifests(tmp_path, toy_corpus, split, model_files, n_trials=1000, seed=1)


# shape IoU a translated image must keep with its source's reference mask
TRANSLATION_SHAPE_FLOOR = 0.4


@pytest.mark.slow
class TestTrainedPairEdits:

    def test_translation_takes_the_target_appearance(self, tmp_path, trained_pair):

        corpus = trained_pair.corpus
        job = AugmentationJob(
            edit_type="translate", encoder=str(trained_pair.encoder_path), generator=str(trained_pair.generator_path),
            target_modality=SYNTH_B, per_image_count=1, seed=0,
        )
        augmented = run_translation(job, corpus, None, tmp_path / "mix")
        assert len(augmented) == sum(r.modality == SYNTH_A for r in corpus)

        flipped = kept_shape = 0
        for record in augmented:
            image = read_image(augmented.resolve(record))
            source = corpus[record.source_ids[0]]
            flipped += modality_oracle(image).modality == SYNTH_B
            kept_shape += shape_oracle(image, record_mask(corpus, source)).score >= TRANSLATION_SHAPE_FLOOR

        assert flipped >= 0.8 * len(augmented)
        assert kept_shape >= 0.9 * len(augmented)

    def test_interpolants_keep_the_source_appearance(self, tmp_path, trained_pair):

        corpus = trained_pair.corpus
        job = AugmentationJob(
            edit_type="interpolate", encoder=str(trained_pair.encoder_path), generator=str(trained_pair.generator_path),
            per_image_count=1, seed=0,
        )
        augmented = run_interpolation(job, corpus, None, tmp_path / "interp")

        kept = sum(
            modality_oracle(read_image(augmented.resolve(r))).modality == corpus[r.source_ids[0]].modality
            for r in augmented
        )
        assert kept >= 0.9 * len(augmented)

    def test_reconstructions_keep_their_appearance(self, trained_pair):

        corpus = trained_pair.corpus
        kept = 0
        for record in corpus:
            result = invert(read_image(corpus.resolve(record)), trained_pair.encoder, trained_pair.generator)
            kept += modality_oracle(result.reconstruction).modality == record.modality

        assert kept >= 0.9 * len(corpus)
