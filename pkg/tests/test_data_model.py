import collections
import dataclasses

import numpy as np
import pytest

from latentaug.data_model import (
    ImageRecord,
    Origin,
    Role,
    Vocabulary,
    filter_manifest,
    largest_remainder,
    load_manifest,
    load_splits,
    make_splits,
    save_manifest,
    save_splits,
    video_labels,
)
from latentaug.exception import (
    LabelInheritanceError,
    ManifestInvariantError,
    ManifestParseError,
    SplitError,
    VocabularyError,
)

HEADER = "#label: neoplastic,non_neoplastic\n#modality: WLI,NBI\n"


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def video_rows(n_per_label, frames=2, modalities=("WLI",)):

    rows = []
    for label, prefix in (("neoplastic", "n"), ("non_neoplastic", "h")):
        for v in range(n_per_label):
            for f in range(frames):
                modality = modalities[f % len(modalities)]
                rows.append((f"{prefix}{v}_{f}.png", label, modality, f"{prefix}{v}"))
    return rows


class TestManifestFile:

    def test_parse(self, tmp_path):

        path = write_text(
            tmp_path / "manifest.tsv",
            HEADER
            + "#command: corpus build\n"
            + "a.png\tneoplastic\tWLI\tv1\treal\t\n"
            + "b.png\tnon_neoplastic\tNBI\tv2\treal\t\n"
            + "c.png\tneoplastic\tNBI\tv1\ttranslated\ta.png\tedit=mix;param=k=4\n",
        )

        manifest = load_manifest(path)

        assert len(manifest) == 3
        assert manifest.vocabulary.labels == ("neoplastic", "non_neoplastic")
        assert manifest.provenance == {"command": "corpus build"}
        assert manifest["c.png"].origin is Origin.TRANSLATED
        assert manifest["c.png"].source_ids == ("a.png",)
        assert manifest["c.png"].get("param") == "k=4"
        assert manifest.resolve(manifest["a.png"]) == tmp_path / "a.png"

    def test_save_load_keeps_content(self, tmp_path, make_manifest):

        manifest = make_manifest(video_rows(2))
        save_manifest(manifest, tmp_path / "out" / "manifest.tsv")

        assert load_manifest(tmp_path / "out" / "manifest.tsv").content_hash() == manifest.content_hash()

    def test_duplicate_path(self, tmp_path):

        path = write_text(
            tmp_path / "manifest.tsv",
            HEADER + "a.png\tneoplastic\tWLI\tv1\treal\t\n" + "a.png\tneoplastic\tWLI\tv2\treal\t\n",
        )

        with pytest.raises(ManifestInvariantError) as info:
            load_manifest(path)
        assert info.value.record_path == "a.png"

    def test_bad_column_count_reports_line(self, tmp_path):

        path = write_text(tmp_path / "manifest.tsv", HEADER + "a.png\tneoplastic\tWLI\n")

        with pytest.raises(ManifestParseError) as info:
            load_manifest(path)
        assert info.value.line_number == 3

    def test_unknown_origin(self, tmp_path):

        path = write_text(tmp_path / "manifest.tsv", HEADER + "a.png\tneoplastic\tWLI\tv1\tdreamed\t\n")

        with pytest.raises(ManifestParseError):
            load_manifest(path)

    def test_missing_header(self, tmp_path):

        path = write_text(tmp_path / "manifest.tsv", "a.png\tneoplastic\tWLI\tv1\treal\t\n")

        with pytest.raises(ManifestParseError):
            load_manifest(path)

    def test_missing_file(self, tmp_path):

        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.tsv")


class TestInvariants:

    def test_modality_outside_vocabulary(self, make_manifest):

        with pytest.raises(VocabularyError):
            make_manifest([("a.png", "neoplastic", "DYED", "v1")])

    def test_unknown_modality_in_vocabulary(self):

        with pytest.raises(VocabularyError):
            Vocabulary(("a", "b"), ("WLI", "XRAY"))

    def test_label_outside_vocabulary(self, make_manifest):

        with pytest.raises(VocabularyError):
            make_manifest([("a.png", "benign", "WLI", "v1")])

    def test_real_record_with_sources(self):

        with pytest.raises(ManifestInvariantError):
            ImageRecord("a.png", "neoplastic", "WLI", "v1", Origin.REAL, ("b.png",))

    def test_edited_record_needs_sources(self):

        with pytest.raises(ManifestInvariantError):
            ImageRecord("a.png", "neoplastic", "WLI", "v1", Origin.INTERPOLATED)

    def test_label_inheritance(self, make_manifest):

        source = ("a.png", "neoplastic", "WLI", "v1")
        edited = ImageRecord("b.png", "non_neoplastic", "NBI", "v1", Origin.TRANSLATED, ("a.png",))

        with pytest.raises(LabelInheritanceError):
            make_manifest([source, edited])

    def test_source_videos(self):

        real = ImageRecord("a.png", "neoplastic", "WLI", "v1")
        edited = ImageRecord(
            "b.png", "neoplastic", "WLI", "v1", Origin.INTERPOLATED, ("a.png", "c.png"), {"source_videos": "v1,v7"}
        )

        assert real.source_videos() == ("v1",)
        assert edited.source_videos() == ("v1", "v7")

    @pytest.mark.parametrize(
        "extra",
        [{"note": "a;b"}, {"a=b": "c"}, {"a;b": "c"}, {"note": "tab\there"}, {"note": "two\nlines"}, {"k\r": "v"}],
    )
    def test_extra_with_separators_is_rejected(self, extra):

        with pytest.raises(ManifestInvariantError):
            ImageRecord("a.png", "neoplastic", "WLI", "v1", extra=extra)

    def test_extra_values_may_contain_equals(self, tmp_path, make_manifest):

        record = ImageRecord(
            "b.png", "neoplastic", "WLI", "v1", Origin.INTERPOLATED, ("a.png",),
            {"param": "lambda=0.5", "source_videos": "v1,v2", "expr": "a=b=c"},
        )
        save_manifest(make_manifest([("a.png", "neoplastic", "WLI", "v1"), record]), tmp_path / "manifest.tsv")

        loaded = load_manifest(tmp_path / "manifest.tsv")["b.png"]

        assert loaded.extra == record.extra
        assert loaded.get("expr") == "a=b=c"

    def test_records_are_frozen(self):

        record = ImageRecord("a.png", "neoplastic", "WLI", "v1")
        with pytest.raises(dataclasses.FrozenInstanceError):
            record.label = "non_neoplastic"


class TestFilter:

    def test_by_modality_keeps_order(self, make_manifest):

        manifest = make_manifest(video_rows(3, frames=2, modalities=("WLI", "NBI")))
        nbi = filter_manifest(manifest, modality="NBI")

        assert len(nbi) == 6
        assert all(r.modality == "NBI" for r in nbi)
        assert [r.path for r in nbi] == [r.path for r in manifest if r.modality == "NBI"]
        assert nbi.vocabulary == manifest.vocabulary

    def test_combined_conditions(self, make_manifest):

        manifest = make_manifest(video_rows(3, frames=2, modalities=("WLI", "NBI")))

        subset = filter_manifest(manifest, label="neoplastic", modality=("WLI",), origin=Origin.REAL)
        assert len(subset) == 3
        assert len(filter_manifest(manifest, origin="translated")) == 0

    def test_dataset_scale_counts(self, make_manifest):

        rows = [(f"n{i}.png", "neoplastic", "WLI", f"n{i // 10}") for i in range(949)]
        rows += [(f"h{i}.png", "non_neoplastic", "WLI", f"h{i // 10}") for i in range(179)]
        manifest = make_manifest(rows)

        counts = collections.Counter(r.label for r in filter_manifest(manifest, modality="WLI"))
        assert counts == {"neoplastic": 949, "non_neoplastic": 179}


class TestLargestRemainder:

    def test_example(self):
        assert largest_remainder(4, (0.6, 0.2)) == [3, 1]

    def test_sums_to_total(self):

        rng = np.random.default_rng(0)
        for _ in range(200):
            total = int(rng.integers(0, 50))
            weights = rng.random(3) + 0.01
            parts = largest_remainder(total, weights)
            assert sum(parts) == total
            quotas = total * weights / weights.sum()
            assert np.all(np.abs(np.array(parts) - quotas) < 1.0)


class TestSplits:

    def test_ten_videos_five_folds(self, make_manifest):

        manifest = make_manifest(video_rows(5))
        splits = make_splits(manifest, k=5, ratios=(0.6, 0.2, 0.2), seed=0)

        assert len(splits) == 5
        for split in splits:
            assert len(split.videos(Role.TRAIN)) == 6
            assert len(split.videos(Role.VAL)) == 2
            assert len(split.videos(Role.TEST)) == 2

        tested = collections.Counter(v for s in splits for v in s.videos(Role.TEST))
        assert set(tested) == set(manifest.video_ids())
        assert set(tested.values()) == {1}

    def test_partition_properties(self, make_manifest):

        rng = np.random.default_rng(7)
        for trial in range(50):

            k = int(rng.integers(2, 6))
            rows = []
            for label, prefix in (("neoplastic", "n"), ("non_neoplastic", "h")):
                for v in range(int(rng.integers(k, 3 * k + 1))):
                    for f in range(int(rng.integers(1, 4))):
                        rows.append((f"{prefix}{v}_{f}.png", label, "WLI", f"{prefix}{v}"))
            manifest = make_manifest(rows)
            labels = video_labels(manifest)

            splits = make_splits(manifest, k=k, ratios=(0.6, 0.2, 0.2), seed=trial)
            n_videos = len(labels)
            val_target = n_videos * (1 - 1 / k) * 0.25

            tested = collections.Counter()
            for split in splits:

                # every video has exactly one role, so frames of a video never straddle roles
                assert set(split.roles) == set(manifest.video_ids())
                tested.update(split.videos(Role.TEST))

                # label stratification of the test chunk
                for label in ("neoplastic", "non_neoplastic"):
                    n_label = sum(1 for l in labels.values() if l == label)
                    n_test = sum(1 for v in split.videos(Role.TEST) if labels[v] == label)
                    assert abs(n_test - n_label / k) < 1.0
                    assert any(labels[v] == label for v in split.videos(Role.TRAIN))

                # fold totals within one video of their targets
                assert abs(len(split.videos(Role.TEST)) - n_videos / k) <= 1
                assert abs(len(split.videos(Role.VAL)) - val_target) <= 1
                assert abs(len(split.videos(Role.TRAIN)) - 3 * val_target) <= 1

            assert set(tested.values()) == {1}

    def test_uneven_strata_keep_fold_totals_balanced(self, make_manifest):

        manifest = make_manifest(video_rows(7))
        splits = make_splits(manifest, k=5, ratios=(0.6, 0.2, 0.2), seed=0)

        roles = [tuple(len(s.videos(r)) for r in (Role.TRAIN, Role.VAL, Role.TEST)) for s in splits]
        for train, val, test in roles:
            assert abs(train - 8.4) <= 1
            assert abs(val - 2.8) <= 1
            assert abs(test - 2.8) <= 1
        assert sorted(test for _, _, test in roles) == [2, 3, 3, 3, 3]

    def test_same_seed_same_splits(self, make_manifest):

        manifest = make_manifest(video_rows(6))
        a = make_splits(manifest, k=3, seed=11)
        b = make_splits(manifest, k=3, seed=11)

        assert [s.roles for s in a] == [s.roles for s in b]

    def test_too_few_videos(self, make_manifest):

        manifest = make_manifest(video_rows(2))
        with pytest.raises(SplitError):
            make_splits(manifest, k=5)

    def test_bad_ratios(self, make_manifest):

        manifest = make_manifest(video_rows(5))
        with pytest.raises(SplitError):
            make_splits(manifest, k=5, ratios=(0.6, 0.3, 0.3))

    def test_majority_label_of_video(self, make_manifest):

        manifest = make_manifest(
            [
                ("a.png", "neoplastic", "WLI", "v1"),
                ("b.png", "neoplastic", "WLI", "v1"),
                ("c.png", "non_neoplastic", "WLI", "v1"),
            ]
        )
        assert video_labels(manifest) == {"v1": "neoplastic"}

    def test_split_file(self, tmp_path, make_manifest):

        splits = make_splits(make_manifest(video_rows(5)), k=5)
        save_splits(splits, tmp_path / "splits.tsv")
        loaded = load_splits(tmp_path / "splits.tsv")

        assert [s.fold_index for s in loaded] == list(range(5))
        assert [s.roles for s in loaded] == [s.roles for s in splits]
