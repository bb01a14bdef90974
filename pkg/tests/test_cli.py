import json

import numpy as np
import pytest
from PIL import Image

from latentaug.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, RUN_RECORD, main
from latentaug.data_model import load_splits
from latentaug.gan_core import load_generator, sample_styles, synthesize
from latentaug.utils.imaging import read_image, write_image


@pytest.fixture
def codes(tmp_path, model_files):

    _, generator_path = model_files
    a, b = sample_styles(load_generator(generator_path), 2, seed=0)
    np.save(tmp_path / "a.npy", a.layers)
    np.save(tmp_path / "b.npy", b.layers)
    return tmp_path / "a.npy", tmp_path / "b.npy", generator_path


class TestUsage:

    def test_typo_suggests_command(self, capsys):

        assert main(["corpse", "build"]) == EXIT_USAGE
        assert "did you mean corpus" in capsys.readouterr().err

    def test_typo_suggests_flag(self, tmp_path, capsys):

        argv = ["split", "make", "--manifest", "m.tsv", "--kk", "3", "--out", str(tmp_path)]
        assert main(argv) == EXIT_USAGE
        assert "did you mean --k" in capsys.readouterr().err

    def test_missing_required_argument(self, tmp_path):
        assert main(["split", "make", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_jobs(self, tmp_path):
        assert main(["split", "make", "--manifest", "m.tsv", "--jobs", "0", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_help(self):
        assert main(["--help"]) == EXIT_OK


class TestRuns:

    def test_missing_manifest(self, tmp_path, capsys):

        argv = ["split", "make", "--manifest", str(tmp_path / "missing.tsv"), "--out", str(tmp_path / "out")]

        assert main(argv) == EXIT_FAILURE
        assert "missing.tsv" in capsys.readouterr().err
        assert not (tmp_path / "out" / RUN_RECORD).exists()

    def test_split_make(self, tmp_path, toy_corpus):

        argv = ["split", "make", "--manifest", str(toy_corpus.root / "manifest.tsv"), "--k", "5", "--seed", "3"]
        assert main(argv + ["--out", str(tmp_path)]) == EXIT_OK

        assert len(load_splits(tmp_path / "splits.tsv")) == 5
        assert (tmp_path / "latentaug.log").is_file()

        record = json.loads((tmp_path / RUN_RECORD).read_text())
        assert record["command"] == "split make"
        assert record["seed"] == 3
        assert record["config"]["k"] == 5
        assert record["hashes"]["manifest"] == toy_corpus.content_hash()

    def test_edit_mix_at_zero_gives_b(self, tmp_path, codes):

        a, b, generator_path = codes
        out = tmp_path / "edits"
        argv = ["edit", "mix", "--a", str(a), "--b", str(b), "--generator", str(generator_path), "--k", "0"]

        assert main(argv + ["--out", str(out)]) == EXIT_OK

        np.testing.assert_array_equal(np.load(out / "mix_k0.npy"), np.load(b))

        generator = load_generator(generator_path)
        write_image(tmp_path / "expected.png", synthesize(sample_styles(generator, 2, seed=0)[1], generator))
        np.testing.assert_array_equal(read_image(out / "mix_k0.png"), read_image(tmp_path / "expected.png"))

        assert json.loads((out / RUN_RECORD).read_text())["config"]["k"] == 0

    def test_edit_mix_default_crossover(self, tmp_path, codes):

        a, b, generator_path = codes
        argv = ["edit", "mix", "--a", str(a), "--b", str(b), "--generator", str(generator_path)]

        assert main(argv + ["--out", str(tmp_path / "edits")]) == EXIT_OK
        assert (tmp_path / "edits" / "mix_k4.png").is_file()

    def test_edit_sweep(self, tmp_path, codes):

        a, b, generator_path = codes
        argv = ["edit", "sweep", "--a", str(a), "--b", str(b), "--generator", str(generator_path)]

        assert main(argv + ["--out", str(tmp_path / "edits")]) == EXIT_OK
        with Image.open(tmp_path / "edits" / "sweep.png") as im:
            assert im.size == (5 * 34 + 2, 34 + 2)

    def test_edit_missing_code(self, tmp_path, codes):

        a, _, generator_path = codes
        argv = ["edit", "interp", "--a", str(a), "--b", str(tmp_path / "nope.npy"), "--generator", str(generator_path)]

        assert main(argv + ["--lambda", "0.5", "--out", str(tmp_path / "edits")]) == EXIT_FAILURE

    def test_report_grid(self, tmp_path):

        paths = []
        for i in range(3):
            paths.append(str(tmp_path / f"im{i}.png"))
            write_image(paths[-1], np.full((32, 32, 3), 0.5, dtype=np.float32))

        argv = ["report", "grid", *paths, "--columns", "2", "--captions", "top,bottom", "--out", str(tmp_path / "r")]
        assert main(argv) == EXIT_OK

        with Image.open(tmp_path / "r" / "grid.png") as im:
            assert im.size == (72 + 2 * 34 + 2, 2 * 34 + 2)

    def test_report_grid_does_not_fit(self, tmp_path):

        path = str(tmp_path / "im.png")
        write_image(path, np.zeros((32, 32, 3), dtype=np.float32))

        argv = ["report", "grid", path, path, path, "--columns", "1", "--rows", "2", "--out", str(tmp_path / "r")]
        assert main(argv) == EXIT_FAILURE
