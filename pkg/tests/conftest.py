from pathlib import Path
from typing import NamedTuple

import numpy as np
import pytest

from latentaug.checkpoint import Checkpoint, module_state
from latentaug.data_model import ImageRecord, Manifest, Origin, Vocabulary
from latentaug.gan_core import GENERATOR_KIND, GanConfig, build_generator, load_generator, train_gan
from latentaug.gen_metrics import FeatureExtractorConfig, train_feature_extractor
from latentaug.inversion import ENCODER_KIND, EncoderConfig, load_encoder, train_encoder
from latentaug.networks import StyleEncoder
from latentaug.synthetic_corpus import ToyParams, build_corpus
from latentaug.utils.imaging import write_image
from latentaug.utils.training import seeded

TINY_ARCH = {
    "image_size": 32,
    "z_dim": 16,
    "w_dim": 16,
    "mapping_layers": 2,
    "g_features": 8,
    "max_features": 32,
}
TINY_NUM_WS = 8


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the desk-scale training experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks for minutes; needs --runslow")


def pytest_collection_modifyitems(config, items):

    if config.getoption("--runslow"):
        return

    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def toy_params():
    return ToyParams(image_size=32, n_videos=10, frames_per_video=4, seed=3)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory, toy_params):
    return build_corpus(toy_params, tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def generator_checkpoint():

    with seeded(0, "init", "test-generator"):
        generator = build_generator(TINY_ARCH)

    return Checkpoint(GENERATOR_KIND, dict(TINY_ARCH), module_state(generator), seed=0)


@pytest.fixture
def generator(generator_checkpoint):
    return load_generator(generator_checkpoint)


@pytest.fixture(scope="session")
def encoder_checkpoint(generator_checkpoint):

    arch = {"image_size": 32, "num_ws": TINY_NUM_WS, "w_dim": 16, "n_features": 8, "max_features": 32}
    with seeded(0, "init", "test-encoder"):
        encoder = StyleEncoder(arch["image_size"], arch["num_ws"], arch["w_dim"], arch["n_features"], arch["max_features"])

    return Checkpoint(
        ENCODER_KIND,
        {},
        module_state(encoder),
        seed=0,
        meta={"generator_hash": generator_checkpoint.state_hash(), "arch": arch},
    )


@pytest.fixture(scope="session")
def model_files(tmp_path_factory, encoder_checkpoint, generator_checkpoint):
    """``(encoder_path, generator_path)`` of the untrained tiny pair."""

    root = tmp_path_factory.mktemp("models")
    return (
        encoder_checkpoint.save(root / "encoder.npz"),
        generator_checkpoint.save(root / "generator.npz"),
    )


@pytest.fixture
def make_manifest(tmp_path):
    """Factory for small manifests: ``make_manifest([(path, label, modality, video), ...])``.

    With ``images=True`` a flat 32 px PNG is written for every record.
    """

    def factory(rows, labels=("neoplastic", "non_neoplastic"), modalities=("WLI", "NBI"), images=False):

        records = []
        for row in rows:
            if isinstance(row, ImageRecord):
                records.append(row)
                continue
            path, label, modality, video = row
            records.append(ImageRecord(path, label, modality, video, Origin.REAL))

        if images:
            for i, r in enumerate(records):
                shade = 0.2 + 0.6 * (i % 5) / 4
                write_image(tmp_path / r.path, np.full((32, 32, 3), shade, dtype=np.float32))

        return Manifest(tuple(records), Vocabulary(labels, modalities), {}, tmp_path)

    return factory


class TrainedPair(NamedTuple):

    corpus: Manifest
    extractor: object
    encoder: object
    generator: object
    encoder_path: Path
    generator_path: Path


@pytest.fixture(scope="session")
def trained_pair(tmp_path_factory):
    """Encoder and generator trained on a 100-image toy corpus (minutes; slow tests only)."""

    root = tmp_path_factory.mktemp("trained")
    corpus = build_corpus(ToyParams(image_size=32, n_videos=25, frames_per_video=4, seed=5), root / "corpus")

    extractor = train_feature_extractor(corpus, FeatureExtractorConfig(image_size=32, epochs=8))
    gan_config = GanConfig(
        image_size=32, z_dim=32, w_dim=32, g_features=16, d_features=16, max_features=64,
        batch_size=8, steps=1500, fid_interval=500, fid_samples=40,
    )
    generator_checkpoint = train_gan(corpus, gan_config, extractor, root / "gan")
    encoder_config = EncoderConfig(batch_size=4, steps=1500, n_features=16, max_features=64, log_interval=100)
    encoder_checkpoint = train_encoder(corpus, generator_checkpoint, encoder_config, extractor)

    return TrainedPair(
        corpus,
        extractor,
        load_encoder(encoder_checkpoint, generator_checkpoint),
        load_generator(generator_checkpoint),
        encoder_checkpoint.save(root / "encoder.npz"),
        generator_checkpoint.save(root / "generator.npz"),
    )
