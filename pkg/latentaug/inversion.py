"""GAN inversion: a trained encoder and per-image latent optimization.

The encoder is trained against a frozen generator (second stage of training). It
predicts a base code plus per-layer deltas, which are switched on one layer at a
time during training and kept small, so its codes stay close to W and edit well.
:func:`invert_by_optimization` fits an unconstrained per-layer code to one image and
serves as the low-distortion reference.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from latentaug.checkpoint import Checkpoint, load_module_state, module_state
from latentaug.config import to_dict
from latentaug.exception import (
    CheckpointError,
    CheckpointMismatchError,
    ConfigError,
    DivergenceError,
    ManifestError,
    ResolutionError,
)
from latentaug.gan_core import GENERATOR_KIND, StyleStack, load_generator, synthesize
from latentaug.gen_metrics import FeatureExtractorConfig, train_feature_extractor
from latentaug.networks import LatentDiscriminator, StyleEncoder, r1_penalty
from latentaug.utils.hashing import state_hash
from latentaug.utils.imaging import images_to_tensor, resize, to_float
from latentaug.utils.seeding import numpy_rng, set_deterministic, torch_generator
from latentaug.utils.training import load_images, seeded

logger = logging.getLogger(__name__)

ENCODER_KIND = "encoder"
DEGENERATE_STD = 1e-3
PYRAMID_LEVELS = 3


@dataclass(frozen=True)
class EncoderConfig:

    l2_lambda: float = 1.5
    perceptual_lambda: float = 0.8
    delta_norm_lambda: float = 2e-4
    w_discriminator_lambda: float = 0.1
    batch_size: int = 6
    steps: int = 20000
    learning_rate: float = 1e-4
    w_discriminator_lr: float = 2e-5
    w_discriminator_r1_gamma: float = 10.0
    w_discriminator_r1_interval: int = 16
    synthetic_fraction: float = 0.25
    n_features: int = 32
    max_features: int = 256
    log_interval: int = 200
    seed: int = 0
    deterministic_kernels: bool = True
    device: str = "cpu"

    def __post_init__(self):

        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be >= 1")
        if not 0.0 <= self.synthetic_fraction < 1.0:
            raise ConfigError("synthetic_fraction must be in [0, 1)")
        if min(self.l2_lambda, self.perceptual_lambda, self.delta_norm_lambda, self.w_discriminator_lambda) < 0:
            raise ConfigError("loss weights must be >= 0")

    def progressive_interval(self, num_ws):
        """Steps between enabling consecutive per-layer deltas (all active by mid-training)."""

        return max(1, self.steps // (2 * num_ws))


@dataclass(frozen=True, eq=False)
class InversionResult:

    styles: StyleStack
    reconstruction: np.ndarray
    distortion: Dict[str, float]
    delta_norms: np.ndarray
    degenerate: bool = False
    resized: bool = False
    loss_history: Optional[tuple] = None


def layer_variance(styles):
    """Editability proxy: variance across layers, averaged over code dimensions."""

    return float(np.asarray(styles.layers, dtype=np.float64).var(axis=0).mean())


def delta_norms(styles):
    """``||w_i - w_0||`` for every layer ``i``."""

    layers = np.asarray(styles.layers, dtype=np.float64)
    return np.linalg.norm(layers - layers[0], axis=1)


def _pyramid(image):

    levels = [image]
    for _ in range(PYRAMID_LEVELS - 1):
        levels.append(cv2.pyrDown(levels[-1]))
    return levels


def distortion_metrics(image, reconstruction, extractor=None):
    """Pixel ``l2`` (mean squared error), 3-level ``pyramid`` L2 and, with an extractor, ``perceptual``."""

    image, reconstruction = to_float(image), to_float(reconstruction)

    metrics = {
        "l2": float(np.mean((image - reconstruction) ** 2)),
        "pyramid": float(np.mean([np.mean((a - b) ** 2) for a, b in zip(_pyramid(image), _pyramid(reconstruction))])),
    }

    if extractor is not None:
        feats = extractor.features([image, reconstruction])
        metrics["perceptual"] = float(np.mean((feats[0] - feats[1]) ** 2))

    return metrics


def _prepare(image, size, allow_resize):

    image = to_float(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ResolutionError(f"expected an (H, W, 3) image, got shape {image.shape}")

    if image.shape[:2] == (size, size):
        return image, False
    if not allow_resize:
        raise ResolutionError(f"image is {image.shape[1]}x{image.shape[0]}, generator needs {size}x{size}")

    return resize(image, size), True


def _device(module):
    return next(module.parameters()).device


def load_encoder(checkpoint, generator_checkpoint=None, device="cpu"):
    """Encoder in eval mode; when ``generator_checkpoint`` is given its hash must match."""

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint, kind=ENCODER_KIND)

    if generator_checkpoint is not None:
        if not isinstance(generator_checkpoint, Checkpoint):
            generator_checkpoint = Checkpoint.load(generator_checkpoint, kind=GENERATOR_KIND)
        expected = checkpoint.meta.get("generator_hash")
        actual = generator_checkpoint.state_hash()
        if expected != actual:
            raise CheckpointMismatchError(
                f"encoder was trained against generator {str(expected)[:12]}, got {actual[:12]}"
            )

    arch = checkpoint.meta["arch"]
    encoder = StyleEncoder(arch["image_size"], arch["num_ws"], arch["w_dim"], arch["n_features"], arch["max_features"])
    load_module_state(encoder, checkpoint.state)
    encoder.to(device).eval()
    for param in encoder.parameters():
        param.requires_grad_(False)
    return encoder


def load_inversion_pair(encoder_path, generator_path, device="cpu"):
    """Load a generator and the encoder trained against it (hash-checked)."""

    generator_checkpoint = Checkpoint.load(generator_path, kind=GENERATOR_KIND)
    encoder = load_encoder(encoder_path, generator_checkpoint, device)
    return encoder, load_generator(generator_checkpoint, device)


@torch.no_grad()
def encode(image, encoder, allow_resize=False):
    """StyleStack predicted by ``encoder`` for one ``(H, W, 3)`` image."""

    size = 2 ** (len(encoder.blocks) + 2)
    image, _ = _prepare(image, size, allow_resize)
    ws, _ = encoder(images_to_tensor([image], _device(encoder)))
    return StyleStack(ws[0].cpu().numpy())


def invert(image, encoder, generator, extractor=None, allow_resize=False):
    """Encode, re-synthesize and measure distortion.

    A flat image (std below ``DEGENERATE_STD``) is still inverted but flagged.
    """

    image, resized = _prepare(image, generator.image_size, allow_resize)

    degenerate = float(image.std()) < DEGENERATE_STD
    if degenerate:
        logger.warning("Inversion: near-constant input image, result flagged as degenerate")

    styles = encode(image, encoder)
    reconstruction = synthesize(styles, generator)

    return InversionResult(
        styles=styles,
        reconstruction=reconstruction,
        distortion=distortion_metrics(image, reconstruction, extractor),
        delta_norms=delta_norms(styles),
        degenerate=degenerate,
        resized=resized,
    )


def invert_by_optimization(
    image,
    generator,
    steps=500,
    seed=0,
    extractor=None,
    learning_rate=0.05,
    perceptual_lambda=0.8,
    initial_noise_factor=0.05,
    noise_ramp_length=0.75,
    lr_rampdown_length=0.25,
    lr_rampup_length=0.05,
    allow_resize=False,
):
    """Optimize a per-layer code from the mean ``w`` to reproduce ``image``.

    Adam with a cosine learning-rate ramp and decaying code noise; the loss is pixel
    MSE plus, with an extractor, ``perceptual_lambda`` times the feature MSE.
    ``steps=0`` returns the mean-``w`` reconstruction.

    Raises
    ------
    DivergenceError
        the loss became non-finite
    """

    image, resized = _prepare(image, generator.image_size, allow_resize)
    degenerate = float(image.std()) < DEGENERATE_STD
    device = _device(generator)

    w_avg = generator.w_avg.detach().clone()
    w_start = w_avg[None, None, :].repeat(1, generator.num_ws, 1)

    with torch.no_grad():
        z = torch.from_numpy(numpy_rng(0, "w_std").standard_normal((1000, generator.z_dim)).astype(np.float32))
        w_samples = generator.mapping(z.to(device))
        w_std = float(((w_samples - w_avg) ** 2).sum(dim=1).mean().sqrt())

    target = images_to_tensor([image], device)
    target_features = extractor.feature_tensor(target).detach() if extractor is not None else None
    noise = generator.synthesis.make_noise(1, "const")
    gen = torch_generator(seed, "noise", "projection", device=device.type)

    w_opt = w_start.clone().requires_grad_(True)
    optimizer = torch.optim.Adam([w_opt], betas=(0.9, 0.999), lr=learning_rate)
    history = []

    for step in range(steps):

        t = step / steps
        w_noise_scale = w_std * initial_noise_factor * max(0.0, 1.0 - t / noise_ramp_length) ** 2
        lr_ramp = min(1.0, (1.0 - t) / lr_rampdown_length)
        lr_ramp = 0.5 - 0.5 * np.cos(lr_ramp * np.pi)
        lr_ramp = lr_ramp * min(1.0, t / lr_rampup_length)
        for group in optimizer.param_groups:
            group["lr"] = learning_rate * lr_ramp

        ws = w_opt + torch.randn(w_opt.shape, generator=gen, device=device) * w_noise_scale
        synth = generator.synthesis(ws, noise)

        loss = F.mse_loss(synth, target)
        if target_features is not None:
            loss = loss + perceptual_lambda * F.mse_loss(extractor.feature_tensor(synth), target_features)

        if not torch.isfinite(loss):
            diagnostics = {"step": step, "loss": float(loss), "lr": learning_rate * lr_ramp}
            logger.error(f"Projection: non-finite loss, aborting: {diagnostics}")
            raise DivergenceError("latent optimization diverged", diagnostics)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append(float(loss))

    styles = StyleStack(w_opt.detach()[0].cpu().numpy())
    reconstruction = synthesize(styles, generator)

    return InversionResult(
        styles=styles,
        reconstruction=reconstruction,
        distortion=distortion_metrics(image, reconstruction, extractor),
        delta_norms=delta_norms(styles),
        degenerate=degenerate,
        resized=resized,
        loss_history=tuple(history),
    )


def train_encoder(manifest, generator_checkpoint, config=EncoderConfig(), extractor=None):
    """Train an encoder against the frozen generator; returns the encoder checkpoint.

    Loss: ``l2_lambda`` x pixel MSE + ``perceptual_lambda`` x feature MSE +
    ``delta_norm_lambda`` x per-layer delta norms + ``w_discriminator_lambda`` x the
    non-saturating loss of a latent discriminator that separates mapped codes from
    encoder base codes. A ``synthetic_fraction`` of every batch is generator samples.

    Raises
    ------
    ManifestError
        empty manifest
    DivergenceError
        non-finite loss
    CheckpointError
        the generator weights changed during training
    """

    if len(manifest) == 0:
        raise ManifestError("cannot train an encoder on an empty manifest")

    deterministic = set_deterministic(config.deterministic_kernels)
    device = torch.device(config.device)

    G = load_generator(generator_checkpoint, device)
    generator_hash = generator_checkpoint.state_hash()
    size, num_ws, w_dim = G.image_size, G.num_ws, G.w_dim

    if extractor is None:
        extractor = train_feature_extractor(
            manifest, FeatureExtractorConfig(image_size=size, seed=config.seed, device=config.device)
        )

    reals = images_to_tensor(load_images(manifest, size), device)
    n_real = reals.shape[0]

    with seeded(config.seed, "init", "encoder"):
        E = StyleEncoder(size, num_ws, w_dim, config.n_features, config.max_features).to(device)
        LD = LatentDiscriminator(w_dim).to(device)
    with torch.no_grad():
        E.w_avg.copy_(G.w_avg)

    e_opt = torch.optim.Adam(E.parameters(), lr=config.learning_rate)
    d_opt = torch.optim.Adam(LD.parameters(), lr=config.w_discriminator_lr)

    n_syn = int(round(config.batch_size * config.synthetic_fraction))
    n_batch_real = config.batch_size - n_syn
    interval = config.progressive_interval(num_ws)

    logger.info(
        f"Encoder: training {config.steps} steps, batch {config.batch_size} ({n_syn} synthetic), "
        f"{n_real} images, one more layer delta every {interval} steps"
    )

    for step in range(config.steps):

        rng = numpy_rng(config.seed, "batches", step)
        gen = torch_generator(config.seed, "latents", step, device=device.type)

        idx = rng.choice(n_real, n_batch_real, replace=n_real < n_batch_real)
        batch = [reals[torch.as_tensor(idx)]]
        if n_syn:
            with torch.no_grad():
                ws_syn = G.map(torch.randn((n_syn, G.z_dim), generator=gen, device=device))
                batch.append(G.synthesis(ws_syn, G.synthesis.make_noise(n_syn, "const")).clamp(-1, 1))
        x = torch.cat(batch)

        n_active = min(num_ws - 1, step // interval)

        # encoder
        LD.requires_grad_(False)
        ws, deltas = E(x, n_active)
        recon = G.synthesis(ws, G.synthesis.make_noise(x.shape[0], "const"))

        loss_l2 = F.mse_loss(recon, x)
        loss_perceptual = F.mse_loss(extractor.feature_tensor(recon), extractor.feature_tensor(x))
        loss_delta = deltas[:, 1 : n_active + 1].norm(dim=2).sum(dim=1).mean() if n_active else recon.new_zeros(())
        loss_adv = F.softplus(-LD(ws[:, 0])).mean()

        loss = (
            config.l2_lambda * loss_l2
            + config.perceptual_lambda * loss_perceptual
            + config.delta_norm_lambda * loss_delta
            + config.w_discriminator_lambda * loss_adv
        )

        if not torch.isfinite(loss):
            diagnostics = {"step": step, "loss": float(loss), "l2": float(loss_l2), "n_active": n_active}
            logger.error(f"Encoder: non-finite loss, aborting: {diagnostics}")
            raise DivergenceError("encoder training diverged", diagnostics)

        e_opt.zero_grad(set_to_none=True)
        loss.backward()
        e_opt.step()

        # latent discriminator
        LD.requires_grad_(True)
        with torch.no_grad():
            real_w = G.mapping(torch.randn((x.shape[0], G.z_dim), generator=gen, device=device))
        fake_w = ws[:, 0].detach()

        do_r1 = step % config.w_discriminator_r1_interval == 0
        real_w = real_w.requires_grad_(do_r1)
        real_logits = LD(real_w)
        d_loss = F.softplus(-real_logits).mean() + F.softplus(LD(fake_w)).mean()
        if do_r1:
            d_loss = d_loss + r1_penalty(real_w, real_logits) * (config.w_discriminator_r1_gamma / 2)

        d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        d_opt.step()

        if (step + 1) % config.log_interval == 0:
            logger.info(
                f"Encoder: step {step + 1} loss {float(loss):.4f} l2 {float(loss_l2):.4f} "
                f"perceptual {float(loss_perceptual):.4f} deltas {n_active}"
            )

    if state_hash(module_state(G)) != generator_hash:
        raise CheckpointError("generator weights changed during encoder training")

    return Checkpoint(
        kind=ENCODER_KIND,
        config=to_dict(config),
        state=module_state(E),
        seed=config.seed,
        meta={
            "generator_hash": generator_hash,
            "arch": {
                "image_size": size,
                "num_ws": num_ws,
                "w_dim": w_dim,
                "n_features": config.n_features,
                "max_features": config.max_features,
            },
            "final_loss": float(loss),
            "nondeterministic_kernels": not deterministic,
        },
    )
