"""Style-based generator: latent types, inference and the adversarial training loop."""

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from latentaug.ada import AdaState, AugmentPipe, ada_update, adjustment_step, parse_categories
from latentaug.checkpoint import Checkpoint, load_module_state, module_state
from latentaug.config import to_dict
from latentaug.exception import ConfigError, DivergenceError, ManifestError, ShapeError
from latentaug.gen_metrics import FeatureExtractorConfig, fid, train_feature_extractor
from latentaug.networks import Discriminator, StyleGenerator, num_style_layers, r1_penalty
from latentaug.utils.imaging import images_to_tensor, tensor_to_images
from latentaug.utils.seeding import numpy_rng, set_deterministic, torch_generator
from latentaug.utils.training import load_images, seeded

logger = logging.getLogger(__name__)

GENERATOR_KIND = "generator"
ARCH_KEYS = ("image_size", "z_dim", "w_dim", "mapping_layers", "g_features", "max_features")
METRICS_COLUMNS = ("step", "fid", "loss_g", "loss_d", "ada_p")


@dataclass(frozen=True)
class GanConfig:

    image_size: int = 64
    z_dim: int = 128
    w_dim: int = 128
    mapping_layers: int = 4
    g_features: int = 32
    d_features: int = 32
    max_features: int = 256
    batch_size: int = 16
    steps: int = 6000
    g_lr: float = 2e-3
    d_lr: float = 2e-3
    mapping_lr_mul: float = 0.01
    r1_gamma: float = 1.0
    r1_interval: int = 4
    mixing_prob: float = 0.9
    ema_beta: float = 0.999
    w_avg_beta: float = 0.995
    xflip: bool = True
    augment: str = "blit,geom,color,filter,noise"
    ada_target: float = 0.6
    ada_interval: int = 4
    ada_speed_images: int = 10000
    fid_interval: int = 2000
    fid_samples: int = 1000
    log_interval: int = 100
    seed: int = 0
    deterministic_kernels: bool = True
    device: str = "cpu"

    def __post_init__(self):

        try:
            num_style_layers(self.image_size)
        except ShapeError as e:
            raise ConfigError(str(e)) from None

        parse_categories(self.augment)

        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.steps < 1 or self.fid_interval < 1 or self.r1_interval < 1 or self.ada_interval < 1:
            raise ConfigError("steps and intervals must be >= 1")
        if not 0.0 <= self.mixing_prob <= 1.0:
            raise ConfigError("mixing_prob must be in [0, 1]")

    @property
    def num_ws(self):
        return num_style_layers(self.image_size)

    def arch(self):
        return {k: getattr(self, k) for k in ARCH_KEYS}


@dataclass(frozen=True, eq=False)
class StyleStack:
    """Per-layer style codes, an ``(L, d_w)`` array (read-only)."""

    layers: np.ndarray

    def __post_init__(self):

        layers = np.array(self.layers, copy=True)
        if layers.ndim != 2:
            raise ShapeError(f"a style stack is an (L, d_w) matrix, got shape {layers.shape}")
        if not np.all(np.isfinite(layers)):
            raise ShapeError("style stack has non-finite entries")
        layers.setflags(write=False)
        object.__setattr__(self, "layers", layers)

    @classmethod
    def broadcast(cls, w, num_layers):
        return cls(np.repeat(np.asarray(w)[None, :], num_layers, axis=0))

    @property
    def shape(self):
        return self.layers.shape

    @property
    def num_layers(self):
        return self.layers.shape[0]

    def __len__(self):
        return self.num_layers

    def __getitem__(self, index):
        return self.layers[index]

    def equals(self, other):
        return self.shape == other.shape and bool(np.array_equal(self.layers, other.layers))

    def mean(self):
        return self.layers.mean(axis=0)


def load_generator(checkpoint, device="cpu"):
    """:class:`StyleGenerator` in eval mode from a checkpoint object or path."""

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint, kind=GENERATOR_KIND)
    elif checkpoint.kind != GENERATOR_KIND:
        raise ConfigError(f"expected a generator checkpoint, got {checkpoint.kind!r}")

    generator = build_generator(checkpoint.config)
    load_module_state(generator, checkpoint.state)
    generator.to(device).eval()
    for param in generator.parameters():
        param.requires_grad_(False)
    return generator


def build_generator(arch):

    return StyleGenerator(
        image_size=arch["image_size"],
        z_dim=arch["z_dim"],
        w_dim=arch["w_dim"],
        mapping_layers=arch["mapping_layers"],
        n_features=arch["g_features"],
        max_features=arch["max_features"],
    )


def _device(generator):
    return next(generator.parameters()).device


def check_styles(styles, generator):

    if styles.shape != (generator.num_ws, generator.w_dim):
        raise ShapeError(f"style stack shape {styles.shape} does not match generator ({generator.num_ws}, {generator.w_dim})")


@torch.no_grad()
def map_latent(z, generator, psi=1.0):
    """Map one latent ``z`` to a :class:`StyleStack` (the same code on every layer)."""

    z = np.asarray(z, dtype=np.float32)
    if z.shape != (generator.z_dim,):
        raise ShapeError(f"latent z must have shape ({generator.z_dim},), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ShapeError("latent z has non-finite entries")

    ws = generator.map(torch.from_numpy(z)[None].to(_device(generator)), psi)
    return StyleStack(ws[0].cpu().numpy())


def sample_styles(generator, n, seed, psi=1.0):
    """``n`` StyleStacks from random ``z`` drawn from the ``"latents"`` stream of ``seed``."""

    z = numpy_rng(seed, "latents").standard_normal((n, generator.z_dim)).astype(np.float32)
    return [map_latent(zi, generator, psi) for zi in z]


@torch.no_grad()
def synthesize_batch(styles, generator, noise_seed=None):
    """Images for a list of StyleStacks; fixed stored noise unless ``noise_seed`` is given."""

    for s in styles:
        check_styles(s, generator)
    if not styles:
        return []

    device = _device(generator)
    ws = torch.from_numpy(np.stack([s.layers for s in styles]).astype(np.float32)).to(device)

    if noise_seed is None:
        noise = generator.synthesis.make_noise(len(styles), "const")
    else:
        gen = torch_generator(noise_seed, "noise", device=device.type)
        noise = generator.synthesis.make_noise(len(styles), "random", gen)

    return tensor_to_images(generator.synthesis(ws, noise))


def synthesize(styles, generator, noise_seed=None):
    """Render one StyleStack into an ``(H, W, 3)`` image in [0, 1]."""

    return synthesize_batch([styles], generator, noise_seed)[0]


class MetricsLog:
    """Append-only ``step,fid,loss_g,loss_d,ada_p`` CSV."""

    def __init__(self, path):

        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_COLUMNS)

    def append(self, step, fid_value, loss_g, loss_d, ada_p):

        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step, f"{fid_value:.6f}", f"{loss_g:.6f}", f"{loss_d:.6f}", f"{ada_p:.6f}"])


def _run_generator(G, z, gen, mixing_z=None):

    ws = G.map(z)
    if mixing_z is not None:
        cutoff = int(torch.randint(1, G.num_ws, (1,), generator=gen))
        ws = torch.cat([ws[:, :cutoff], G.map(mixing_z)[:, cutoff:]], dim=1)
    noise = G.synthesis.make_noise(z.shape[0], "random", gen)
    return G.synthesis(ws, noise), ws


def _diagnostics(step, loss_g, loss_d, ada):
    return {"step": step, "loss_g": loss_g, "loss_d": loss_d, "ada_p": round(ada.p, 6)}


def train_gan(manifest, config=GanConfig(), extractor=None, out_dir=None):
    """Adversarial training with ADA; returns the lowest-FID generator checkpoint.

    Non-saturating logistic loss, lazy R1 on real images, style-mixing
    regularization and an EMA copy of the generator, which is what gets evaluated and
    saved. FID (against the training images) is computed every ``fid_interval``
    steps and at the end; each evaluation appends a row to ``out_dir/metrics.csv``.
    Batch composition is a pure function of ``(seed, step)``.

    Raises
    ------
    ManifestError
        empty manifest
    DivergenceError
        a loss became non-finite (diagnostics attached)
    """

    if len(manifest) == 0:
        raise ManifestError("cannot train a generator on an empty manifest")

    deterministic = set_deterministic(config.deterministic_kernels)
    device = torch.device(config.device)

    reals = images_to_tensor(load_images(manifest, config.image_size), device)
    n_real = reals.shape[0]

    if extractor is None:
        extractor = train_feature_extractor(
            manifest, FeatureExtractorConfig(image_size=config.image_size, seed=config.seed, device=config.device)
        )

    n_eval = min(n_real, config.fid_samples)
    eval_idx = np.sort(numpy_rng(config.seed, "eval").choice(n_real, n_eval, replace=False))
    real_eval = tensor_to_images(reals[torch.as_tensor(eval_idx)])
    eval_z = torch.from_numpy(
        numpy_rng(config.seed, "eval", "latents").standard_normal((n_eval, config.z_dim)).astype(np.float32)
    ).to(device)

    with seeded(config.seed, "init", "generator"):
        G = build_generator(config.arch()).to(device)
    with seeded(config.seed, "init", "discriminator"):
        D = Discriminator(config.image_size, config.d_features, config.max_features).to(device)

    G_ema = copy.deepcopy(G).eval()
    for param in G_ema.parameters():
        param.requires_grad_(False)

    r1_ratio = config.r1_interval / (config.r1_interval + 1)
    g_opt = torch.optim.Adam(
        [
            {"params": G.mapping.parameters(), "lr": config.g_lr * config.mapping_lr_mul},
            {"params": G.synthesis.parameters(), "lr": config.g_lr},
        ],
        betas=(0.0, 0.99),
    )
    d_opt = torch.optim.Adam(D.parameters(), lr=config.d_lr * r1_ratio, betas=(0.0, 0.99**r1_ratio))

    pipe = AugmentPipe(config.augment, p=0.0)
    ada = AdaState(
        p=0.0,
        target=config.ada_target,
        adjustment_step=adjustment_step(config.batch_size, config.ada_interval, config.ada_speed_images),
    )
    sign_stats = []

    metrics = MetricsLog(Path(out_dir) / "metrics.csv") if out_dir is not None else None
    best_fid, best_step, best_state = math.inf, -1, None
    loss_g = loss_d = float("nan")

    logger.info(
        f"GAN: training {config.steps} steps, batch {config.batch_size}, {n_real} images, "
        f"{G.num_ws} style layers, deterministic kernels {deterministic}"
    )

    B, H, W = config.batch_size, config.image_size, config.image_size

    for step in range(config.steps):

        rng = numpy_rng(config.seed, "batches", step)
        idx = rng.choice(n_real, B, replace=n_real < B)
        real = reals[torch.as_tensor(idx)]
        if config.xflip:
            flips = torch.as_tensor(rng.random(B) < 0.5, device=device)
            real = torch.where(flips[:, None, None, None], real.flip(3), real)

        gen = torch_generator(config.seed, "latents", step, device=device.type)
        aug_gen = torch_generator(config.seed, "ada", step, device=device.type)

        # discriminator: one augmentation draw shared by the real and fake batch
        G.requires_grad_(False)
        D.requires_grad_(True)

        with torch.no_grad():
            z = torch.randn((B, config.z_dim), generator=gen, device=device)
            fake, _ = _run_generator(G, z, gen)

        params = pipe.sample_params(B, H, W, aug_gen, device)
        do_r1 = config.r1_gamma > 0 and step % config.r1_interval == 0
        real_in = real.detach().requires_grad_(do_r1)

        real_logits = D(pipe.apply(real_in, params))
        fake_logits = D(pipe.apply(fake, params))
        d_loss = F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()
        if do_r1:
            d_loss = d_loss + r1_penalty(real_in, real_logits) * (config.r1_gamma / 2) * config.r1_interval

        sign_stats.append(real_logits.detach().sign().cpu().numpy().ravel())

        d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        d_opt.step()

        # generator
        G.requires_grad_(True)
        D.requires_grad_(False)

        z = torch.randn((B, config.z_dim), generator=gen, device=device)
        mixing_z = None
        if float(torch.rand((), generator=gen)) < config.mixing_prob:
            mixing_z = torch.randn((B, config.z_dim), generator=gen, device=device)
        fake, ws = _run_generator(G, z, gen, mixing_z)

        g_params = pipe.sample_params(B, H, W, aug_gen, device)
        g_loss = F.softplus(-D(pipe.apply(fake, g_params))).mean()

        g_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        g_opt.step()

        loss_g, loss_d = float(g_loss), float(d_loss)
        if not (math.isfinite(loss_g) and math.isfinite(loss_d)):
            diagnostics = _diagnostics(step, loss_g, loss_d, ada)
            logger.error(f"GAN: non-finite loss, aborting: {diagnostics}")
            raise DivergenceError("GAN training diverged", diagnostics)

        with torch.no_grad():
            G.mapping.update_w_avg(ws[:, 0], config.w_avg_beta)
            for p_ema, p in zip(G_ema.parameters(), G.parameters()):
                p_ema.copy_(p.detach().lerp(p_ema, config.ema_beta))
            for b_ema, b in zip(G_ema.buffers(), G.buffers()):
                b_ema.copy_(b)

        if (step + 1) % config.ada_interval == 0:
            ada = ada_update(ada, np.concatenate(sign_stats))
            pipe.p = ada.p
            sign_stats = []

        if (step + 1) % config.log_interval == 0:
            logger.info(f"GAN: step {step + 1} loss_g {loss_g:.4f} loss_d {loss_d:.4f} ada_p {ada.p:.3f}")

        if (step + 1) % config.fid_interval == 0 or step + 1 == config.steps:

            with torch.no_grad():
                fakes = []
                for start in range(0, n_eval, 64):
                    ws_eval = G_ema.map(eval_z[start : start + 64])
                    noise = G_ema.synthesis.make_noise(ws_eval.shape[0], "const")
                    fakes += tensor_to_images(G_ema.synthesis(ws_eval, noise))

            value = fid(real_eval, fakes, extractor).value
            logger.info(f"GAN: step {step + 1} toy-FID {value:.4f}")
            if metrics is not None:
                metrics.append(step + 1, value, loss_g, loss_d, ada.p)

            if value < best_fid:
                best_fid, best_step, best_state = value, step + 1, module_state(G_ema)

    logger.info(f"GAN: selected step {best_step} with toy-FID {best_fid:.4f}")

    return Checkpoint(
        kind=GENERATOR_KIND,
        config=to_dict(config),
        state=best_state,
        seed=config.seed,
        meta={
            "fid": best_fid,
            "fid_metric": "toy-FID",
            "step": best_step,
            "ada_p": ada.p,
            "corpus_hash": manifest.content_hash(),
            "nondeterministic_kernels": not deterministic,
        },
    )
