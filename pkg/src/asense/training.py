"""Training of the full VAE and of the partial encoder on masked measurements."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .basis import N_PATTERNS, ConvHadamardFilter, default_filter, transform_images
from .models import LOG_VAR_BOUND, NetworkBundle, build_bundle, kl_standard, partial_features

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("epoch", "mean_loss", "mean_kl", "mean_recon", "wall_seconds")


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    beta: float = 0.1
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 20
    rng_seed: int = 0
    channels: tuple = (32, 64)
    noise_sigma: float = 0.05
    likelihood: str = "bernoulli"
    gaussian_sigma: float = 0.1
    mask_seed: int | None = None
    mask_channel: bool = False

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.likelihood not in ("bernoulli", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskSample:
    count: int
    indices: np.ndarray

    def as_mask(self) -> np.ndarray:
        m = np.zeros(N_PATTERNS, dtype=bool)
        m[self.indices] = True
        return m


@dataclass
class LossResult:
    loss: float
    kl: float
    recon: float
    grads: dict = field(default_factory=dict)  # net name -> ParamStore


def sample_mask(rng) -> MaskSample:
    """Uniform count in {0..784}, then a uniform subset of that size."""
    k = int(rng.integers(0, N_PATTERNS + 1))
    return MaskSample(k, rng.permutation(N_PATTERNS)[:k])


def recon_terms(logits, x, likelihood="bernoulli", gaussian_sigma=0.1):
    """Per-image negative log-likelihood and its gradient w.r.t. the logits."""
    axes = tuple(range(1, x.ndim))
    if likelihood == "bernoulli":
        nll = np.maximum(logits, 0) - x * logits + np.log1p(np.exp(-np.abs(logits)))
        return nll.sum(axes), nn.sigmoid(logits) - x
    p = nn.sigmoid(logits)
    s2 = gaussian_sigma ** 2
    nll = (x - p) ** 2 / (2 * s2)
    return nll.sum(axes), (p - x) / s2 * p * (1 - p)


def _latent_grads(out, eps, gz, beta, B):
    """Gradient w.r.t. the encoder output [mu, raw log_var] of mean(recon + beta*KL)."""
    D = eps.shape[1]
    mu, raw = out[:, :D], out[:, D:]
    lv = np.clip(raw, -LOG_VAR_BOUND, LOG_VAR_BOUND)
    std = np.exp(0.5 * lv)
    g_mu = gz + beta * mu / B
    g_lv = gz * eps * 0.5 * std + beta * 0.5 * (np.exp(lv) - 1.0) / B
    g_lv = np.where(raw == lv, g_lv, 0.0)
    return np.concatenate([g_mu, g_lv], axis=1)


def _reparam(out, rng, D):
    mu = out[:, :D]
    lv = np.clip(out[:, D:], -LOG_VAR_BOUND, LOG_VAR_BOUND)
    eps = rng.standard_normal(mu.shape)
    return mu, lv, eps, mu + np.exp(0.5 * lv) * eps


def _finish(recon, kl, beta, batch_index):
    loss = float(np.mean(recon + beta * kl))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss in batch {batch_index}")
    if np.any(kl < 0):
        raise TrainingError(f"negative KL in batch {batch_index}")
    return loss


def elbo_loss(bundle: NetworkBundle, images, rng, beta=0.1, likelihood="bernoulli",
              gaussian_sigma=0.1, batch_index: int = 0) -> LossResult:
    """Negative beta-ELBO of the full VAE, averaged over the batch, with gradients."""
    x = np.asarray(images, dtype=np.float64).reshape(-1, 1, 28, 28)
    B, D = x.shape[0], bundle.latent_dim
    if B == 0:
        raise ValueError("empty batch")
    acts_e = nn.forward(bundle.encoder, bundle.encoder_params, x)
    mu, lv, eps, z = _reparam(acts_e[-1], rng, D)
    dec = bundle.decoder[:-1]  # logits; sigmoid folded into the likelihood
    acts_d = nn.forward(dec, bundle.decoder_params, z)
    recon, g_logits = recon_terms(acts_d[-1], x, likelihood, gaussian_sigma)
    kl = kl_standard(mu, lv)
    loss = _finish(recon, kl, beta, batch_index)
    g_dec, gz = nn.backward(dec, bundle.decoder_params, acts_d, g_logits / B)
    g_enc, _ = nn.backward(bundle.encoder, bundle.encoder_params, acts_e, _latent_grads(acts_e[-1], eps, gz, beta, B))
    return LossResult(loss, float(kl.mean()), float(recon.mean()), {"encoder": g_enc, "decoder": g_dec})


def simulate_training_measurements(images, mask: MaskSample, rng, noise_sigma, filt=None):
    filt = filt or default_filter()
    coeffs = transform_images(np.asarray(images).reshape(-1, 28, 28), filt)
    if noise_sigma > 0:
        coeffs = coeffs + rng.normal(0.0, noise_sigma, size=coeffs.shape)
    return coeffs


def partial_loss(bundle: NetworkBundle, images, mask: MaskSample, rng, beta=0.1, noise_sigma=0.05,
                 likelihood="bernoulli", gaussian_sigma=0.1, filt: ConvHadamardFilter | None = None,
                 batch_index: int = 0) -> LossResult:
    """Masked-measurement loss; reconstruction is scored against the original images."""
    x = np.asarray(images, dtype=np.float64).reshape(-1, 1, 28, 28)
    B, D = x.shape[0], bundle.latent_dim
    coeffs = simulate_training_measurements(x, mask, rng, noise_sigma, filt)
    feats = partial_features(coeffs, mask.as_mask(), bundle.mask_channel)
    acts_p = nn.forward(bundle.partial, bundle.partial_params, feats)
    mu, lv, eps, z = _reparam(acts_p[-1], rng, D)
    dec = bundle.decoder[:-1]
    acts_d = nn.forward(dec, bundle.decoder_params, z)
    recon, g_logits = recon_terms(acts_d[-1], x, likelihood, gaussian_sigma)
    kl = kl_standard(mu, lv)
    loss = _finish(recon, kl, beta, batch_index)
    _, gz = nn.backward(dec, bundle.decoder_params, acts_d, g_logits / B)
    g_par, _ = nn.backward(bundle.partial, bundle.partial_params, acts_p, _latent_grads(acts_p[-1], eps, gz, beta, B))
    frozen = {k: np.zeros_like(v) for k, v in bundle.decoder_params.items()}
    return LossResult(loss, float(kl.mean()), float(recon.mean()), {"partial": g_par, "decoder": frozen})


def _epochs(config, dataset, rng, step_fn, what):
    report = []
    images = np.asarray(dataset.images)
    n = len(images)
    if n == 0:
        raise ValueError("empty dataset")
    batch_index = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        tot = np.zeros(3)
        for s in range(0, n, config.batch_size):
            batch = images[order[s:s + config.batch_size]]
            try:
                res = step_fn(batch, batch_index)
            except (TrainingError, nn.NonFiniteGradientError) as exc:
                raise TrainingError(f"{what}: epoch {epoch}, batch {batch_index}: {exc}") from exc
            tot += np.array([res.loss, res.kl, res.recon]) * len(batch)
            batch_index += 1
        tot /= n
        row = {"epoch": epoch, "mean_loss": tot[0], "mean_kl": tot[1], "mean_recon": tot[2],
               "wall_seconds": time.perf_counter() - t0}
        log.info("%s epoch %d: loss %.4f kl %.4f recon %.4f", what, epoch, *tot)
        report.append(row)
    return report


def train_vae(config: TrainConfig, dataset, bundle: NetworkBundle | None = None):
    """Train encoder + decoder; returns (bundle, per-epoch report rows)."""
    rng = np.random.default_rng(config.rng_seed)
    if bundle is None:
        bundle = build_bundle(config.channels, rng=np.random.default_rng([config.rng_seed, 1]),
                              mask_channel=config.mask_channel)
    state = nn.AdamState(learning_rate=config.learning_rate)
    params = {**{f"encoder/{k}": v for k, v in bundle.encoder_params.items()},
              **{f"decoder/{k}": v for k, v in bundle.decoder_params.items()}}

    def step(batch, bi):
        res = elbo_loss(bundle, batch, rng, config.beta, config.likelihood, config.gaussian_sigma, bi)
        grads = {f"{net}/{k}": v for net in ("encoder", "decoder") for k, v in res.grads[net].items()}
        nn.adam_step(params, grads, state)
        return res

    report = _epochs(config, dataset, rng, step, "vae")
    bundle.metadata["vae_config"] = config.to_dict()
    return bundle, report


def train_partial(config: TrainConfig, dataset, bundle: NetworkBundle):
    """Train the partial encoder against the frozen decoder."""
    rng = np.random.default_rng([config.rng_seed, 2])
    mask_rng = np.random.default_rng(config.mask_seed if config.mask_seed is not None else [config.rng_seed, 3])
    state = nn.AdamState(learning_rate=config.learning_rate)
    params = bundle.partial_params

    def step(batch, bi):
        mask = sample_mask(mask_rng)
        res = partial_loss(bundle, batch, mask, rng, config.beta, config.noise_sigma,
                           config.likelihood, config.gaussian_sigma, batch_index=bi)
        nn.adam_step(params, res.grads["partial"], state)
        return res

    bundle.invalidate()
    report = _epochs(config, dataset, rng, step, "partial")
    bundle.invalidate()
    bundle.metadata["partial_config"] = config.to_dict()
    return bundle, report
