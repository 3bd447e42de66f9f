"""Per-instance stochastic variational inference through the frozen decoder.

The variational family is a diagonal Gaussian over the latent space with
parameters (mean, log-variance).  The likelihood of a measurement set is an
isotropic Gaussian around the basis coefficients of the decoded image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .basis import MeasurementModel, MeasurementSet
from .models import LOG_VAR_BOUND, GaussianPosterior, NetworkBundle, diag_log_density, kl_standard


class SviError(FloatingPointError):
    pass


@dataclass
class SviConfig:
    iterations: int = 100
    learning_rate: float = 0.01
    samples_per_iter: int = 1
    init: GaussianPosterior | None = None  # None -> standard normal parameters
    rng_seed: int = 0
    kl_estimator: str = "analytic"  # or "mc"
    final_lr_ratio: float = 1.0
    antithetic: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.samples_per_iter < 1:
            raise ValueError("samples_per_iter must be >= 1")
        if not 0 < self.final_lr_ratio <= 1:
            raise ValueError("final_lr_ratio must be in (0, 1]")
        if self.kl_estimator not in ("analytic", "mc"):
            raise ValueError(f"unknown kl_estimator {self.kl_estimator!r}")


@dataclass
class SviResult:
    posterior: GaussianPosterior
    trace: np.ndarray
    clamp_events: int = 0


@dataclass
class _Obs:
    """Dense, batched view of measurement sets for the vectorised core."""

    values: np.ndarray  # (B, 784), zero where unmeasured
    mask: np.ndarray    # (B, 784) bool
    sigma: float
    transform: np.ndarray = field(repr=False, default=None)  # (784, 784)


def _obs_from_set(m: MeasurementSet, model: MeasurementModel) -> _Obs:
    if len(m) and not model.noise_sigma > 0:
        raise SviError("measurement noise sigma must be > 0 when measurements are present")
    v, mk = m.dense()
    return _Obs(v[None], mk[None], model.noise_sigma, model.filter.matrix)


def _decode_grad(bundle: NetworkBundle, z, obs: _Obs, need_grad=True):
    """Negative log-likelihood per row and its gradient w.r.t. z."""
    acts = nn.forward(bundle.decoder, bundle.decoder_params, z)
    img = acts[-1].reshape(len(z), -1)
    S = z.shape[0] // obs.values.shape[0]
    values = np.repeat(obs.values, S, axis=0) if S > 1 else obs.values
    mask = np.repeat(obs.mask, S, axis=0) if S > 1 else obs.mask
    resid = np.where(mask, img @ obs.transform.T - values, 0.0)
    n_meas = mask.sum(1)
    s2 = obs.sigma ** 2 if obs.sigma > 0 else 1.0
    nll = 0.5 * np.sum(resid ** 2, 1) / s2 + n_meas * np.log(np.sqrt(2 * np.pi * s2))
    if not need_grad:
        return nll, None
    if not mask.any():
        return nll, np.zeros_like(z)
    g_img = (resid @ obs.transform) / s2
    _, gz = nn.backward(bundle.decoder, bundle.decoder_params, acts, g_img.reshape(acts[-1].shape), param_grads=False)
    return nll, gz


def _loss_and_grads(mu, lv, eps, bundle, obs, kl_estimator):
    """Loss estimate per instance and gradients w.r.t. (mu, log_var).

    ``eps`` has shape (B*S, D); rows b*S .. b*S+S-1 are the draws for instance b.
    """
    B, D = mu.shape
    S = eps.shape[0] // B
    std = np.exp(0.5 * lv)
    mu_r, lv_r, std_r = (np.repeat(a, S, axis=0) for a in (mu, lv, std))
    z = mu_r + std_r * eps
    nll, gz = _decode_grad(bundle, z, obs)
    g_mu = gz.reshape(B, S, D).mean(1)
    g_lv = (gz * eps * 0.5 * std_r).reshape(B, S, D).mean(1)
    if kl_estimator == "analytic":
        kl = kl_standard(mu, lv)
        g_mu = g_mu + mu
        g_lv = g_lv + 0.5 * (np.exp(lv) - 1.0)
    else:
        logq = diag_log_density(z, mu_r, lv_r)
        logp = diag_log_density(z, 0.0, np.zeros(D))
        kl = (logq - logp).reshape(B, S).mean(1)
        # d/dmu of [log q(z) - log p(z)] through z = mu + std*eps: only -log p depends on mu
        g_mu = g_mu + z.reshape(B, S, D).mean(1)
        g_lv = g_lv + (-0.5 + z * eps * 0.5 * std_r).reshape(B, S, D).mean(1)
    loss = nll.reshape(B, S).mean(1) + kl
    return loss, g_mu, g_lv


def svi_loss(q: GaussianPosterior, m: MeasurementSet, bundle: NetworkBundle, model: MeasurementModel,
             rng, n_samples: int = 1, kl_estimator: str = "mc") -> float:
    """Monte-Carlo estimate of E_q[log q(z) - log p(y|z) - log p(z)]."""
    obs = _obs_from_set(m, model)
    eps = rng.standard_normal((n_samples, q.dim))
    mu, lv = q.mean[None], q.log_var[None]
    z = mu + np.exp(0.5 * lv) * eps
    nll, _ = _decode_grad(bundle, z, _Obs(np.repeat(obs.values, n_samples, 0), np.repeat(obs.mask, n_samples, 0),
                                          obs.sigma, obs.transform), need_grad=False)
    if kl_estimator == "analytic":
        return float(nll.mean() + kl_standard(q.mean, q.log_var))
    kl = diag_log_density(z, mu, lv) - diag_log_density(z, 0.0, np.zeros(q.dim))
    return float(np.mean(nll + kl))


def _draw_eps(rng, B, samples, D, antithetic):
    """(B*S, D) noise; ``rng`` is one generator or one generator per row."""
    if isinstance(rng, (list, tuple)):
        return np.concatenate([_draw_eps(r, 1, samples, D, antithetic) for r in rng])
    if antithetic:
        half = rng.standard_normal((B, max(samples // 2, 1), D))
        return np.concatenate([half, -half], axis=1).reshape(-1, D)
    return rng.standard_normal((B * samples, D))


def svi_core(obs: _Obs, bundle: NetworkBundle, mu0, lv0, iterations, learning_rate, rng,
             samples=1, kl_estimator="analytic", final_lr_ratio=1.0, antithetic=False):
    """Vectorised SVI over B independent instances; returns (mu, lv, trace (iters, B), clamps).

    The step size decays geometrically from ``learning_rate`` to
    ``learning_rate * final_lr_ratio`` over the run (1.0 keeps it constant).
    Passing a list of B generators gives each row its own noise stream, so a
    row's result does not depend on what else is in the batch.
    """
    params = {"mu": np.array(mu0, dtype=np.float64), "log_var": np.array(lv0, dtype=np.float64)}
    B, D = params["mu"].shape
    state = nn.AdamState(learning_rate=learning_rate)
    trace = np.empty((iterations, B))
    clamps = 0
    for it in range(iterations):
        eps = _draw_eps(rng, B, samples, D, antithetic)
        loss, g_mu, g_lv = _loss_and_grads(params["mu"], params["log_var"], eps, bundle, obs, kl_estimator)
        if not np.all(np.isfinite(loss)):
            raise SviError(f"non-finite SVI loss at iteration {it}")
        trace[it] = loss
        state.learning_rate = learning_rate * final_lr_ratio ** (it / max(iterations - 1, 1))
        nn.adam_step(params, {"mu": g_mu, "log_var": g_lv}, state)
        lv = params["log_var"]
        out = (lv < -LOG_VAR_BOUND) | (lv > LOG_VAR_BOUND)
        if out.any():
            clamps += int(out.sum())
            np.clip(lv, -LOG_VAR_BOUND, LOG_VAR_BOUND, out=lv)
    return params["mu"], params["log_var"], trace, clamps


def svi_fit(m: MeasurementSet, bundle: NetworkBundle, model: MeasurementModel,
            config: SviConfig | None = None, rng=None) -> SviResult:
    """Fit q(z | y) for one measurement set by Adam on (mean, log-variance)."""
    config = config or SviConfig()
    rng = rng if rng is not None else np.random.default_rng(config.rng_seed)
    init = config.init or GaussianPosterior.standard(bundle.latent_dim)
    obs = _obs_from_set(m, model)
    mu, lv, trace, clamps = svi_core(obs, bundle, init.mean[None], init.log_var[None], config.iterations,
                                     config.learning_rate, rng, config.samples_per_iter, config.kl_estimator,
                                     config.final_lr_ratio, config.antithetic)
    return SviResult(GaussianPosterior(mu[0], lv[0]), trace[:, 0], clamps)


def svi_fit_dense(values, mask, bundle: NetworkBundle, model: MeasurementModel, iterations: int,
                  learning_rate: float, rng, mu0=None, lv0=None, samples=1, kl_estimator="analytic"):
    """Batched SVI for many (values, mask) rows at once; returns (mu, lv)."""
    values = np.atleast_2d(values)
    mask = np.broadcast_to(np.atleast_2d(mask), values.shape)
    B, D = values.shape[0], bundle.latent_dim
    mu0 = np.zeros((B, D)) if mu0 is None else mu0
    lv0 = np.zeros((B, D)) if lv0 is None else lv0
    sigma = model.noise_sigma if model.noise_sigma > 0 else 1.0
    obs = _Obs(values, np.asarray(mask), sigma, model.filter.matrix)
    mu, lv, _, _ = svi_core(obs, bundle, mu0, lv0, iterations, learning_rate, rng, samples, kl_estimator)
    return mu, lv
