"""Active sequential measurement selection.

Each step samples candidate latents from the current predictive prior,
decodes them, simulates every remaining pattern on every candidate, scores
the resulting candidate posteriors and measures the best pattern on the
target.  The posterior after the real measurement becomes the next prior.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .basis import (
    GRID, N_FILTERS, N_PATTERNS, MeasurementModel, MeasurementSet, inverse_reconstruct, measure,
    pattern_coords, transform_images,
)
from .models import (
    GaussianPosterior, NetworkBundle, decode, decode_batch, diag_log_density, partial_encode,
    partial_encode_candidates,
)
from .svi import _Obs, svi_core, svi_fit_dense

CRITERIA = ("qp", "mi", "ho")
TRAJECTORY_COLUMNS = ("step", "chosen_j", "chosen_x", "chosen_y", "chosen_r", "measurement", "mse", "ssim", "entropy")


class EpisodeError(RuntimeError):
    pass


def parse_method(spec: str) -> tuple[str, int]:
    """'pvae' -> ('pvae', 0); 'svi:60' / 'svi@60' -> ('svi', 60)."""
    s = str(spec).strip().lower()
    if s == "pvae":
        return "pvae", 0
    for sep in (":", "@"):
        if s.startswith("svi" + sep):
            try:
                n = int(s[4:])
            except ValueError:
                break
            if n >= 1:
                return "svi", n
    raise ValueError(f"posterior method must be 'pvae' or 'svi:N', got {spec!r}")


@dataclass
class EpisodeConfig:
    criterion: str = "qp"
    candidates: int = 100
    steps: int = 50
    candidate_posterior: str = "pvae"
    posterior_update: str = "svi:100"
    svi_learning_rate: float = 0.01
    warm_start: bool = True
    noise_sigma: float = 0.05
    rng_seed: int = 0
    mi_sign: str = "reduction"   # "printed" flips the sign
    qp_form: str = "relative"    # "bare" drops the prior term
    record_info_maps: bool = False

    def __post_init__(self):
        self.criterion = self.criterion.lower()
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {{qp, mi, ho}}, got {self.criterion!r}")
        if self.candidates < 1:
            raise ValueError("candidates must be >= 1")
        if not 1 <= self.steps <= N_PATTERNS:
            raise ValueError(f"steps must be in [1, {N_PATTERNS}]")
        parse_method(self.candidate_posterior)
        parse_method(self.posterior_update)
        if self.mi_sign not in ("reduction", "printed"):
            raise ValueError("mi_sign must be 'reduction' or 'printed'")
        if self.qp_form not in ("relative", "bare"):
            raise ValueError("qp_form must be 'relative' or 'bare'")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int  # number of patterns measured so far, starting at 1
    chosen: int
    measurement: float
    posterior: GaussianPosterior
    mse: float
    ssim: float
    entropy: float
    top_patterns: list
    top_scores: list
    info_map: np.ndarray | None = None

    def row(self) -> dict:
        x, y, r = pattern_coords(self.chosen)
        return {"step": self.step, "chosen_j": self.chosen, "chosen_x": x, "chosen_y": y, "chosen_r": r,
                "measurement": self.measurement, "mse": self.mse, "ssim": self.ssim, "entropy": self.entropy}


@dataclass
class Trajectory:
    target: np.ndarray
    config: EpisodeConfig
    records: list = field(default_factory=list)
    reconstruction: np.ndarray | None = None
    measurements: MeasurementSet | None = None

    @property
    def patterns(self) -> list[int]:
        return [r.chosen for r in self.records]

    def rows(self) -> list[dict]:
        return [r.row() for r in self.records]


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def gaussian_entropy(q: GaussianPosterior) -> float:
    return float(0.5 * q.dim * (1.0 + np.log(2 * np.pi)) + 0.5 * np.sum(q.log_var))


def score_qp(q: GaussianPosterior, z, p: GaussianPosterior) -> float:
    """log q(z) - log p(z) for diagonal Gaussians."""
    return float(q.log_density(z) - p.log_density(z))


def score_mi(q: GaussianPosterior, p: GaussianPosterior) -> float:
    """Entropy reduction from p to q: 0.5 * (log|Sigma_p| - log|Sigma_q|)."""
    return float(0.5 * (np.sum(p.log_var) - np.sum(q.log_var)))


def score_ho(values) -> float:
    return float(np.sum(np.abs(values)))


def qp_matrix(mu, lv, z, prior: GaussianPosterior | None):
    """(N, P) log-density matrix; ``prior=None`` gives the bare form."""
    M = diag_log_density(z[:, None, :], mu, lv)
    if prior is not None:
        M = M - prior.log_density(z)[:, None]
    return M


def mi_matrix(lv, prior: GaussianPosterior, sign: str = "reduction"):
    M = 0.5 * (np.sum(prior.log_var) - np.sum(lv, -1))
    return M if sign == "reduction" else -M


def select_next(M, remaining) -> int:
    """Pattern maximising the column sum of ``M``; ties go to the lowest index."""
    remaining = np.asarray(remaining, dtype=np.int64)
    M = np.asarray(M, dtype=np.float64)
    if len(remaining) == 0 or M.size == 0:
        raise EpisodeError("no remaining patterns to choose from")
    if M.ndim == 1:
        M = M[None]
    if M.shape[1] != len(remaining):
        raise EpisodeError(f"score matrix has {M.shape[1]} columns for {len(remaining)} patterns")
    totals = M.sum(axis=0)
    best = totals.max()
    return int(remaining[totals == best].min())


def info_map(row, remaining) -> np.ndarray:
    """Sum one candidate's scores over the resolution axis -> (7, 7) grid [y, x]."""
    full = np.zeros(N_PATTERNS)
    full[np.asarray(remaining, dtype=np.int64)] = np.asarray(row, dtype=np.float64)
    return full.reshape(N_FILTERS, GRID, GRID).sum(axis=0)


# ---------------------------------------------------------------------------
# episode
# ---------------------------------------------------------------------------

def _candidate_posteriors(bundle, coeffs, base_mask, remaining, model, method, rng, lr):
    kind, iters = parse_method(method)
    if kind == "pvae":
        return partial_encode_candidates(bundle, coeffs, base_mask, remaining)
    N, P = coeffs.shape[0], len(remaining)
    masks = np.repeat(base_mask[None], P, axis=0)
    masks[np.arange(P), remaining] = True
    vals = np.repeat(coeffs[:, None, :], P, axis=1).reshape(N * P, -1)
    mu, lv = svi_fit_dense(vals, np.tile(masks, (N, 1)), bundle, model, iters, lr, rng)
    D = bundle.latent_dim
    return mu.reshape(N, P, D), lv.reshape(N, P, D)


class _Episode:
    """Mutable state of one episode; stepping is split so updates can be batched."""

    def __init__(self, target, bundle, config, model):
        self.target = np.asarray(target, dtype=np.float64)
        if self.target.shape != (28, 28):
            raise EpisodeError(f"target must be 28x28, got {self.target.shape}")
        self.bundle, self.config = bundle, config
        self.model = model if model is not None else MeasurementModel(noise_sigma=config.noise_sigma)
        self.sim_model = MeasurementModel(self.model.filter, 0.0)
        # SVI needs a positive noise scale even for noiseless measurement
        self.svi_model = self.model if self.model.noise_sigma > 0 else MeasurementModel(self.model.filter, 1e-3)
        seeds = np.random.SeedSequence(config.rng_seed).spawn(3)
        self.cand_rng, self.noise_rng, self.svi_rng = (np.random.default_rng(s) for s in seeds)
        self.prior = GaussianPosterior.standard(bundle.latent_dim)
        self.m = MeasurementSet.empty(self.model)
        self.chosen = np.zeros(N_PATTERNS, dtype=bool)
        self.traj = Trajectory(self.target, config)
        self._pending = None

    def select(self):
        """Steps A-E plus the actual measurement."""
        cfg, bundle = self.config, self.bundle
        k = len(self.traj.records)
        remaining = np.flatnonzero(~self.chosen)
        if len(remaining) == 0:
            raise EpisodeError(f"step {k}: all patterns already measured")
        z = self.prior.sample(self.cand_rng, cfg.candidates)
        x_hat = decode_batch(bundle, z)
        coeffs = transform_images(x_hat, self.sim_model.filter)
        if len(self.m):
            # candidates supply only the new value; measured patterns keep the actual readings
            v, mk = self.m.dense()
            coeffs[:, mk] = v[mk]
        if cfg.criterion == "ho":
            M = np.abs(coeffs[:, remaining])
        else:
            mu, lv = _candidate_posteriors(bundle, coeffs, self.chosen, remaining, self.model,
                                           cfg.candidate_posterior, self.svi_rng, cfg.svi_learning_rate)
            if cfg.criterion == "qp":
                M = qp_matrix(mu, lv, z, self.prior if cfg.qp_form == "relative" else None)
            else:
                M = mi_matrix(lv, self.prior, cfg.mi_sign)
        bad = ~np.isfinite(M)
        if bad.any():
            i, jj = np.argwhere(bad)[0]
            raise EpisodeError(f"step {k}: non-finite score at candidate {i}, pattern {remaining[jj]}")
        j = select_next(M, remaining)
        self.chosen[j] = True
        y = measure(self.target, [j], self.model, self.noise_rng, source="actual").values[0]
        self.m = self.m.extended(j, y)
        self._pending = (k, j, float(y), M.sum(axis=0), remaining)

    def commit(self, q: GaussianPosterior):
        """Step F result in, metrics out."""
        k, j, y, totals, remaining = self._pending
        self.prior = q
        if self.config.criterion == "ho":
            recon = inverse_reconstruct(self.m, self.model.filter)
        else:
            recon = decode(self.bundle, q.mean)
        top = np.lexsort((remaining, -totals))[:5]
        rec = StepRecord(k + 1, j, y, q, metrics.mse(recon, self.target), metrics.ssim(recon, self.target),
                         gaussian_entropy(q), remaining[top].tolist(), totals[top].tolist())
        if self.config.record_info_maps:
            rec.info_map = info_map(totals, remaining)
        self.traj.records.append(rec)
        self.traj.reconstruction = recon
        self.traj.measurements = self.m
        self._pending = None


def _update_all(episodes):
    """Step F for a set of episodes; SVI updates sharing settings run as one batch."""
    groups = {}
    for e in episodes:
        kind, iters = parse_method(e.config.posterior_update)
        if kind == "pvae":
            e.commit(partial_encode(e.bundle, e.m))
            continue
        key = (iters, e.config.svi_learning_rate, e.svi_model.noise_sigma, e.model.filter.fingerprint)
        groups.setdefault(key, []).append(e)
    for (iters, lr, sigma, _), group in groups.items():
        D = group[0].bundle.latent_dim
        values, masks = zip(*(e.m.dense() for e in group))
        warm = [e.prior if e.config.warm_start else GaussianPosterior.standard(D) for e in group]
        obs = _Obs(np.stack(values), np.stack(masks), sigma, group[0].model.filter.matrix)
        mu, lv, _, _ = svi_core(obs, group[0].bundle, np.stack([w.mean for w in warm]),
                                np.stack([w.log_var for w in warm]), iters, lr, [e.svi_rng for e in group])
        for i, e in enumerate(group):
            e.commit(GaussianPosterior(mu[i], lv[i]))


def run_episodes(targets, bundle: NetworkBundle, configs, model: MeasurementModel | None = None) -> list:
    """Run several episodes in lockstep; result i only depends on (targets[i], configs[i])."""
    if isinstance(configs, EpisodeConfig):
        configs = [configs] * len(targets)
    if len(configs) != len(targets):
        raise ValueError(f"{len(targets)} targets but {len(configs)} configs")
    episodes = [_Episode(t, bundle, c, model) for t, c in zip(targets, configs)]
    for k in range(max((c.steps for c in configs), default=0)):
        live = [e for e in episodes if k < e.config.steps]
        for e in live:
            e.select()
        _update_all(live)
    return [e.traj for e in episodes]


def run_episode(target, bundle: NetworkBundle, config: EpisodeConfig,
                model: MeasurementModel | None = None) -> Trajectory:
    """One active-measurement episode of ``config.steps`` steps."""
    return run_episodes([target], bundle, [config], model)[0]
