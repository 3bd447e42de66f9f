"""Encoder, decoder and partial encoder networks plus checkpoint persistence."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .basis import (
    GRID, IMAGE_SIDE, N_FILTERS, N_PATTERNS, ConvHadamardFilter, MeasurementSet, default_filter,
)

LATENT_DIM = 16
LOG_VAR_BOUND = 20.0
CHECKPOINT_MAGIC = b"ASIV1"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


class BasisMismatchError(ModelError):
    pass


class CheckpointError(IOError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointFingerprintError(CheckpointError):
    pass


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over the latent space."""

    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.log_var = np.clip(np.asarray(self.log_var, dtype=np.float64).reshape(-1),
                               -LOG_VAR_BOUND, LOG_VAR_BOUND)
        if self.mean.shape != self.log_var.shape:
            raise ModelError("mean and log_var differ in length")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_var))):
            raise ModelError("posterior parameters must be finite")

    @classmethod
    def standard(cls, dim: int = LATENT_DIM) -> "GaussianPosterior":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    def log_density(self, z) -> np.ndarray:
        return diag_log_density(z, self.mean, self.log_var)

    def sample(self, rng, n: int) -> np.ndarray:
        return self.mean + np.exp(0.5 * self.log_var) * rng.standard_normal((n, self.dim))

    def kl_to_standard(self) -> float:
        return float(kl_standard(self.mean, self.log_var))


def diag_log_density(z, mean, log_var):
    """log N(z; mean, diag(exp(log_var))) summed over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    return -0.5 * (d * np.log(2 * np.pi) + np.sum(log_var, -1) + np.sum((z - mean) ** 2 * np.exp(-log_var), -1))


def kl_standard(mean, log_var):
    """KL(N(mean, exp(log_var)) || N(0, I)) over the last axis."""
    return 0.5 * np.sum(mean ** 2 + np.exp(log_var) - 1.0 - log_var, -1)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

def encoder_net(c1: int, c2: int, latent_dim: int = LATENT_DIM) -> list:
    return [
        nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.Affine(c1), nn.ReLU(),   # 14x14
        nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.Affine(c2), nn.ReLU(),  # 7x7
        nn.Flatten(), nn.Dense(c2 * GRID * GRID, 2 * latent_dim),
    ]


def decoder_net(c1: int, c2: int, latent_dim: int = LATENT_DIM) -> list:
    return [
        nn.Dense(latent_dim, c2 * GRID * GRID), nn.Reshape((c2, GRID, GRID)),
        nn.ConvTranspose2d(c2, c2, 4, stride=2, padding=1), nn.ReLU(),  # 14x14
        nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1), nn.ReLU(),  # 28x28
        nn.ConvTranspose2d(c1, 1, 3, stride=1, padding=1), nn.Sigmoid(),
    ]


def partial_net(c2: int, latent_dim: int = LATENT_DIM, mask_channel: bool = False) -> list:
    """Trunk applied after the fixed Hadamard convolution and mask stage."""
    cin = 2 * N_FILTERS if mask_channel else N_FILTERS
    return [
        nn.Conv2d(cin, c2, 3, stride=2, padding=1), nn.Affine(c2), nn.ReLU(),  # 7x7 -> 4x4
        nn.Flatten(), nn.Dense(c2 * 4 * 4, 2 * latent_dim),
    ]


@dataclass
class NetworkBundle:
    encoder: list
    decoder: list
    partial: list
    encoder_params: dict
    decoder_params: dict
    partial_params: dict
    latent_dim: int = LATENT_DIM
    basis_fingerprint: str = ""
    mask_channel: bool = False
    metadata: dict = field(default_factory=dict)
    _partial_lin: tuple | None = field(default=None, repr=False, compare=False)

    def nets(self):
        return {"encoder": (self.encoder, self.encoder_params),
                "decoder": (self.decoder, self.decoder_params),
                "partial": (self.partial, self.partial_params)}

    def invalidate(self):
        """Drop caches derived from parameters (call after updating partial params)."""
        self._partial_lin = None


def build_bundle(channels=(8, 16), latent_dim: int = LATENT_DIM, rng=None,
                 filt: ConvHadamardFilter | None = None, mask_channel: bool = False) -> NetworkBundle:
    rng = rng if rng is not None else np.random.default_rng(0)
    c1, c2 = channels
    filt = filt or default_filter()
    enc, dec, par = encoder_net(c1, c2, latent_dim), decoder_net(c1, c2, latent_dim), partial_net(c2, latent_dim, mask_channel)
    return NetworkBundle(enc, dec, par, nn.init_params(enc, rng), nn.init_params(dec, rng),
                         nn.init_params(par, rng), latent_dim, filt.fingerprint, mask_channel,
                         {"channels": [c1, c2]})


def _check_params(params, what):
    for name, v in params.items():
        if not np.all(np.isfinite(v)):
            raise ModelError(f"{what} parameter {name!r} is not finite")


def _split(out, latent_dim):
    mu, lv = out[..., :latent_dim], out[..., latent_dim:]
    return mu, np.clip(lv, -LOG_VAR_BOUND, LOG_VAR_BOUND)


def encode_batch(bundle: NetworkBundle, images) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(images, dtype=np.float64).reshape(-1, 1, IMAGE_SIDE, IMAGE_SIDE)
    out = nn.forward(bundle.encoder, bundle.encoder_params, x)[-1]
    return _split(out, bundle.latent_dim)


def encode(bundle: NetworkBundle, image) -> GaussianPosterior:
    _check_params(bundle.encoder_params, "encoder")
    mu, lv = encode_batch(bundle, np.asarray(image)[None])
    return GaussianPosterior(mu[0], lv[0])


def decode_batch(bundle: NetworkBundle, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64).reshape(-1, bundle.latent_dim)
    out = nn.forward(bundle.decoder, bundle.decoder_params, z)[-1]
    return out.reshape(-1, IMAGE_SIDE, IMAGE_SIDE)


def decode(bundle: NetworkBundle, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ModelError("latent vector is not finite")
    _check_params(bundle.decoder_params, "decoder")
    return decode_batch(bundle, z[None])[0]


def partial_features(values, mask, mask_channel: bool = False) -> np.ndarray:
    """Zero-filled (B, 16, 7, 7) feature (plus mask planes when requested)."""
    values = np.atleast_2d(values)
    mask = np.broadcast_to(np.atleast_2d(mask), values.shape)
    feat = np.where(mask, values, 0.0).reshape(-1, N_FILTERS, GRID, GRID)
    if mask_channel:
        feat = np.concatenate([feat, mask.reshape(-1, N_FILTERS, GRID, GRID).astype(float)], axis=1)
    return feat


def partial_encode_dense(bundle: NetworkBundle, values, mask) -> tuple[np.ndarray, np.ndarray]:
    out = nn.forward(bundle.partial, bundle.partial_params, partial_features(values, mask, bundle.mask_channel))[-1]
    return _split(out, bundle.latent_dim)


def partial_encode(bundle: NetworkBundle, m: MeasurementSet) -> GaussianPosterior:
    if m.basis_fingerprint is not None and m.basis_fingerprint != bundle.basis_fingerprint:
        raise BasisMismatchError(
            f"measurements use basis {m.basis_fingerprint[:12]}, bundle was trained on {bundle.basis_fingerprint[:12]}")
    _check_params(bundle.partial_params, "partial encoder")
    values, mask = m.dense()
    mu, lv = partial_encode_dense(bundle, values, mask)
    return GaussianPosterior(mu[0], lv[0])


def _partial_linear(bundle: NetworkBundle):
    """Leading linear part of the trunk (first conv plus any affine stages) as a matrix.

    Returns (cols, bias, n_linear_layers): feature @ cols + bias equals the
    flattened output of the first ``n_linear_layers`` trunk layers.
    """
    if bundle._partial_lin is None:
        n_lin = 1
        while n_lin < len(bundle.partial) and isinstance(bundle.partial[n_lin], nn.Affine):
            n_lin += 1
        head = bundle.partial[:n_lin]
        cin = bundle.partial[0].in_channels
        zero = np.zeros((1, cin, GRID, GRID))
        bias = nn.forward(head, bundle.partial_params, zero)[-1].reshape(-1)
        eye = np.eye(cin * GRID * GRID).reshape(-1, cin, GRID, GRID)
        cols = nn.forward(head, bundle.partial_params, eye)[-1].reshape(cin * GRID * GRID, -1) - bias
        bundle._partial_lin = (cols, bias, n_lin)
    return bundle._partial_lin


def partial_encode_candidates(bundle: NetworkBundle, coeffs, base_mask, cand_idx, chunk: int = 32):
    """Posteriors for every (candidate i, extra pattern j) pair.

    ``coeffs`` (N, 784) are simulated coefficients of the N generated images;
    the measurement set for pair (i, j) is ``base_mask`` plus pattern
    ``cand_idx[j]``, with values taken from ``coeffs[i]``.  Uses linearity of
    the leading trunk layers so the cost per pair is one small matmul.
    Returns mean and log-variance, each (N, P, D).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    cand_idx = np.asarray(cand_idx, dtype=np.int64)
    N, P = coeffs.shape[0], len(cand_idx)
    cols, bias, n_lin = _partial_linear(bundle)
    base_feat = partial_features(coeffs, base_mask, bundle.mask_channel).reshape(N, -1)
    base_pre = base_feat @ cols + bias  # (N, U)
    rest = bundle.partial[n_lin:]
    shape = nn.check_shapes(bundle.partial[:n_lin], (bundle.partial[0].in_channels, GRID, GRID))[-1]
    rest_params = {}
    for k, v in bundle.partial_params.items():
        i, name = k.split(".", 1)
        if int(i) >= n_lin:
            rest_params[f"{int(i) - n_lin}.{name}"] = v
    out = np.empty((N, P, 2 * bundle.latent_dim))
    vals = coeffs[:, cand_idx]
    # the standard trunk tail is ReLU -> Flatten -> Dense; run it without the generic pass
    fast = [type(l) for l in rest] == [nn.ReLU, nn.Flatten, nn.Dense]
    if fast:
        W_t = np.ascontiguousarray(rest_params["2.weight"].T)
        b_out = rest_params["2.bias"]
    for s in range(0, P, chunk):
        idx = cand_idx[s:s + chunk]
        pre = vals[:, s:s + chunk, None] * cols[idx][None]
        pre += base_pre[:, None, :]
        if bundle.mask_channel:
            pre += cols[N_PATTERNS + idx][None]
        if fast:
            np.maximum(pre, 0.0, out=pre)
            out[:, s:s + chunk] = pre @ W_t + b_out
        else:
            res = nn.forward(rest, rest_params, pre.reshape((-1,) + tuple(shape)))[-1]
            out[:, s:s + chunk] = res.reshape(N, len(idx), -1)
    mus, lvs = _split(out, bundle.latent_dim)
    return mus, lvs


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _ordered_blobs(bundle):
    for net_name, (_, params) in bundle.nets().items():
        for pname in params:
            yield net_name, pname, params[pname]


def save_checkpoint(bundle: NetworkBundle, path) -> str:
    """Write the bundle; returns the sha256 of the written file."""
    if not bundle.basis_fingerprint:
        raise CheckpointFingerprintError("bundle has no basis fingerprint")
    blobs, entries = [], []
    for net_name, pname, arr in _ordered_blobs(bundle):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"net": net_name, "name": pname, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "latent_dim": bundle.latent_dim,
        "basis_fingerprint": bundle.basis_fingerprint,
        "mask_channel": bundle.mask_channel,
        "layers": {name: [layer.to_dict() for layer in net] for name, (net, _) in bundle.nets().items()},
        "params": entries,
        "metadata": bundle.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(blobs)
    data = CHECKPOINT_MAGIC + struct.pack("<QQ", len(hbytes), len(payload)) + hbytes + payload
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> NetworkBundle:
    data = Path(path).read_bytes()
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: not an ASIV1 checkpoint")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 16:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    hlen, plen = struct.unpack_from("<QQ", data, off)
    off += 16
    if len(data) < off + hlen + plen:
        raise CheckpointTruncatedError(f"{path}: expected {off + hlen + plen} bytes, found {len(data)}")
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if not header.get("basis_fingerprint"):
        raise CheckpointFingerprintError(f"{path}: checkpoint lacks a basis fingerprint")
    off += hlen
    params = {"encoder": {}, "decoder": {}, "partial": {}}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(e["shape"]).astype(np.float64)
        params[e["net"]][e["name"]] = arr
        off += 8 * n
    layers = {k: [nn.layer_from_dict(d) for d in v] for k, v in header["layers"].items()}
    return NetworkBundle(layers["encoder"], layers["decoder"], layers["partial"],
                         params["encoder"], params["decoder"], params["partial"],
                         header["latent_dim"], header["basis_fingerprint"], header["mask_channel"],
                         header.get("metadata", {}))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def net_bytes(params: dict) -> bytes:
    """Canonical byte image of one parameter store (used for freeze checks)."""
    return b"".join(np.ascontiguousarray(params[k], dtype="<f8").tobytes() for k in params)
