"""Convolutional Hadamard measurement basis.

A 16x16 Sylvester Hadamard matrix is reshaped into sixteen orthonormal 4x4
patches that are applied at stride 4 to a 28x28 image.  This gives 7x7x16 =
784 coefficients; coefficient ``j`` has coordinates ``(x, y, r)`` with
``j = r*49 + y*7 + x``: horizontal patch position ``x``, vertical ``y`` and
patch (resolution) index ``r``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

IMAGE_SIDE = 28
PATCH = 4
GRID = IMAGE_SIDE // PATCH  # 7
N_FILTERS = PATCH * PATCH  # 16
N_PATTERNS = GRID * GRID * N_FILTERS  # 784

DEFAULT_NOISE_SIGMA = 0.05


class BasisError(ValueError):
    pass


def build_hadamard(order: int) -> np.ndarray:
    """Sylvester construction of the ``order`` x ``order`` Hadamard matrix."""
    if order < 1 or order & (order - 1):
        raise BasisError(f"Hadamard order must be a power of two, got {order}")
    H = np.ones((1, 1))
    base = np.array([[1.0, 1.0], [1.0, -1.0]])
    while H.shape[0] < order:
        H = np.kron(H, base)
    return H


class ConvHadamardFilter:
    """The 16 orthonormal 4x4 patches; ``weights[r]`` is patch ``r``."""

    def __init__(self, weights: np.ndarray):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (N_FILTERS, PATCH, PATCH):
            raise BasisError(f"filter must be {(N_FILTERS, PATCH, PATCH)}, got {weights.shape}")
        self.weights = weights

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.weights.astype("<f8").tobytes()).hexdigest()

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense 784x784 transform: row j maps a flattened image to coefficient j."""
        return transform_images(np.eye(IMAGE_SIDE * IMAGE_SIDE).reshape(-1, IMAGE_SIDE, IMAGE_SIDE), self).T

    def __eq__(self, other):
        return isinstance(other, ConvHadamardFilter) and self.fingerprint == other.fingerprint

    def __hash__(self):
        return hash(self.fingerprint)


def to_conv_filter(H: np.ndarray) -> ConvHadamardFilter:
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (N_FILTERS, N_FILTERS):
        raise BasisError(f"need a Hadamard matrix of order 16, got shape {H.shape}")
    return ConvHadamardFilter(H.reshape(N_FILTERS, PATCH, PATCH) / PATCH)


_DEFAULT = None


def default_filter() -> ConvHadamardFilter:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = to_conv_filter(build_hadamard(N_FILTERS))
    return _DEFAULT


def pattern_coords(j: int) -> tuple[int, int, int]:
    """Flat index -> (x, y, r)."""
    if not 0 <= j < N_PATTERNS:
        raise BasisError(f"pattern index {j} out of range")
    r, rest = divmod(int(j), GRID * GRID)
    y, x = divmod(rest, GRID)
    return x, y, r


def pattern_index(x: int, y: int, r: int) -> int:
    return r * GRID * GRID + y * GRID + x


def transform_images(images: np.ndarray, filt: ConvHadamardFilter) -> np.ndarray:
    """Noiseless coefficients of a batch of images, shape (B, 784)."""
    images = np.asarray(images, dtype=np.float64)
    B = images.shape[0]
    patches = images.reshape(B, GRID, PATCH, GRID, PATCH)  # b, y, i, x, j
    coeffs = np.einsum("byixj,rij->bryx", patches, filt.weights)
    return coeffs.reshape(B, N_PATTERNS)


def inverse_transform(coeffs: np.ndarray, filt: ConvHadamardFilter) -> np.ndarray:
    """Transpose map (B, 784) -> (B, 28, 28); exact inverse for full sets."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    B = coeffs.shape[0]
    c = coeffs.reshape(B, N_FILTERS, GRID, GRID)
    patches = np.einsum("bryx,rij->byixj", c, filt.weights)
    return patches.reshape(B, IMAGE_SIDE, IMAGE_SIDE)


@dataclass
class MeasurementModel:
    filter: ConvHadamardFilter = field(default_factory=default_filter)
    noise_sigma: float = DEFAULT_NOISE_SIGMA

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise BasisError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class MeasurementSet:
    """Ordered measured pattern indices and their values."""

    indices: np.ndarray
    values: np.ndarray
    noise_sigma: float = 0.0
    source: str = "actual"
    basis_fingerprint: str | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.indices.shape != self.values.shape:
            raise BasisError("indices and values differ in length")
        if len(np.unique(self.indices)) != len(self.indices):
            raise BasisError("duplicate pattern indices in measurement set")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= N_PATTERNS):
            raise BasisError("pattern index out of range")
        if not np.all(np.isfinite(self.values)):
            raise BasisError("non-finite measurement value")
        if self.source not in ("actual", "simulated"):
            raise BasisError(f"unknown source tag {self.source!r}")

    def __len__(self):
        return len(self.indices)

    @classmethod
    def empty(cls, model: MeasurementModel | None = None) -> "MeasurementSet":
        model = model or MeasurementModel()
        return cls(np.zeros(0, np.int64), np.zeros(0), model.noise_sigma, "actual", model.filter.fingerprint)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Zero-filled coefficient vector and boolean mask, both length 784."""
        values = np.zeros(N_PATTERNS)
        mask = np.zeros(N_PATTERNS, dtype=bool)
        values[self.indices] = self.values
        mask[self.indices] = True
        return values, mask

    def extended(self, index: int, value: float) -> "MeasurementSet":
        return MeasurementSet(np.append(self.indices, index), np.append(self.values, value),
                              self.noise_sigma, self.source, self.basis_fingerprint)


def measure(image: np.ndarray, indices, model: MeasurementModel, rng=None, source=None) -> MeasurementSet:
    """Measure ``image`` on the given patterns, adding N(0, sigma^2) noise.

    A model with ``noise_sigma == 0`` gives a noiseless (simulated) set.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise BasisError(f"image must be 28x28, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise BasisError("image has non-finite pixels")
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if len(np.unique(indices)) != len(indices):
        raise BasisError("duplicate pattern indices")
    values = transform_images(image[None], model.filter)[0, indices]
    if model.noise_sigma > 0:
        if rng is None:
            raise BasisError("noisy measurement needs an rng")
        values = values + rng.normal(0.0, model.noise_sigma, size=values.shape)
    if source is None:
        source = "actual" if model.noise_sigma > 0 else "simulated"
    return MeasurementSet(indices, values, model.noise_sigma, source, model.filter.fingerprint)


def inverse_reconstruct(m: MeasurementSet, filt: ConvHadamardFilter | None = None) -> np.ndarray:
    """Zero-fill unmeasured coefficients and apply the transpose map."""
    filt = filt or default_filter()
    values, _ = m.dense()
    return inverse_transform(values[None], filt)[0]
