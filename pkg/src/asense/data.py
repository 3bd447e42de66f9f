"""Datasets (Fashion-MNIST IDX files, a synthetic shape corpus) and CSV output."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# md5 of the gzip archives as published by zalandoresearch/fashion-mnist
FMNIST_FILES = {
    "train-images-idx3-ubyte.gz": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
    "train-labels-idx1-ubyte.gz": "25c81989df183df01b3e8a0aad5dffbe",
    "t10k-images-idx3-ubyte.gz": "bef4ecab320f06d8554ea6380940ec79",
    "t10k-labels-idx1-ubyte.gz": "bb300cfdad3c16e7a12a480ee83cd310",
}

SHAPE_FAMILIES = ("rectangle", "frame", "hbar", "vbar", "disc",
                  "ring", "cross", "diagonal", "two_discs", "triangle")


class DataError(IOError):
    pass


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxDimensionError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, 28, 28) in [0, 1]
    labels: np.ndarray  # (n,) uint8
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.split)

    def one_per_class(self, n_classes: int = 10) -> "Dataset":
        """First image of each class, in class order."""
        picks = [int(np.flatnonzero(self.labels == c)[0]) for c in range(n_classes) if np.any(self.labels == c)]
        return Dataset(self.images[picks], self.labels[picks], self.split)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    need = int(np.prod(dims))
    payload = raw[4 + 4 * ndim:]
    if len(payload) < need:
        raise IdxTruncatedError(f"{path}: expected {need} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=need).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I" + "I" * array.ndim, magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise IdxDimensionError(f"{images_path}: images have shape {images.shape[1:]}, expected (28, 28)")
    if len(images) != len(labels):
        raise IdxDimensionError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.copy(), split)


def load_fashion_mnist(data_dir, split: str = "train") -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    data_dir = Path(data_dir)
    paths = []
    for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
        for name in (f"{prefix}-{kind}.gz", f"{prefix}-{kind}"):
            if (data_dir / name).exists():
                paths.append(data_dir / name)
                break
        else:
            raise DataError(f"{data_dir}: missing {prefix}-{kind}.gz; expected files: "
                            + ", ".join(f"{n} (md5 {h})" for n, h in FMNIST_FILES.items()))
    return load_idx(*paths, split=split)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _grid():
    yy, xx = np.mgrid[0:28, 0:28]
    return xx + 0.5, yy + 0.5


def _draw(family: int, rng) -> np.ndarray:
    xx, yy = _grid()
    img = np.zeros((28, 28))
    cx, cy = rng.uniform(9, 19, size=2)
    s = rng.uniform(4, 9)
    name = SHAPE_FAMILIES[family]
    if name == "rectangle":
        w, h = s, rng.uniform(4, 9)
        img[(abs(xx - cx) < w) & (abs(yy - cy) < h)] = 1
    elif name == "frame":
        w, h = s + 1, rng.uniform(5, 10)
        outer = (abs(xx - cx) < w) & (abs(yy - cy) < h)
        inner = (abs(xx - cx) < w - 2) & (abs(yy - cy) < h - 2)
        img[outer & ~inner] = 1
    elif name == "hbar":
        img[(abs(yy - cy) < rng.uniform(1.5, 3.5)) & (abs(xx - cx) < s + 4)] = 1
    elif name == "vbar":
        img[(abs(xx - cx) < rng.uniform(1.5, 3.5)) & (abs(yy - cy) < s + 4)] = 1
    elif name == "disc":
        img[(xx - cx) ** 2 + (yy - cy) ** 2 < s ** 2] = 1
    elif name == "ring":
        d = np.hypot(xx - cx, yy - cy)
        img[(d < s + 1) & (d > s - 1.5)] = 1
    elif name == "cross":
        t = rng.uniform(1.2, 2.5)
        img[((abs(xx - cx) < t) & (abs(yy - cy) < s + 2)) | ((abs(yy - cy) < t) & (abs(xx - cx) < s + 2))] = 1
    elif name == "diagonal":
        sign = rng.choice([-1.0, 1.0])
        d = abs((xx - cx) - sign * (yy - cy)) / np.sqrt(2)
        img[(d < rng.uniform(1.2, 2.5)) & (np.hypot(xx - cx, yy - cy) < s + 4)] = 1
    elif name == "two_discs":
        ang = rng.uniform(0, np.pi)
        r = rng.uniform(2.5, 4)
        off = (s * 0.8) * np.array([np.cos(ang), np.sin(ang)])
        for sgn in (-1, 1):
            img[(xx - cx - sgn * off[0]) ** 2 + (yy - cy - sgn * off[1]) ** 2 < r ** 2] = 1
    elif name == "triangle":
        top = cy - s
        inside = (yy > top) & (yy < cy + s) & (abs(xx - cx) < (yy - top) * 0.6)
        img[inside] = 1
    return img * rng.uniform(0.5, 1.0)


def synth_dataset(count: int, rng_seed: int = 0, split: str = "train") -> Dataset:
    """Procedural 28x28 shapes; label = shape family (10 classes)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    labels = rng.integers(0, len(SHAPE_FAMILIES), size=count).astype(np.uint8)
    images = np.stack([_draw(int(c), rng) for c in labels])
    # soften edges with a 3x3 box blur
    pad = np.pad(images, ((0, 0), (1, 1), (1, 1)))
    blurred = sum(pad[:, i:i + 28, j:j + 28] for i in range(3) for j in range(3)) / 9.0
    images = np.clip(0.5 * images + 0.5 * blurred, 0.0, 1.0)
    return Dataset(images, labels, split)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def write_csv(rows, schema, path) -> None:
    """Write ``rows`` (dicts or sequences) with a header from ``schema``."""
    schema = list(schema)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(schema)
            for row in rows:
                if isinstance(row, dict):
                    missing = set(schema) - set(row)
                    if missing:
                        raise ValueError(f"row lacks columns {sorted(missing)}")
                    row = [row[k] for k in schema]
                elif len(row) != len(schema):
                    raise ValueError(f"row has {len(row)} fields, schema has {len(schema)}")
                w.writerow([format_value(v) for v in row])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
