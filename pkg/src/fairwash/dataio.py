"""Datasets and on-disk formats.

Covers the synthetic credit dataset, a deterministic synthetic digit corpus
(a stand-in for handwritten-digit IDX files when none are available on
disk), the big-endian IDX parser with a bit-exact internal writer, global
mean/std normalization, and the FWMAP01 binary map format with a companion
PGM render.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .explain import ExplanationMap
from .models import LogRegModel
from .rng import RngState
from .tape import ContractError, as_array


# ---------------------------------------------------------------------------
# dataset container and normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64
    feature_names: list | None = None
    norm: NormStats | None = None

    def __post_init__(self):
        self.inputs = as_array(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) == 0:
            raise ContractError("dataset needs a non-empty (N, D) input matrix")
        if self.labels.shape != (len(self.inputs),):
            raise ContractError("one label per input row required")

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def fit_normalization(x) -> NormStats:
    x = as_array(x)
    std = float(x.std())
    if std < 1e-12:
        raise ContractError("zero-variance data cannot be normalized")
    return NormStats(float(x.mean()), std)


def normalize(ds: Dataset) -> Dataset:
    """Global mean-0 / std-1 normalization over all entries of this dataset.

    The statistics are recorded on the result so held-out splits can reuse
    them via normalize_with; normalizing twice is refused.
    """
    if ds.norm is not None:
        raise ContractError("dataset is already normalized")
    stats = fit_normalization(ds.inputs)
    return Dataset((ds.inputs - stats.mean) / stats.std, ds.labels, ds.feature_names, stats)


def normalize_with(ds: Dataset, stats: NormStats) -> Dataset:
    """Apply normalization statistics fitted elsewhere (train split rules)."""
    if ds.norm is not None:
        raise ContractError("dataset is already normalized")
    return Dataset((ds.inputs - stats.mean) / stats.std, ds.labels, ds.feature_names, stats)


def denormalize(x, stats: NormStats) -> np.ndarray:
    return as_array(x) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# synthetic credit data
# ---------------------------------------------------------------------------

CREDIT_NORMAL = np.array([0.0, 0.4, -1.0])
CREDIT_OFFSET = 0.0
CREDIT_FEATURES = ["gender", "income", "taxes"]


def credit_model() -> LogRegModel:
    """The fixed scoring model of the credit demo: sigmoid(0.9 g + 0.1 i)."""
    return LogRegModel(np.array([0.9, 0.1, 0.0]), 0.0)


def gen_credit(n: int, seed: int = 0) -> Dataset:
    """Synthetic credit applications (gender, income, taxes).

    gender is uniform on {-1, +1}; raw income is Normal(5000, 5000) clipped
    below at 250 and then divided by the sample maximum (so max income is
    exactly 1); taxes are exactly 0.4 * income, which puts every sample on
    the hyperplane (0, 0.4, -1) . x = 0. Labels are the decisions of the
    fixed scoring model thresholded at one half.
    """
    if n < 1:
        raise ContractError("need n >= 1 samples")
    rng = RngState(seed)
    gender = np.where(rng.stream("credit/gender").random(n) < 0.5, -1.0, 1.0)
    raw = rng.stream("credit/income").normal(5000.0, 5000.0, size=n)
    raw = np.maximum(raw, 250.0)
    income = raw / raw.max()
    taxes = 0.4 * income
    x = np.column_stack([gender, income, taxes])
    labels = (x @ credit_model().w + credit_model().c > 0.0).astype(np.int64)
    return Dataset(x, labels, feature_names=list(CREDIT_FEATURES))


# ---------------------------------------------------------------------------
# synthetic digit corpus
# ---------------------------------------------------------------------------

_DIGIT_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

IMG_SIDE = 28


def _glyph(digit: int) -> np.ndarray:
    rows = _DIGIT_ROWS[int(digit)]
    return np.array([[float(ch) for ch in row] for row in rows])


def _place(canvas: np.ndarray, block: np.ndarray, top: int, left: int):
    canvas[top:top + block.shape[0], left:left + block.shape[1]] = block


def _base_image(digit: int) -> np.ndarray:
    """Glyph scaled by 3 and centered on a 28x28 canvas."""
    img = np.zeros((IMG_SIDE, IMG_SIDE))
    block = np.kron(_glyph(digit), np.ones((3, 3)))
    _place(img, block, (IMG_SIDE - block.shape[0]) // 2, (IMG_SIDE - block.shape[1]) // 2)
    return img


def _warp(img: np.ndarray, theta, sx, sy, shear, tx, ty) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    fwd = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([sx, sy])
    inv = np.linalg.inv(fwd)
    center = np.array([(IMG_SIDE - 1) / 2.0, (IMG_SIDE - 1) / 2.0])
    offset = center - inv @ (center + np.array([ty, tx]))
    return ndimage.affine_transform(img, inv, offset=offset, order=1, mode="constant", cval=0.0)


def gen_digits(n: int, seed: int = 0) -> Dataset:
    """Deterministic synthetic 28x28 digit images.

    Bitmap-font glyphs under seeded random affine distortion (rotation,
    anisotropic scale, shear, translation), Gaussian blur, and light pixel
    noise, clipped to [0, 1]. The corpus is a fixed, reproducible stand-in
    for handwritten-digit files; use load_idx_dataset when real IDX files
    are available.
    """
    if n < 1:
        raise ContractError("need n >= 1 samples")
    rng = RngState(seed)
    labels = rng.stream("digits/label").integers(0, 10, size=n)
    geom = rng.stream("digits/geom")
    thetas = geom.uniform(-0.20, 0.20, size=n)
    scales = geom.uniform(0.85, 1.15, size=(n, 2))
    shears = geom.uniform(-0.15, 0.15, size=n)
    shifts = geom.uniform(-2.5, 2.5, size=(n, 2))
    blurs = rng.stream("digits/blur").uniform(0.4, 0.9, size=n)
    noise = rng.stream("digits/noise").uniform(0.0, 0.05, size=(n, IMG_SIDE, IMG_SIDE))

    bases = {d: _base_image(d) for d in range(10)}
    out = np.empty((n, IMG_SIDE * IMG_SIDE))
    for i in range(n):
        img = _warp(bases[int(labels[i])], thetas[i], scales[i, 0], scales[i, 1],
                    shears[i], shifts[i, 0], shifts[i, 1])
        img = ndimage.gaussian_filter(img, sigma=blurs[i])
        img = np.clip(img + noise[i], 0.0, 1.0)
        out[i] = img.ravel()
    return Dataset(out, labels.astype(np.int64))


def gen_digits_split(n_train: int, n_test: int, seed: int = 0):
    """Disjoint train/test splits drawn from one deterministic corpus."""
    full = gen_digits(n_train + n_test, seed)
    train = Dataset(full.inputs[:n_train].copy(), full.labels[:n_train].copy())
    test = Dataset(full.inputs[n_train:].copy(), full.labels[n_train:].copy())
    return train, test


def target_fourtwo(blur: float = 0.5) -> np.ndarray:
    """A 28x28 [0, 1] rendition of the digits "42", used as an attack target."""
    img = np.zeros((IMG_SIDE, IMG_SIDE))
    four = np.kron(_glyph(4), np.ones((2, 2)))
    two = np.kron(_glyph(2), np.ones((2, 2)))
    _place(img, four, 7, 3)
    _place(img, two, 7, 15)
    if blur > 0:
        img = ndimage.gaussian_filter(img, sigma=blur)
        img /= img.max()
    return img


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for IDX parse failures; nothing partial is ever returned."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def _idx_header(data: bytes, path, expected_magic: int, n_dims: int):
    header_len = 4 + 4 * n_dims
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: shorter than the 4-byte magic")
    magic = int.from_bytes(data[:4], "big")
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(data) < header_len:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{n_dims}I", data[4:header_len])
    return dims, header_len


def load_idx_images(path) -> np.ndarray:
    """(N, rows, cols) uint8 pixel array from a big-endian IDX image file."""
    data = Path(path).read_bytes()
    (n, rows, cols), off = _idx_header(data, path, IDX_IMAGES_MAGIC, 3)
    need = off + n * rows * cols
    if len(data) < need:
        raise IdxTruncatedError(f"{path}: expected {need} bytes, file has {len(data)}")
    if len(data) > need:
        raise IdxTruncatedError(f"{path}: {len(data) - need} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, offset=off).reshape(n, rows, cols).copy()


def load_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (n,), off = _idx_header(data, path, IDX_LABELS_MAGIC, 1)
    need = off + n
    if len(data) < need:
        raise IdxTruncatedError(f"{path}: expected {need} bytes, file has {len(data)}")
    if len(data) > need:
        raise IdxTruncatedError(f"{path}: {len(data) - need} trailing bytes after payload")
    return np.frombuffer(data, dtype=np.uint8, offset=off).copy()


def save_idx_images(pixels: np.ndarray, path):
    """Internal writer; round-trips through load_idx_images bit-exactly."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3:
        raise ContractError("expected (N, rows, cols) uint8 pixels")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *pixels.shape))
        fh.write(pixels.tobytes())


def save_idx_labels(labels: np.ndarray, path):
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ContractError("expected a flat label vector")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """Pair image and label files; pixels are scaled to [0, 1] and flattened."""
    imgs = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(imgs) != len(labels):
        raise IdxCountMismatchError(
            f"{len(imgs)} images vs {len(labels)} labels ({images_path}, {labels_path})"
        )
    x = imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64))


def load_mnist_dir(dirpath):
    """Standard train/test IDX file names under one directory."""
    d = Path(dirpath)
    train = load_idx_dataset(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte")
    test = load_idx_dataset(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte")
    return train, test


# ---------------------------------------------------------------------------
# FWMAP01 map files and PGM renders
# ---------------------------------------------------------------------------

_MAP_MAGIC = b"FWMAP01"


class MapFormatError(ValueError):
    pass


def save_map(emap: ExplanationMap, path, pgm: bool = True):
    """FWMAP01: magic, normalization tag, class, method string, shape, f32 payload.

    A companion 8-bit PGM (min-max scaled) lands next to the file for visual
    inspection; 1-d maps render as a single pixel row.
    """
    path = Path(path)
    norm_tag = 1 if emap.normalization == "abs-sum-one" else 0
    method_b = emap.method.encode("ascii")
    parts = [
        _MAP_MAGIC,
        struct.pack("<Bi", norm_tag, int(emap.k)),
        struct.pack("<B", len(method_b)), method_b,
        struct.pack("<B", len(emap.shape)),
        struct.pack(f"<{len(emap.shape)}I", *emap.shape),
        emap.values.astype("<f4").tobytes(),
    ]
    path.write_bytes(b"".join(parts))
    if pgm:
        grid = emap.grid()
        if grid.ndim == 1:
            grid = grid[None, :]
        write_pgm(grid, path.with_name(path.name + ".pgm"))


def load_map(path) -> ExplanationMap:
    data = Path(path).read_bytes()
    if data[:7] != _MAP_MAGIC:
        raise MapFormatError(f"{path}: bad magic")
    try:
        pos = 7
        norm_tag, k = struct.unpack_from("<Bi", data, pos)
        pos += 5
        (mlen,) = struct.unpack_from("<B", data, pos)
        pos += 1
        method = data[pos:pos + mlen].decode("ascii")
        pos += mlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
    except (struct.error, UnicodeDecodeError) as exc:
        raise MapFormatError(f"{path}: corrupt header ({exc})") from exc
    count = int(np.prod(shape)) if shape else 0
    payload = data[pos:]
    if len(payload) != 4 * count:
        raise MapFormatError(
            f"{path}: header promises {count} values, payload holds {len(payload) // 4}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    norm = "abs-sum-one" if norm_tag == 1 else "raw"
    if norm_tag == 1:
        # f32 storage perturbs the abs sum slightly; restore the invariant
        total = np.abs(values).sum()
        if total == 0.0:
            raise MapFormatError(f"{path}: normalized map with an all-zero payload")
        values = values / total
    return ExplanationMap(values, method, int(k), norm, tuple(int(s) for s in shape))


def write_pgm(grid: np.ndarray, path):
    """8-bit binary PGM (P5) with min-max scaling; constant images render as 0."""
    grid = as_array(grid)
    if grid.ndim != 2:
        raise ContractError("PGM render needs a 2-d array")
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo)
    bytes_ = np.round(scaled * 255.0).astype(np.uint8)
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_.tobytes())


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------


def _fmt_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    """Deterministic CSV: floats via repr (full precision), unix newlines."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt_cell(v) for v in row])
