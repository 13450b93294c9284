"""Raster and tabular dataset I/O, normalization, subsampling and synthetic scenes.

Cube file layout (little-endian)::

    offset  size  field
    0       4     magic b"HCUB"
    4       4     format version (uint32, currently 1)
    8       4     height H (uint32)
    12      4     width W (uint32)
    16      4     bands B (uint32)
    20      4*H*W*B  float32 samples, band-sequential (band, row, column)

An optional sidecar ``<cube>.names`` holds one class name per line.
Label rasters are binary PGM (P5, 8 or 16 bit) or CSV (H lines of W
integers); 0 marks unlabeled pixels.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from .errors import DataError

CUBE_MAGIC = b"HCUB"
CUBE_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
STD_FLOOR = 1e-12


# cube ----------------------------------------------------------------------

def write_cube(path, cube, class_names=None):
    """Write an (H, W, B) array in the cube format (values stored as float32)."""
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError("cube must be (H, W, B)")
    H, W, B = cube.shape
    data = np.ascontiguousarray(np.transpose(cube, (2, 0, 1)), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, H, W, B))
        fh.write(data.tobytes())
    if class_names is not None:
        Path(str(path) + ".names").write_text("".join(f"{n}\n" for n in class_names))


def read_cube(path):
    """Read a cube file into an (H, W, B) float32 array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, H, W, B = _HEADER.unpack_from(raw)
    if magic != CUBE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at offset 0")
    if version != CUBE_VERSION:
        raise DataError(f"{path}: unsupported version {version} at offset 4")
    if min(H, W, B) < 1:
        raise DataError(f"{path}: empty dimensions {H}x{W}x{B} at offset 8")
    expected = _HEADER.size + 4 * H * W * B
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(B, H, W)
    cube = np.transpose(data, (1, 2, 0)).astype(np.float32)
    bad = ~np.isfinite(cube)
    if bad.any():
        r, c, b = np.argwhere(bad)[0]
        off = _HEADER.size + 4 * ((b * H + r) * W + c)
        raise DataError(f"{path}: non-finite value at row {r}, column {c}, band {b} (offset {off})")
    return cube


def read_class_names(path):
    side = Path(str(path) + ".names")
    if not side.exists():
        return None
    return [ln.strip() for ln in side.read_text().splitlines() if ln.strip()]


# label rasters -------------------------------------------------------------

def write_labels(path, labels):
    """Write an integer label raster; ``.csv`` suffix selects CSV, else PGM."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label raster must be 2-D")
    if labels.min() < 0 or labels.max() > 65535:
        raise ValueError("labels must lie in 0..65535")
    if str(path).endswith(".csv"):
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(labels.astype(int).tolist())
        return
    H, W = labels.shape
    maxval = 255 if labels.max() < 256 else 65535
    dtype = np.uint8 if maxval == 255 else ">u2"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(labels.astype(dtype).tobytes())


def _pgm_tokens(raw, path):
    pos, tokens = 0, []
    while len(tokens) < 4:
        while pos < len(raw) and chr(raw[pos]).isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not chr(raw[pos]).isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header at offset {pos}")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_labels(path):
    """Read a PGM (P5) or CSV label raster into an (H, W) int array."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    if raw[:2] == b"P5":
        tokens, off = _pgm_tokens(raw, path)
        try:
            W, H, maxval = (int(t) for t in tokens[1:4])
        except ValueError:
            raise DataError(f"{path}: malformed PGM header") from None
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        n = H * W * np.dtype(dtype).itemsize
        if len(raw) - off < n:
            raise DataError(f"{path}: expected {n} data bytes at offset {off}, found {len(raw) - off}")
        return np.frombuffer(raw, dtype=dtype, count=H * W, offset=off).reshape(H, W).astype(int)
    rows = []
    for i, line in enumerate(raw.decode("ascii", errors="replace").splitlines()):
        if not line.strip():
            continue
        try:
            rows.append([int(v) for v in line.split(",")])
        except ValueError:
            raise DataError(f"{path}: non-integer label on line {i + 1}") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: ragged or empty label CSV")
    labels = np.array(rows, dtype=int)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label")
    return labels


def load(cube_path, labels_path):
    """Load a cube and its label raster, checking that they line up."""
    cube = read_cube(cube_path)
    labels = read_labels(labels_path)
    if labels.shape != cube.shape[:2]:
        raise DataError(f"{labels_path}: label raster {labels.shape} does not match "
                        f"cube {cube.shape[:2]} in {cube_path}")
    return cube, labels


# tabular -------------------------------------------------------------------

def write_dataset_csv(path, X, y):
    X = np.asarray(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"band_{b + 1}" for b in range(X.shape[1])])
        for label, row in zip(np.asarray(y).astype(int), X):
            w.writerow([int(label)] + [repr(float(v)) for v in row])


def read_dataset_csv(path):
    """Read ``label, band_1..band_B`` rows. Returns raw features and labels."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise DataError(f"{path}: header must start with 'label'")
        X, y = [], []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: line {i} has {len(row)} fields, expected {len(header)}")
            try:
                y.append(int(row[0]))
                X.append([float(v) for v in row[1:]])
            except ValueError:
                raise DataError(f"{path}: unparsable value on line {i}") from None
    X = np.array(X, dtype=float).reshape(len(y), len(header) - 1)
    if not np.all(np.isfinite(X)):
        line = int(np.argwhere(~np.isfinite(X))[0][0]) + 2
        raise DataError(f"{path}: non-finite value on line {line}")
    return X, np.array(y, dtype=int)


# datasets ------------------------------------------------------------------

@dataclass
class LabeledDataset:
    """Normalized training features with labels 1..K and the stats used."""

    X: np.ndarray
    y: np.ndarray
    class_names: list
    mean: np.ndarray
    std: np.ndarray
    pixels: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.pixels is None:
            self.pixels = np.full(len(self.y), -1, dtype=int)

    @property
    def n_classes(self):
        return len(self.class_names)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(self.X[idx], self.y[idx], list(self.class_names),
                              self.mean, self.std, self.pixels[idx])

    def transform(self, X):
        return normalize(X, self.mean, self.std)


def feature_stats(X):
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), STD_FLOOR)
    return mean, std


def normalize(X, mean, std):
    return (np.asarray(X, dtype=float) - mean) / std


def denormalize(Z, mean, std):
    return np.asarray(Z, dtype=float) * std + mean


def from_table(X, y, class_names=None, normalization=True):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if y.size == 0:
        raise DataError("no labeled samples")
    K = int(y.max()) if class_names is None else len(class_names)
    class_names = class_names or [str(k) for k in range(1, K + 1)]
    if normalization:
        mean, std = feature_stats(X)
    else:
        mean, std = np.zeros(X.shape[1]), np.ones(X.shape[1])
    return LabeledDataset(normalize(X, mean, std), y, class_names, mean, std)


def extract_training(cube, labels, normalization=True, class_names=None):
    """Labeled pixels (row-major order) as a dataset, z-scored with their own stats."""
    cube = np.asarray(cube)
    labels = np.asarray(labels)
    if labels.shape != cube.shape[:2]:
        raise DataError("label raster does not match cube")
    flat = labels.ravel()
    pixels = np.flatnonzero(flat > 0)
    X = cube.reshape(-1, cube.shape[2])[pixels].astype(float)
    ds = from_table(X, flat[pixels], class_names, normalization)
    ds.pixels = pixels
    return ds


def stratified_subsample(ds: LabeledDataset, fraction, min_per_class=10, seed=0):
    """Per class keep ceil(fraction * n_k), but at least min(min_per_class, n_k).

    Selection is seeded and without replacement; original order is preserved.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    chosen = []
    for k in range(1, ds.n_classes + 1):
        members = np.flatnonzero(ds.y == k)
        n_k = members.size
        if n_k == 0:
            continue
        m = max(math.ceil(fraction * n_k - 1e-9), min(min_per_class, n_k))
        m = min(m, n_k)
        chosen.append(members if m == n_k else rng.choice(members, size=m, replace=False))
    idx = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=int)
    return ds.subset(idx)


# synthetic scenes ----------------------------------------------------------

@dataclass
class SyntheticScene:
    cube: np.ndarray
    labels: np.ndarray
    truth: np.ndarray
    means: np.ndarray
    separation: float
    noise: float
    seed: int

    @property
    def bayes_oa_two_class(self):
        """Bayes-optimal accuracy for two equiprobable isotropic classes."""
        d = np.linalg.norm(self.means[0] - self.means[1]) / self.noise
        return float(norm.cdf(d / 2.0))

    def manifest(self):
        K, B = self.means.shape
        out = {"classes": K, "bands": B, "height": self.truth.shape[0],
               "width": self.truth.shape[1], "separation": self.separation,
               "noise": self.noise, "seed": self.seed,
               "training_pixels": int(np.count_nonzero(self.labels))}
        if K == 2:
            out["bayes_oa"] = self.bayes_oa_two_class
        return out


def class_means(n_classes, bands, separation, rng):
    """Simplex of class means with pairwise distance ``separation``, randomly rotated."""
    if n_classes > bands + 1:
        raise ValueError("need bands >= n_classes - 1 for equidistant means")
    E = np.eye(max(n_classes, bands))[:n_classes, :bands] if n_classes <= bands else None
    if E is None:
        # K = B + 1: regular simplex in B dimensions
        E = np.vstack([np.eye(bands), np.full(bands, (1 - math.sqrt(bands + 1)) / bands)])
    E = E - E.mean(axis=0)
    E *= separation / np.linalg.norm(E[0] - E[1])
    Q, _ = np.linalg.qr(rng.normal(size=(bands, bands)))
    return E @ Q


def voronoi_blobs(height, width, n_classes, rng, max_tries=100):
    """Partition the lattice into ``n_classes`` 4-connected regions."""
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(max_tries):
        seeds = np.column_stack([rng.uniform(0, height, n_classes), rng.uniform(0, width, n_classes)])
        d = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
        truth = np.argmin(d, axis=2) + 1
        ok = True
        for k in range(1, n_classes + 1):
            _, n = ndimage.label(truth == k)
            ok &= n == 1
        if ok:
            return truth
    raise RuntimeError("could not draw connected class regions")


def synthesize(n_classes=3, height=64, width=64, bands=5, separation=2.5, noise=1.0,
               samples_per_class=10, means=None, truth=None, seed=0):
    """Seeded synthetic scene: Gaussian class clusters laid out as spatial blobs.

    Every pixel's features are drawn from its class Gaussian (isotropic,
    standard deviation ``noise``). ``labels`` marks ``samples_per_class``
    randomly chosen pixels per class as training samples; ``truth`` is the
    full reference map.
    """
    rng = np.random.default_rng(seed)
    if truth is None:
        truth = voronoi_blobs(height, width, n_classes, rng)
    truth = np.asarray(truth, dtype=int)
    height, width = truth.shape
    if means is None:
        means = class_means(n_classes, bands, separation, rng)
    means = np.asarray(means, dtype=float)
    bands = means.shape[1]
    cube = means[truth - 1] + noise * rng.normal(size=(height, width, bands))
    labels = np.zeros_like(truth)
    flat_t, flat_l = truth.ravel(), labels.ravel()
    for k in range(1, n_classes + 1):
        members = np.flatnonzero(flat_t == k)
        pick = rng.choice(members, size=min(samples_per_class, members.size), replace=False)
        flat_l[pick] = k
    return SyntheticScene(cube.astype(np.float32), labels, truth, means, separation, noise, seed)


def sample_gaussian_classes(n_per_class, means, noise=1.0, seed=0):
    """Feature table drawn from the class Gaussians of a scene (no lattice)."""
    rng = np.random.default_rng(seed)
    means = np.asarray(means, dtype=float)
    y = np.repeat(np.arange(1, means.shape[0] + 1), n_per_class)
    X = means[y - 1] + noise * rng.normal(size=(y.size, means.shape[1]))
    return X, y
