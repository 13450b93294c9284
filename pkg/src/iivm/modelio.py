"""Binary model file.

Layout (little-endian)::

    offset  size   field
    0       4      magic b"IIVM"
    4       4      format version (uint32, currently 1)
    8       4      K   number of classes (uint32)
    12      4      M   number of features (uint32)
    16      4      V   number of import vectors (uint32)
    20      4      C   coefficient columns (uint32; 1 = binary sigmoid, else K)
    24      4      has_norm flag (uint32; 1 = mean/std blocks present)
    28      4      n_train (uint32)
    32      8      gamma (float64)
    40      8      lambda (float64)
    48      ...    K class names, each uint32 byte length + UTF-8 bytes
    ...     8*V*M  import vectors, float64 row-major
    ...     8*V*C  coefficients, float64 column-major
    ...     8*M    feature mean (only if has_norm)
    ...     8*M    feature std  (only if has_norm)

Everything is stored at full float64 precision, so a round trip is lossless.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .ivm import IvmModel
from .kernel import KernelParams

MAGIC = b"IIVM"
VERSION = 1
_HEAD = struct.Struct("<4sIIIIIIIdd")


def dumps(model: IvmModel) -> bytes:
    V, M = model.X_V.shape
    C = model.alpha.shape[1]
    has_norm = model.mean is not None and model.std is not None
    parts = [_HEAD.pack(MAGIC, VERSION, model.n_classes, M, V, C, int(has_norm), int(model.n_train),
                        float(model.params.gamma), float(model.lam))]
    for name in model.class_names:
        b = name.encode("utf-8")
        parts += [struct.pack("<I", len(b)), b]
    parts.append(np.ascontiguousarray(model.X_V, dtype="<f8").tobytes())
    parts.append(np.asfortranarray(model.alpha, dtype="<f8").tobytes(order="F"))
    if has_norm:
        parts.append(np.asarray(model.mean, dtype="<f8").tobytes())
        parts.append(np.asarray(model.std, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(raw: bytes, source="<bytes>") -> IvmModel:
    if len(raw) < _HEAD.size:
        raise DataError(f"{source}: truncated model header")
    magic, version, K, M, V, C, has_norm, n_train, gamma, lam = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{source}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise DataError(f"{source}: unsupported model version {version} at offset 4")
    if C not in (1, K) or K < 2:
        raise DataError(f"{source}: inconsistent class/coefficient counts K={K}, C={C}")
    off = _HEAD.size
    names = []
    for _ in range(K):
        if off + 4 > len(raw):
            raise DataError(f"{source}: truncated class names at offset {off}")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        names.append(raw[off:off + n].decode("utf-8"))
        off += n
    need = 8 * (V * M + V * C + (2 * M if has_norm else 0))
    if len(raw) - off != need:
        raise DataError(f"{source}: expected {need} payload bytes at offset {off}, found {len(raw) - off}")

    def take(count, shape, order="C"):
        nonlocal off
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape, order=order)
        off += 8 * count
        return a.astype(float)

    X_V = take(V * M, (V, M))
    alpha = take(V * C, (V, C), order="F")
    mean = std = None
    if has_norm:
        mean, std = take(M, (M,)), take(M, (M,))
    try:
        params = KernelParams(gamma)
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from None
    return IvmModel(X_V, np.ascontiguousarray(alpha), params, lam, names, mean=mean, std=std,
                    n_train=n_train)


def save(path, model: IvmModel):
    Path(path).write_bytes(dumps(model))


def load(path) -> IvmModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    return loads(raw, str(path))
