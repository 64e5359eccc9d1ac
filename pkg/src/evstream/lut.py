"""Precomputed per-(x, y, polarity) feature tables.

The per-event feature network has a finite input space — W*H*2 discrete
patterns — so its outputs are computed once, after training, and served by
plain indexing at inference time.  Entries are stored as signed float32:
the magnitude is the absolute value and the sign encodes the phase
(0 for non-negative, pi for negative), matching how real-valued network
outputs enter the complex domain.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .coding import CodedVector
from .events import SensorGeometry
from .nn import MlpModel, encode_event_inputs, fold_block, forward_block, weights_checksum

_LUT_MAGIC = b"ELUT"
_LUT_HEADER = struct.Struct("<4sHHHBxII4x")  # magic, ver, W, H, kind, K, checksum
_LUT_VERSION = 1

KIND_CODED = 0   # mlp1+mlp2 output: K signed channel values, |v| < 1
KIND_LOCAL = 1   # mlp1 output: local feature for the event-wise head

# Largest float32 strictly below 1; table magnitudes are clamped here so the
# "< 1" invariant survives float32 rounding of saturated tanh outputs.
_MAG_CEIL = np.nextafter(np.float32(1.0), np.float32(0.0))


class LutBuildError(RuntimeError):
    """Raised when table construction produces invalid entries."""


@dataclass
class FeatureLut:
    """Contiguous table of W*H*2 feature rows.

    Row index is ``((p_index * H) + y) * W + x`` with ``p_index`` 0 for
    polarity -1 and 1 for polarity +1.  ``checksum`` ties the table to the
    weights it was built from.
    """

    geometry: SensorGeometry
    k: int
    table: np.ndarray
    checksum: int
    kind: int = KIND_CODED

    def __post_init__(self):
        cells = self.geometry.width * self.geometry.height * 2
        if self.table.shape != (cells, self.k) or self.table.dtype != np.float32:
            raise ValueError("table must be (W*H*2, K) float32")
        assert self.table.nbytes == cells * self.k * 4

    @property
    def n_cells(self) -> int:
        return self.table.shape[0]

    def indices(self, x, y, p) -> np.ndarray:
        """Vectorized row indices; raises on out-of-range coordinates."""
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        p = np.asarray(p, dtype=np.int64)
        w, h = self.geometry.width, self.geometry.height
        if np.any((x < 0) | (x >= w) | (y < 0) | (y >= h)):
            raise IndexError("event coordinates outside sensor geometry")
        if not np.all((p == 1) | (p == -1)):
            raise ValueError("polarity must be +1 or -1")
        p_idx = (p + 1) // 2
        return (p_idx * h + y) * w + x

    def row(self, x: int, y: int, p: int) -> np.ndarray:
        return self.table[int(self.indices(x, y, p))]


def _cell_inputs(geometry: SensorGeometry) -> np.ndarray:
    """Network inputs for every cell, in table index order (p, y, x)."""
    p_idx, y, x = np.indices((2, geometry.height, geometry.width))
    p = p_idx.ravel() * 2 - 1
    return encode_event_inputs(x.ravel(), y.ravel(), p, geometry)


def _cell_name(flat: int, geometry: SensorGeometry) -> str:
    w, h = geometry.width, geometry.height
    p_idx, rest = divmod(flat, h * w)
    y, x = divmod(rest, w)
    return f"(x={x}, y={y}, p={p_idx * 2 - 1})"


def build_lut(model: MlpModel, geometry: SensorGeometry) -> FeatureLut:
    """Evaluate mlp1+mlp2 (batch norm folded to affine) for every cell."""
    geometry.validate()
    if model.pointnet:
        raise ValueError("the pointnet variant has a time input and no finite table")
    inputs = _cell_inputs(geometry)
    m1 = fold_block(model.mlp1)
    m2 = fold_block(model.mlp2)
    local, _ = forward_block(m1, inputs, training=False)
    z, _ = forward_block(m2, local, training=False)
    bad = ~np.isfinite(z)
    if bad.any():
        flat = int(np.argwhere(bad.any(axis=1))[0][0])
        raise LutBuildError(f"non-finite feature at cell {_cell_name(flat, geometry)}")
    table = z.astype(np.float32)
    np.clip(table, -_MAG_CEIL, _MAG_CEIL, out=table)
    return FeatureLut(geometry, model.k, np.ascontiguousarray(table),
                      weights_checksum(model), KIND_CODED)


def build_local_lut(model: MlpModel, geometry: SensorGeometry) -> FeatureLut:
    """Evaluate mlp1 only; serves the event-wise head's local features."""
    geometry.validate()
    if model.pointnet:
        raise ValueError("the pointnet variant has a time input and no finite table")
    inputs = _cell_inputs(geometry)
    local, _ = forward_block(fold_block(model.mlp1), inputs, training=False)
    bad = ~np.isfinite(local)
    if bad.any():
        flat = int(np.argwhere(bad.any(axis=1))[0][0])
        raise LutBuildError(f"non-finite feature at cell {_cell_name(flat, geometry)}")
    table = np.ascontiguousarray(local.astype(np.float32))
    return FeatureLut(geometry, table.shape[1], table,
                      weights_checksum(model), KIND_LOCAL)


def lookup(lut: FeatureLut, x: int, y: int, p: int) -> CodedVector:
    """Constant-time coded feature for one event: indexing, no arithmetic."""
    if lut.kind != KIND_CODED:
        raise ValueError("lookup requires a coded-feature table")
    return CodedVector.from_real(lut.row(x, y, p).astype(np.float64))


def lookup_local(lut: FeatureLut, x: int, y: int, p: int) -> np.ndarray:
    if lut.kind != KIND_LOCAL:
        raise ValueError("lookup_local requires a local-feature table")
    return lut.row(x, y, p).astype(np.float64)


def save_lut(lut: FeatureLut, path) -> None:
    with open(path, "wb") as f:
        f.write(_LUT_HEADER.pack(_LUT_MAGIC, _LUT_VERSION, lut.geometry.width,
                                 lut.geometry.height, lut.kind, lut.k, lut.checksum))
        f.write(lut.table.astype("<f4").tobytes())


def load_lut(path) -> FeatureLut:
    with open(path, "rb") as f:
        head = f.read(_LUT_HEADER.size)
        if len(head) != _LUT_HEADER.size:
            raise ValueError("truncated table header")
        magic, version, w, h, kind, k, checksum = _LUT_HEADER.unpack(head)
        if magic != _LUT_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != _LUT_VERSION:
            raise ValueError(f"unsupported table version {version}")
        data = np.frombuffer(f.read(), dtype="<f4")
    cells = w * h * 2
    if data.size != cells * k:
        raise ValueError("table size does not match header")
    table = np.ascontiguousarray(data.reshape(cells, k).astype(np.float32))
    return FeatureLut(SensorGeometry(w, h).validate(), k, table, checksum, kind)
