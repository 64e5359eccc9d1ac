"""The two asynchronous runtime halves: event-driven state update and
on-demand head inference.

The event-driven side keeps, per channel, the raw winning feature value and
the timestamp it was written; decay and rotation are therefore evaluated
lazily from exact integer elapsed times, which keeps the recursion
bit-identical to the batch reference and makes the per-event cost O(K) with
no trigonometry.  The on-demand side decodes a snapshot at the query time
and runs the lightweight heads.

Snapshots are consistent: acquisition copies O(K) state under the same lock
as event application, so a snapshot always reflects a whole prefix of the
stream.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels, coding
from .coding import CodedVector, to_real_pairs
from .events import EVENT_DTYPE, Event, OutOfOrderEventError, SensorGeometry
from .lut import KIND_CODED, KIND_LOCAL, FeatureLut
from .nn import MlpModel, fold_block, forward_block
from .oracle import RECURSIVE_MODES, AblationMode

_MODE_ALIASES = {"no_rotation": AblationMode.NO_TR, "no-rotation": AblationMode.NO_TR}


def _canonical_mode(mode) -> AblationMode:
    mode = _MODE_ALIASES.get(mode, mode)
    mode = AblationMode(mode)
    if mode not in RECURSIVE_MODES:
        raise ValueError(
            f"mode {mode.value!r} breaks the recursion and runs only on the "
            f"batch path; the engine accepts {[m.value for m in RECURSIVE_MODES]}")
    return mode


@dataclass
class EngineConfig:
    """Runtime wiring for one stream."""

    lut: FeatureLut
    tau_us: int
    mode: str = AblationMode.FULL
    dtype: type = np.float32
    reorder_depth: int = 0

    def __post_init__(self):
        if self.lut.kind != KIND_CODED:
            raise ValueError("engine requires a coded-feature table")
        if self.tau_us <= 0:
            raise ValueError("tau_us must be positive")
        self.mode = _canonical_mode(self.mode)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class GlobalFeature:
    """Snapshot of the recursive state: per-channel raw winner values,
    winner timestamps, and the stream position it reflects."""

    values: np.ndarray     # (K,) signed raw winner values (undecayed)
    winner_t: np.ndarray   # (K,) int64 winner write timestamps
    last_t: int
    tau_us: int
    mode: AblationMode = AblationMode.FULL

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def decode(self, at_t: Optional[int] = None) -> CodedVector:
        """Channel values aged to ``at_t`` (default: the snapshot time)."""
        at_t = self.last_t if at_t is None else int(at_t)
        if at_t < self.last_t:
            raise ValueError(f"cannot decode at t={at_t} before last_t={self.last_t}")
        mag0 = np.abs(self.values.astype(np.float64))
        phase0 = np.where(self.values < 0, np.pi, 0.0)
        dt = at_t - self.winner_t
        mag, phase = coding.decay_channels(mag0, phase0, dt, self.tau_us,
                                           rotate=self.mode == AblationMode.FULL)
        return CodedVector(mag, phase)

    @property
    def channels(self) -> CodedVector:
        return self.decode()


class Engine:
    """Single-stream event-driven updater.

    Exactly one writer should feed events; snapshots may be taken from any
    thread and never observe a partially applied batch.
    """

    def __init__(self, config: EngineConfig):
        self.config = config
        self.lut = config.lut
        self.tau_us = int(config.tau_us)
        self._inv_tau64 = float(coding.inverse_tau(self.tau_us, np.float64))
        self._v = np.zeros(self.lut.k, dtype=config.dtype)
        self._w = np.zeros(self.lut.k, dtype=np.int64)
        self._last_t = 0
        self._lock = threading.Lock()
        self._reorder = None
        if config.reorder_depth:
            from .events import ReorderBuffer
            self._reorder = ReorderBuffer(config.reorder_depth)

    @property
    def k(self) -> int:
        return self.lut.k

    @property
    def geometry(self) -> SensorGeometry:
        return self.lut.geometry

    @property
    def last_t(self) -> int:
        return self._last_t

    def reset(self) -> None:
        with self._lock:
            self._v[:] = 0
            self._w[:] = 0
            self._last_t = 0

    def on_event(self, e) -> None:
        """Apply a single event (optionally via the reorder buffer)."""
        e = Event(*e) if not isinstance(e, Event) else e
        if self._reorder is not None:
            for released in self._reorder.push(e):
                self._apply(np.array([(released.t, released.x, released.y, released.p)],
                                     dtype=EVENT_DTYPE))
            return
        self._apply(np.array([(e.t, e.x, e.y, e.p)], dtype=EVENT_DTYPE))

    def flush_reorder(self) -> None:
        if self._reorder is None:
            return
        for released in self._reorder.flush():
            self._apply(np.array([(released.t, released.x, released.y, released.p)],
                                 dtype=EVENT_DTYPE))

    def push(self, events: np.ndarray) -> None:
        """Apply a time-ordered chunk of events in one kernel call."""
        if events.dtype != EVENT_DTYPE:
            raise ValueError(f"expected {EVENT_DTYPE} array")
        if events.size == 0:
            return
        self._apply(events)

    def _apply(self, events: np.ndarray) -> None:
        ts = events["t"].astype(np.int64)
        if ts[0] < self._last_t or np.any(np.diff(ts) < 0):
            raise OutOfOrderEventError(
                f"events must arrive with non-decreasing timestamps "
                f"(last_t={self._last_t})")
        cells = self.lut.indices(events["x"], events["y"], events["p"])
        with self._lock:
            _kernels.push_events(self._v, self._w, cells, ts, self.lut.table,
                                 np.int64(self.tau_us), self._inv_tau64)
            self._last_t = int(ts[-1])

    def snapshot(self) -> GlobalFeature:
        with self._lock:
            return GlobalFeature(self._v.copy(), self._w.copy(), self._last_t,
                                 self.tau_us, self.config.mode)


class OnDemandHeads:
    """Query-time inference over snapshots: the other half of the runtime.

    Holds the head blocks with batch norm folded to affine maps, plus the
    local-feature table for event-wise queries.
    """

    def __init__(self, mlp3, mlp4, k: int, local_dim: int,
                 local_lut: Optional[FeatureLut] = None):
        self.mlp3 = mlp3
        self.mlp4 = mlp4
        self.k = k
        self.local_dim = local_dim
        self.local_lut = local_lut
        if local_lut is not None and local_lut.kind != KIND_LOCAL:
            raise ValueError("event-wise inference requires a local-feature table")

    @staticmethod
    def from_model(model: MlpModel, local_lut: Optional[FeatureLut] = None) -> "OnDemandHeads":
        if model.pointnet:
            raise ValueError("pointnet variant is batch-only")
        return OnDemandHeads(fold_block(model.mlp3), fold_block(model.mlp4),
                             model.k, model.local_dim, local_lut)

    def infer_global(self, snapshot: GlobalFeature, query_t: Optional[int] = None) -> np.ndarray:
        """Age the snapshot to the query time and run the global head."""
        query_t = snapshot.last_t if query_t is None else int(query_t)
        vec = snapshot.decode(query_t)
        x = to_real_pairs(vec)[None, :]
        out, _ = forward_block(self.mlp3, x, training=False)
        return out[0]

    def infer_eventwise(self, snapshot: GlobalFeature, events: np.ndarray,
                        query_t: Optional[int] = None) -> np.ndarray:
        """Per-event class scores from [local feature ‖ global feature]."""
        if self.local_lut is None:
            raise ValueError("no local-feature table configured")
        query_t = snapshot.last_t if query_t is None else int(query_t)
        g = to_real_pairs(snapshot.decode(query_t))
        idx = self.local_lut.indices(events["x"], events["y"], events["p"])
        local = self.local_lut.table[idx].astype(np.float64)
        x = np.concatenate([local, np.broadcast_to(g, (len(events), g.shape[0]))], axis=1)
        out, _ = forward_block(self.mlp4, x, training=False)
        return out


def infer_global(heads: OnDemandHeads, snapshot: GlobalFeature,
                 query_t: Optional[int] = None) -> np.ndarray:
    return heads.infer_global(snapshot, query_t)


def infer_eventwise(heads: OnDemandHeads, snapshot: GlobalFeature,
                    events: np.ndarray, query_t: Optional[int] = None) -> np.ndarray:
    return heads.infer_eventwise(snapshot, events, query_t)
