"""Event records, sliding temporal windows, noise filters, and file formats.

Timestamps are integer microseconds throughout, so all elapsed-time
arithmetic is exact until the coding stage.  An event at exactly ``dt ==
tau`` has zero coded magnitude, so window eviction uses the strict rule
``anchor_t - t < tau``.
"""

from __future__ import annotations

import heapq
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import _kernels

# In-memory and on-disk record layout (13 bytes packed, little-endian).
# The binary file stores t as u64; in memory it is int64 so subtraction
# cannot wrap.
EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1")])

_BIN_MAGIC = b"EVNT"
_BIN_HEADER = struct.Struct("<4sHHH6x")  # magic, version, W, H, reserved
_BIN_VERSION = 1

CSV_HEADER = "t_us,x,y,p"


class OutOfOrderEventError(ValueError):
    """Raised when an event older than the current anchor is pushed."""


class Event(NamedTuple):
    """A single camera event."""

    x: int
    y: int
    p: int
    t: int


class SensorGeometry(NamedTuple):
    """Sensor pixel-array dimensions."""

    width: int
    height: int

    def validate(self) -> "SensorGeometry":
        if self.width < 1 or self.height < 1:
            raise ValueError(f"degenerate geometry {self}")
        return self

    def contains(self, x, y) -> bool:
        return bool(np.all((np.asarray(x) >= 0) & (np.asarray(x) < self.width)
                           & (np.asarray(y) >= 0) & (np.asarray(y) < self.height)))


def events_array(records) -> np.ndarray:
    """Build a structured event array from an iterable of (x, y, p, t)."""
    arr = np.empty(len(records), dtype=EVENT_DTYPE)
    for i, (x, y, p, t) in enumerate(records):
        arr[i] = (t, x, y, p)
    return arr


def validate_events(arr: np.ndarray, geometry: Optional[SensorGeometry] = None) -> None:
    if arr.dtype != EVENT_DTYPE:
        raise ValueError(f"expected {EVENT_DTYPE}, got {arr.dtype}")
    if arr.size and np.any(np.diff(arr["t"].astype(np.int64)) < 0):
        raise OutOfOrderEventError("event timestamps must be non-decreasing")
    if arr.size and not np.all(np.isin(arr["p"], (-1, 1))):
        raise ValueError("polarity must be +1 or -1")
    if geometry is not None and arr.size:
        if not geometry.contains(arr["x"], arr["y"]):
            raise ValueError("event coordinates outside sensor geometry")


class EventWindow:
    """Sliding window of the most recent ``tau_us`` microseconds of events.

    Mutable and confined to a single updating context; everything it hands
    out is a copy.
    """

    def __init__(self, tau_us: int, events: Optional[Sequence[Event]] = None,
                 anchor_t: Optional[int] = None):
        if tau_us <= 0:
            raise ValueError("tau_us must be positive")
        self.tau_us = int(tau_us)
        self._events: deque[Event] = deque()
        self.anchor_t = 0
        if events:
            for e in events:
                self.push(Event(*e))
        if anchor_t is not None:
            if self._events and anchor_t < self._events[-1].t:
                raise OutOfOrderEventError("anchor_t earlier than last event")
            self.anchor_t = int(anchor_t)
            self._evict()

    def __len__(self) -> int:
        return len(self._events)

    @property
    def n(self) -> int:
        return len(self._events)

    @property
    def events(self) -> tuple:
        return tuple(self._events)

    def push(self, e: Event) -> "EventWindow":
        if self._events and e.t < self.anchor_t:
            raise OutOfOrderEventError(
                f"event at t={e.t} precedes anchor_t={self.anchor_t}")
        self._events.append(Event(int(e.x), int(e.y), int(e.p), int(e.t)))
        self.anchor_t = int(e.t)
        self._evict()
        return self

    def _evict(self) -> None:
        cutoff = self.anchor_t - self.tau_us
        while self._events and self._events[0].t <= cutoff:
            self._events.popleft()

    def to_array(self) -> np.ndarray:
        arr = np.empty(len(self._events), dtype=EVENT_DTYPE)
        for i, e in enumerate(self._events):
            arr[i] = (e.t, e.x, e.y, e.p)
        return arr

    @staticmethod
    def from_array(arr: np.ndarray, tau_us: int, anchor_t: Optional[int] = None) -> "EventWindow":
        w = EventWindow(tau_us)
        for rec in arr:
            w.push(Event(int(rec["x"]), int(rec["y"]), int(rec["p"]), int(rec["t"])))
        if anchor_t is not None:
            if anchor_t < w.anchor_t:
                raise OutOfOrderEventError("anchor_t earlier than last event")
            w.anchor_t = int(anchor_t)
            w._evict()
        return w


def push(window: EventWindow, e: Event) -> EventWindow:
    """Append an event and evict everything with ``e.t - t >= tau``."""
    return window.push(e)


def nn_filter(stream: np.ndarray, geometry: SensorGeometry, t_nn_us: int) -> np.ndarray:
    """Keep events with a strictly earlier event in their 3x3 pixel
    neighborhood within the preceding ``t_nn_us`` microseconds.

    First events with no prior neighbor are dropped.  Output is a
    subsequence of the (time-ordered) input.
    """
    validate_events(stream, geometry)
    if stream.size == 0:
        return stream.copy()
    keep = _kernels.neighbor_filter_mask(
        stream["x"].astype(np.int64), stream["y"].astype(np.int64),
        stream["t"].astype(np.int64),
        geometry.width, geometry.height, np.int64(t_nn_us))
    return stream[keep]


def refractory_filter(stream: np.ndarray, t_ref_us: int,
                      geometry: Optional[SensorGeometry] = None) -> np.ndarray:
    """Per pixel, drop events within ``t_ref_us`` of the previous kept event."""
    validate_events(stream, geometry)
    if stream.size == 0:
        return stream.copy()
    if geometry is None:
        geometry = SensorGeometry(int(stream["x"].max()) + 1, int(stream["y"].max()) + 1)
    keep = _kernels.refractory_filter_mask(
        stream["x"].astype(np.int64), stream["y"].astype(np.int64),
        stream["t"].astype(np.int64),
        geometry.width, geometry.height, np.int64(t_ref_us))
    return stream[keep]


@dataclass
class ComposedWindow:
    """A training window plus its provenance in the source stream."""

    window: EventWindow
    anchor_index: int
    source_indices: np.ndarray
    crop_origin: Optional[tuple] = None


def compose_training_window(
    full_stream: np.ndarray,
    tau_us: int,
    crop: Optional[tuple] = None,
    rng_seed=None,
    geometry: Optional[SensorGeometry] = None,
    max_retries: int = 16,
    return_info: bool = False,
):
    """Cut a random training window out of a full recording.

    The anchor event is chosen uniformly at random; the window keeps all
    events in ``(t_anchor - tau, t_anchor]`` that arrived at or before the
    anchor.  ``crop``, when given as ``(cw, ch)``, places a random crop
    rectangle (requires ``geometry``) and re-bases kept coordinates to its
    origin; a 4-tuple ``(x0, y0, cw, ch)`` pins the rectangle.  Anchors whose
    cropped window comes out empty are resampled up to ``max_retries`` times.
    """
    validate_events(full_stream)
    if full_stream.size == 0:
        raise ValueError("cannot compose a window from an empty stream")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    ts = full_stream["t"].astype(np.int64)

    for _ in range(max_retries):
        anchor_idx = int(rng.integers(0, len(full_stream)))
        anchor_t = int(ts[anchor_idx])
        left = int(np.searchsorted(ts, anchor_t - tau_us, side="right"))
        idx = np.arange(left, anchor_idx + 1)
        sl = full_stream[left:anchor_idx + 1]
        origin = None
        if crop is not None:
            if len(crop) == 4:
                x0, y0, cw, ch = (int(v) for v in crop)
            else:
                cw, ch = (int(v) for v in crop)
                if geometry is None:
                    raise ValueError("random crop placement requires geometry")
                if cw > geometry.width or ch > geometry.height:
                    raise ValueError("crop larger than sensor")
                x0 = int(rng.integers(0, geometry.width - cw + 1))
                y0 = int(rng.integers(0, geometry.height - ch + 1))
            origin = (x0, y0)
            m = ((sl["x"] >= x0) & (sl["x"] < x0 + cw)
                 & (sl["y"] >= y0) & (sl["y"] < y0 + ch))
            sl = sl[m]
            idx = idx[m]
            if sl.size == 0:
                continue
            sl = sl.copy()
            sl["x"] -= x0
            sl["y"] -= y0
        window = EventWindow.from_array(sl, tau_us, anchor_t=anchor_t)
        if return_info:
            return ComposedWindow(window, anchor_idx, idx, origin)
        return window
    raise ValueError(f"no non-empty window found in {max_retries} attempts")


class ReorderBuffer:
    """Small look-ahead buffer that re-sorts jittery input by timestamp.

    Holds up to ``depth`` events; pushing beyond that releases the earliest
    buffered event.  Events can be reordered only within the buffer depth.
    """

    def __init__(self, depth: int):
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self._heap: list = []
        self._seq = 0

    def push(self, e: Event) -> list:
        heapq.heappush(self._heap, (e.t, self._seq, e))
        self._seq += 1
        out = []
        while len(self._heap) > self.depth:
            out.append(heapq.heappop(self._heap)[2])
        return out

    def flush(self) -> list:
        out = [heapq.heappop(self._heap)[2] for _ in range(len(self._heap))]
        return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_events_csv(path, events: np.ndarray) -> None:
    """Text format: header line ``t_us,x,y,p`` then one event per row."""
    validate_events(events)
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for rec in events:
            f.write(f"{rec['t']},{rec['x']},{rec['y']},{rec['p']}\n")


def read_events_csv(path) -> np.ndarray:
    with open(path) as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"bad CSV header {header!r}, expected {CSV_HEADER!r}")
        body = f.read().strip()
    raw = (np.loadtxt(body.splitlines(), delimiter=",", dtype=np.int64, ndmin=2)
           if body else np.empty((0, 4), dtype=np.int64))
    arr = np.empty(raw.shape[0] if raw.size else 0, dtype=EVENT_DTYPE)
    if raw.size:
        arr["t"] = raw[:, 0]
        arr["x"] = raw[:, 1]
        arr["y"] = raw[:, 2]
        arr["p"] = raw[:, 3]
    validate_events(arr)
    return arr


def write_events_binary(path, events: np.ndarray, geometry: SensorGeometry) -> None:
    """Binary format: 16-byte header (``EVNT``, version, W, H) then packed
    little-endian records (u64 t_us, u16 x, u16 y, i8 p)."""
    validate_events(events, geometry)
    with open(path, "wb") as f:
        f.write(_BIN_HEADER.pack(_BIN_MAGIC, _BIN_VERSION, geometry.width, geometry.height))
        events.astype(EVENT_DTYPE).tofile(f)


def read_events_binary(path):
    """Returns ``(events, geometry)``."""
    with open(path, "rb") as f:
        header = f.read(_BIN_HEADER.size)
        if len(header) != _BIN_HEADER.size:
            raise ValueError("truncated event file header")
        magic, version, width, height = _BIN_HEADER.unpack(header)
        if magic != _BIN_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != _BIN_VERSION:
            raise ValueError(f"unsupported event file version {version}")
        arr = np.fromfile(f, dtype=EVENT_DTYPE)
    geometry = SensorGeometry(width, height).validate()
    validate_events(arr, geometry)
    return arr, geometry
