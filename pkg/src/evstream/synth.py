"""Synthetic labeled event streams from moving polygon shapes.

The generation model is deliberately simple and non-physical: scenes are
stepped on a fixed clock; a pixel whose shape-coverage changed during a step
emits one event with a configurable probability (Bernoulli thinning), with
polarity +1 where a shape entered the pixel and -1 where it left.  Event
times are spread uniformly within the step, optionally jittered, and
re-sorted.  Background noise is a uniform Poisson process with random
polarity and class 0.

Shapes bounce off the sensor borders; the ground-truth motion timeline
records the target shape's velocity per step, so regression targets are
exact by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .events import EVENT_DTYPE, SensorGeometry


@dataclass
class ShapeSpec:
    """One moving polygon."""

    vertices: np.ndarray      # (V, 2) float, initial position in pixels
    velocity: tuple           # (vx, vy) px/s
    class_id: int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[0] < 3 or self.vertices.shape[1] != 2:
            raise ValueError("polygon needs at least 3 (x, y) vertices")
        if not np.all(np.isfinite(self.vertices)) or not np.all(np.isfinite(self.velocity)):
            raise ValueError("non-finite shape parameters")
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        area2 = np.abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        if area2 <= 0:
            raise ValueError("degenerate polygon (zero area)")


@dataclass
class SceneConfig:
    geometry: SensorGeometry
    shapes: Sequence[ShapeSpec]
    duration_s: float
    edge_event_prob: float = 0.9      # per pixel-coverage change
    noise_rate_hz_per_px: float = 0.05
    jitter_sigma_us: float = 0.0
    time_step_us: int = 1000
    target_class_id: int = 1          # shape whose motion is the regression target
    bounce: bool = True
    seed: int = 0

    def __post_init__(self):
        self.geometry = SensorGeometry(*self.geometry).validate()
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        for s in self.shapes:
            if not isinstance(s, ShapeSpec):
                raise ValueError("shapes must be ShapeSpec instances")


@dataclass
class LabeledStream:
    """Events plus per-event class labels and the target motion timeline."""

    events: np.ndarray         # structured EVENT_DTYPE, time-ordered
    labels: np.ndarray         # (n,) int class per event
    geometry: SensorGeometry
    motion_t: np.ndarray       # (M,) step start times, us
    motion_uv: np.ndarray      # (M, 2) target velocity px/s during each step
    duration_us: int

    def motion_at(self, t_us: int) -> np.ndarray:
        """Target-shape velocity (px/s) in effect at time ``t_us``."""
        i = int(np.searchsorted(self.motion_t, t_us, side="right")) - 1
        return self.motion_uv[min(max(i, 0), len(self.motion_uv) - 1)]


def _points_in_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd rule, vectorized over points."""
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = verts[-1]
    for x1, y1 in verts:
        crosses = (y0 > py) != (y1 > py)
        denom = y1 - y0
        denom = denom if denom != 0 else 1.0
        x_at = x0 + (py - y0) * (x1 - x0) / denom
        inside ^= crosses & (px < x_at)
        x0, y0 = x1, y1
    return inside


def generate(config: SceneConfig) -> LabeledStream:
    """Render the scene into a labeled event stream."""
    rng = np.random.default_rng(config.seed)
    geometry = config.geometry
    w, h = geometry.width, geometry.height
    step = int(config.time_step_us)
    duration_us = int(round(config.duration_s * 1e6))
    n_steps = max(1, duration_us // step)

    gx, gy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    gx = gx.ravel()
    gy = gy.ravel()

    all_x, all_y, all_p, all_t, all_c = [], [], [], [], []
    motion_t = np.arange(n_steps, dtype=np.int64) * step
    motion_uv = np.zeros((n_steps, 2), dtype=np.float64)
    target_seen = False

    for shape in config.shapes:
        offset = np.zeros(2)
        vel = np.array(shape.velocity, dtype=np.float64)
        vmin = shape.vertices.min(axis=0)
        vmax = shape.vertices.max(axis=0)
        is_target = shape.class_id == config.target_class_id
        if is_target:
            target_seen = True
        prev = _points_in_polygon(gx, gy, shape.vertices)
        for s in range(n_steps):
            if is_target:
                motion_uv[s] = vel
            offset = offset + vel * (step / 1e6)
            if config.bounce:
                for axis in range(2):
                    lo = vmin[axis] + offset[axis]
                    hi = vmax[axis] + offset[axis]
                    bound = w if axis == 0 else h
                    if (lo < 0 and vel[axis] < 0) or (hi > bound and vel[axis] > 0):
                        vel[axis] = -vel[axis]
            occ = _points_in_polygon(gx, gy, shape.vertices + offset)
            changed = occ != prev
            if changed.any():
                idx = np.nonzero(changed)[0]
                emit = rng.random(idx.size) < config.edge_event_prob
                idx = idx[emit]
                if idx.size:
                    all_x.append((gx[idx] - 0.5).astype(np.int64))
                    all_y.append((gy[idx] - 0.5).astype(np.int64))
                    all_p.append(np.where(occ[idx], 1, -1).astype(np.int64))
                    all_t.append(s * step + rng.uniform(0, step, idx.size))
                    all_c.append(np.full(idx.size, shape.class_id, dtype=np.int64))
            prev = occ

    if config.shapes and not target_seen:
        raise ValueError(f"no shape carries target_class_id={config.target_class_id}")

    n_noise = rng.poisson(config.noise_rate_hz_per_px * w * h * config.duration_s)
    if n_noise:
        all_x.append(rng.integers(0, w, n_noise))
        all_y.append(rng.integers(0, h, n_noise))
        all_p.append(rng.choice(np.array([-1, 1]), n_noise))
        all_t.append(rng.uniform(0, duration_us, n_noise))
        all_c.append(np.zeros(n_noise, dtype=np.int64))

    if not all_x:
        return LabeledStream(np.empty(0, dtype=EVENT_DTYPE),
                             np.empty(0, dtype=np.int64), geometry,
                             motion_t, motion_uv, duration_us)

    xs = np.concatenate(all_x)
    ys = np.concatenate(all_y)
    ps = np.concatenate(all_p)
    ts = np.concatenate(all_t)
    cs = np.concatenate(all_c)
    if config.jitter_sigma_us > 0:
        ts = ts + rng.normal(0.0, config.jitter_sigma_us, ts.size)
    ts = np.maximum(np.rint(ts), 0).astype(np.int64)
    order = np.argsort(ts, kind="stable")

    events = np.empty(xs.size, dtype=EVENT_DTYPE)
    events["t"] = ts[order]
    events["x"] = xs[order]
    events["y"] = ys[order]
    events["p"] = ps[order]
    return LabeledStream(events, cs[order], geometry, motion_t, motion_uv, duration_us)


def split(data: LabeledStream, train_fraction: float, seed=None):
    """Contiguous temporal split at ``train_fraction`` of the duration.

    The split point is deterministic (``seed`` is accepted for interface
    uniformity and ignored).  Returns ``(train, test)``.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    boundary = int(round(train_fraction * data.duration_us))
    cut = int(np.searchsorted(data.events["t"].astype(np.int64), boundary, side="left"))
    mcut = int(np.searchsorted(data.motion_t, boundary, side="left"))

    def part(ev_slice, lab_slice, m_slice, dur):
        return LabeledStream(data.events[ev_slice].copy(), data.labels[lab_slice].copy(),
                             data.geometry, data.motion_t[m_slice].copy(),
                             data.motion_uv[m_slice].copy(), dur)

    train = part(slice(0, cut), slice(0, cut), slice(0, max(mcut, 1)), boundary)
    test = part(slice(cut, None), slice(cut, None), slice(max(mcut - 1, 0), None),
                data.duration_us)
    return train, test


# ---------------------------------------------------------------------------
# Sidecar files and scene configs
# ---------------------------------------------------------------------------

def write_labels_csv(path, labels: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("event_index,class\n")
        for i, c in enumerate(labels):
            f.write(f"{i},{c}\n")


def read_labels_csv(path, expected_len=None) -> np.ndarray:
    with open(path) as f:
        header = f.readline().strip()
        if header != "event_index,class":
            raise ValueError(f"bad labels header {header!r}")
        raw = np.loadtxt(f, delimiter=",", dtype=np.int64, ndmin=2)
    labels = np.zeros(raw[:, 0].max() + 1 if raw.size else 0, dtype=np.int64)
    if raw.size:
        labels[raw[:, 0]] = raw[:, 1]
    if expected_len is not None and len(labels) != expected_len:
        raise ValueError(f"label count {len(labels)} != event count {expected_len}")
    return labels


def write_motion_csv(path, motion_t: np.ndarray, motion_uv: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("t_us,u_px_s,v_px_s\n")
        for t, (u, v) in zip(motion_t, motion_uv):
            f.write(f"{t},{u:.9g},{v:.9g}\n")


def read_motion_csv(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != "t_us,u_px_s,v_px_s":
            raise ValueError(f"bad motion header {header!r}")
        raw = np.loadtxt(f, delimiter=",", ndmin=2)
    if raw.size == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, 2))
    return raw[:, 0].astype(np.int64), raw[:, 1:3].astype(np.float64)


def scene_to_json(config: SceneConfig) -> str:
    return json.dumps({
        "width": config.geometry.width,
        "height": config.geometry.height,
        "duration_s": config.duration_s,
        "edge_event_prob": config.edge_event_prob,
        "noise_rate_hz_per_px": config.noise_rate_hz_per_px,
        "jitter_sigma_us": config.jitter_sigma_us,
        "time_step_us": config.time_step_us,
        "target_class_id": config.target_class_id,
        "bounce": config.bounce,
        "seed": config.seed,
        "shapes": [{"vertices": s.vertices.tolist(),
                    "velocity": list(s.velocity),
                    "class_id": s.class_id} for s in config.shapes],
    }, indent=2)


def scene_from_json(text: str) -> SceneConfig:
    d = json.loads(text)
    shapes = [ShapeSpec(np.asarray(s["vertices"], dtype=np.float64),
                        tuple(s["velocity"]), int(s["class_id"]))
              for s in d["shapes"]]
    return SceneConfig(
        geometry=SensorGeometry(int(d["width"]), int(d["height"])),
        shapes=shapes,
        duration_s=float(d["duration_s"]),
        edge_event_prob=float(d.get("edge_event_prob", 0.9)),
        noise_rate_hz_per_px=float(d.get("noise_rate_hz_per_px", 0.05)),
        jitter_sigma_us=float(d.get("jitter_sigma_us", 0.0)),
        time_step_us=int(d.get("time_step_us", 1000)),
        target_class_id=int(d.get("target_class_id", 1)),
        bounce=bool(d.get("bounce", True)),
        seed=int(d.get("seed", 0)))


def default_desk_scene(seed: int = 0, duration_s: float = 20.0,
                       noise_rate_hz_per_px: float = 0.05) -> SceneConfig:
    """Two shapes on a 64x64 sensor: a moving triangle (class 1, the
    regression target) against a moving square and background noise
    (class 0)."""
    triangle = ShapeSpec(
        vertices=np.array([[8.0, 8.0], [26.0, 10.0], [15.0, 26.0]]),
        velocity=(52.0, 34.0), class_id=1)
    square = ShapeSpec(
        vertices=np.array([[38.0, 36.0], [54.0, 36.0], [54.0, 52.0], [38.0, 52.0]]),
        velocity=(-38.0, 47.0), class_id=0)
    return SceneConfig(
        geometry=SensorGeometry(64, 64),
        shapes=[triangle, square],
        duration_s=duration_s,
        edge_event_prob=0.9,
        noise_rate_hz_per_px=noise_rate_hz_per_px,
        jitter_sigma_us=50.0,
        time_step_us=1000,
        target_class_id=1,
        seed=seed)
