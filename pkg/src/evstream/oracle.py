"""Batch reference implementations for equivalence testing and ablations.

Everything here computes in double precision and processes whole windows at
once: the per-event feature is evaluated for every event in the window, the
mode's coding is applied against the anchor, and the per-channel winner is
selected with the batch tie rule (latest timestamp, then largest sequence
index).  This is the ground truth the recursive engine is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import coding
from .coding import CodedVector
from .events import EVENT_DTYPE, EventWindow, SensorGeometry
from .nn import MlpModel, encode_event_inputs, forward_block


class AblationMode(str, Enum):
    """Temporal-coding variants.

    ``FULL`` is the complete coding (decay + rotation); ``NO_TD`` drops the
    decay term, ``NO_TR`` the rotation term, ``NO_ALL`` both.  ``POINTNET``
    is the batch baseline whose per-event network takes the elapsed time as
    a fourth input and whose pooling is a plain per-channel real max.
    Only ``FULL`` and ``NO_TR`` admit the recursion; the others exist solely
    on this batch path.
    """

    FULL = "full"
    NO_TD = "no_td"
    NO_TR = "no_tr"
    NO_ALL = "no_all"
    POINTNET = "pointnet"


RECURSIVE_MODES = (AblationMode.FULL, AblationMode.NO_TR)


def _window_parts(window, tau_us: Optional[int], anchor_t: Optional[int]):
    if isinstance(window, EventWindow):
        return window.to_array(), window.tau_us, window.anchor_t
    arr = np.asarray(window)
    if arr.dtype != EVENT_DTYPE:
        raise ValueError("window must be an EventWindow or an event array")
    if tau_us is None:
        raise ValueError("tau_us required with a raw event array")
    if anchor_t is None:
        anchor_t = int(arr["t"].max()) if arr.size else 0
    return arr, tau_us, anchor_t


def _features_f64(arr, lut=None, model: Optional[MlpModel] = None,
                  geometry: Optional[SensorGeometry] = None,
                  dt_frac=None) -> np.ndarray:
    """Signed per-event feature rows (n, K) in double precision."""
    if (lut is None) == (model is None):
        raise ValueError("provide exactly one of lut or model")
    if lut is not None:
        idx = lut.indices(arr["x"].astype(np.int64), arr["y"].astype(np.int64),
                          arr["p"].astype(np.int64))
        return lut.table[idx].astype(np.float64)
    if geometry is None:
        raise ValueError("model featurization requires geometry")
    inputs = encode_event_inputs(arr["x"], arr["y"], arr["p"], geometry,
                                 dt_frac=dt_frac)
    local, _ = forward_block(model.mlp1, inputs, training=False)
    z, _ = forward_block(model.mlp2, local, training=False)
    return z


def batch_global_feature(window, lut=None, model: Optional[MlpModel] = None,
                         geometry: Optional[SensorGeometry] = None,
                         mode: str = AblationMode.FULL,
                         tau_us: Optional[int] = None,
                         anchor_t: Optional[int] = None,
                         return_winners: bool = False):
    """Aggregate a whole window at its anchor in one batch pass.

    Empty windows yield the zero vector.  With ``return_winners`` the
    per-channel winning event index (into the window) is also returned,
    -1 for channels that aggregated to zero from an empty window.
    """
    mode = AblationMode(mode)
    if mode == AblationMode.POINTNET:
        raise ValueError("use pointnet_forward for the pointnet baseline")
    arr, tau_us, anchor_t = _window_parts(window, tau_us, anchor_t)
    k = lut.k if lut is not None else model.k
    if arr.size == 0:
        vec = CodedVector.zeros(k)
        return (vec, np.full(k, -1, dtype=np.int64)) if return_winners else vec

    z = _features_f64(arr, lut=lut, model=model, geometry=geometry)
    mag0 = np.abs(z)
    phase0 = np.where(z < 0, np.pi, 0.0)
    dt = anchor_t - arr["t"].astype(np.int64)
    if np.any(dt < 0):
        raise ValueError("window contains events after the anchor")

    rotate = mode in (AblationMode.FULL, AblationMode.NO_TD)
    if mode in (AblationMode.FULL, AblationMode.NO_TR):
        mags, phases = coding.decay_channels(mag0, phase0, dt[:, None], tau_us,
                                             rotate=rotate)
    else:
        # Decay disabled: magnitudes survive unclamped; rotation optional.
        mags = mag0
        if rotate:
            frac = coding.decay_fraction(dt, tau_us)[:, None]
            phases = np.mod(phase0 - coding.TWO_PI * frac, coding.TWO_PI)
        else:
            phases = phase0.copy()
        phases = np.where(mags == 0, 0.0, phases)

    # Batch tie rule: events are time-ordered, so the largest index among
    # per-channel maxima is the latest timestamp, then largest index.
    n = arr.shape[0]
    winners = (n - 1) - np.argmax(mags[::-1], axis=0)
    ch = np.arange(k)
    vec = CodedVector(mags[winners, ch], phases[winners, ch])
    if return_winners:
        return vec, winners
    return vec


def pointnet_forward(window, model: MlpModel, geometry: SensorGeometry,
                     tau_us: Optional[int] = None,
                     anchor_t: Optional[int] = None) -> np.ndarray:
    """Batch baseline: g(max(h(e_i))) with elapsed time as a network input.

    ``max`` is the plain per-channel real max, so the output is invariant to
    any permutation of the window.
    """
    if not model.pointnet:
        raise ValueError("model was not built as the pointnet variant")
    arr, tau_us, anchor_t = _window_parts(window, tau_us, anchor_t)
    if arr.size == 0:
        raise ValueError("pointnet baseline requires a non-empty window")
    dt = anchor_t - arr["t"].astype(np.int64)
    dt_frac = coding.decay_fraction(dt, tau_us)
    z = _features_f64(arr, model=model, geometry=geometry, dt_frac=dt_frac)
    pooled = z.max(axis=0, keepdims=True)
    out, _ = forward_block(model.mlp3, pooled, training=False)
    return out[0]


# ---------------------------------------------------------------------------
# Engine-vs-batch equivalence reporting
# ---------------------------------------------------------------------------

@dataclass
class EquivalenceTrial:
    seed: int
    n_events: int
    max_deviation: float


@dataclass
class EquivalenceReport:
    tolerance: float
    trials: list
    bitwise: bool

    @property
    def max_deviation(self) -> float:
        return max((t.max_deviation for t in self.trials), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance

    def to_text(self) -> str:
        lines = [f"seed={t.seed} n={t.n_events} max_dev={t.max_deviation:.3e}"
                 for t in self.trials]
        lines.append(f"overall max_dev={self.max_deviation:.3e} "
                     f"tol={self.tolerance:.1e} "
                     f"result={'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _rect(vec: CodedVector) -> np.ndarray:
    return coding.to_real_pairs(vec)


def random_stream(rng: np.random.Generator, geometry: SensorGeometry,
                  n_events: int, mean_gap_us: float) -> np.ndarray:
    """Uniform random positions/polarities with geometric-ish time gaps."""
    arr = np.empty(n_events, dtype=EVENT_DTYPE)
    arr["x"] = rng.integers(0, geometry.width, n_events)
    arr["y"] = rng.integers(0, geometry.height, n_events)
    arr["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n_events)
    gaps = rng.integers(0, max(2 * int(mean_gap_us), 1) + 1, n_events)
    arr["t"] = np.cumsum(gaps)
    return arr


def equivalence_report(lut, tau_us: int, trials: int = 20,
                       events_per_trial: int = 256, seed: int = 0,
                       tolerance: float = 1e-5,
                       mode: str = AblationMode.FULL,
                       engine_factory=None,
                       check_every_prefix: bool = True) -> EquivalenceReport:
    """Drive random streams through the engine and the batch reference.

    Reports the max channel-wise rectangular-form deviation over every
    prefix of every trial (or final states only when ``check_every_prefix``
    is off).  ``engine_factory(config) -> engine`` lets tests inject faults.
    """
    from .engine import Engine, EngineConfig  # local import to avoid a cycle

    if engine_factory is None:
        engine_factory = Engine
    rows = []
    bitwise = True
    for trial in range(trials):
        trial_seed = seed + trial
        rng = np.random.default_rng(trial_seed)
        n = int(rng.integers(max(events_per_trial // 2, 1), events_per_trial + 1))
        stream = random_stream(rng, lut.geometry, n, mean_gap_us=tau_us / n * 2)
        engine = engine_factory(EngineConfig(lut=lut, tau_us=tau_us, mode=mode))
        dev = 0.0
        checkpoints = range(1, n + 1) if check_every_prefix else (n,)
        done = 0
        for stop in checkpoints:
            engine.push(stream[done:stop])
            done = stop
            snap = engine.snapshot()
            got = _rect(snap.decode())
            anchor = int(stream["t"][stop - 1])
            want = _rect(batch_global_feature(stream[:stop], lut=lut, mode=mode,
                                              tau_us=tau_us, anchor_t=anchor))
            dev = max(dev, float(np.max(np.abs(got - want))))
            if not np.array_equal(got, want):
                bitwise = False
        rows.append(EquivalenceTrial(trial_seed, n, dev))
    return EquivalenceReport(tolerance, rows, bitwise)
