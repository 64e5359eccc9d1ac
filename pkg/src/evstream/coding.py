"""Complex temporal coding and per-channel max aggregation.

A feature channel is a complex number stored in polar form (magnitude,
phase).  Aging a channel by ``dt`` microseconds shrinks the magnitude by
``dt / tau`` (clamped at zero) and rotates the phase by ``-2*pi * dt / tau``.
Aggregation picks, per channel, the element with the largest magnitude,
breaking ties toward the newer operand.  Together these two operations make
the windowed aggregate computable recursively: aging commutes with the
per-channel argmax because every channel shrinks by the same amount.

All decay arithmetic everywhere in the package goes through
:func:`decay_fraction` / :func:`decay_channels` so that the recursive engine,
the batch reference, and the pure functions here produce bit-identical
values in matching precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class ChannelCode(NamedTuple):
    """One complex feature channel in polar form."""

    magnitude: float
    phase: float


def inverse_tau(tau_us: int, dtype=np.float64):
    """Canonical ``1 / tau`` scalar.

    Every decay path must multiply by this exact value (never divide by tau
    inline) so independent implementations agree bitwise.
    """
    if tau_us <= 0:
        raise ValueError(f"tau_us must be positive, got {tau_us}")
    return np.dtype(dtype).type(1.0 / float(tau_us))


def decay_fraction(dt_us, tau_us: int, dtype=np.float64):
    """Elapsed-time fraction ``dt / tau`` as ``dtype`` (exact integer input)."""
    dt = np.asarray(dt_us)
    return dt.astype(dtype) * inverse_tau(tau_us, dtype)


def decay_channels(
    magnitude: np.ndarray,
    phase: np.ndarray,
    dt_us,
    tau_us: int,
    rotate: bool = True,
):
    """Age channels by per-channel integer microsecond intervals.

    Returns new ``(magnitude, phase)`` arrays.  Channels with
    ``dt_us >= tau_us`` are zeroed by integer comparison, so expiry is exact
    regardless of floating-point rounding in the decay product.  Channels
    with zero magnitude get canonical phase 0.
    """
    dt = np.asarray(dt_us, dtype=np.int64)
    if np.any(dt < 0):
        raise ValueError("negative elapsed time")
    dtype = magnitude.dtype.type
    frac = decay_fraction(dt, tau_us, magnitude.dtype)
    mag = np.maximum(magnitude - frac, dtype(0.0))
    expired = dt >= tau_us
    mag = np.where(expired, dtype(0.0), mag)
    if rotate:
        new_phase = np.mod(phase - TWO_PI * frac, TWO_PI)
    else:
        new_phase = phase.astype(magnitude.dtype, copy=True)
    new_phase = np.where(mag == 0, dtype(0.0), new_phase)
    return mag, new_phase


@dataclass(frozen=True)
class CodedVector:
    """K complex channels in polar form.

    ``magnitude`` and ``phase`` are equal-length 1-D float arrays with
    magnitudes in [0, 1] and phases in [0, 2*pi).
    """

    magnitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape or self.magnitude.ndim != 1:
            raise ValueError("magnitude and phase must be equal-length 1-D arrays")

    @property
    def k(self) -> int:
        return self.magnitude.shape[0]

    def __len__(self) -> int:
        return self.k

    def __getitem__(self, i: int) -> ChannelCode:
        return ChannelCode(float(self.magnitude[i]), float(self.phase[i]))

    def validate(self) -> None:
        """Check the polar-form invariants; raises ValueError on violation."""
        if np.any(self.magnitude < 0) or np.any(self.magnitude > 1):
            raise ValueError("magnitudes must lie in [0, 1]")
        if np.any(self.phase < 0) or np.any(self.phase >= TWO_PI):
            raise ValueError("phases must lie in [0, 2*pi)")
        if np.any((self.magnitude == 0) & (self.phase != 0)):
            raise ValueError("zero-magnitude channels must have phase 0")

    @staticmethod
    def zeros(k: int, dtype=np.float64) -> "CodedVector":
        return CodedVector(np.zeros(k, dtype=dtype), np.zeros(k, dtype=dtype))

    @staticmethod
    def from_real(values: np.ndarray) -> "CodedVector":
        """Code a real feature vector: magnitude |r|, phase 0 for r >= 0 else pi.

        This is how the tanh-bounded feature extractor output enters the
        complex domain.
        """
        values = np.asarray(values)
        mag = np.abs(values)
        phase = np.where(values < 0, values.dtype.type(np.pi), values.dtype.type(0.0))
        phase = np.where(mag == 0, values.dtype.type(0.0), phase)
        return CodedVector(mag, phase)


def temporal_code(z: CodedVector, dt_us: int, tau_us: int) -> CodedVector:
    """Age a coded vector by ``dt_us`` microseconds within a ``tau_us`` window."""
    if dt_us < 0:
        raise ValueError(f"dt_us must be non-negative, got {dt_us}")
    mag, phase = decay_channels(z.magnitude, z.phase, dt_us, tau_us)
    return CodedVector(mag, phase)


def compose_code(z: CodedVector, a_us: int, b_us: int, tau_us: int) -> CodedVector:
    """Two-step aging; must equal a single step of ``a_us + b_us``."""
    return temporal_code(temporal_code(z, a_us, tau_us), b_us, tau_us)


def complex_max(a: CodedVector, b: CodedVector) -> CodedVector:
    """Per-channel selection of the larger-magnitude element.

    Ties select the element from ``b`` (the newer operand), which is what
    makes the left fold over a time-ordered sequence match the batch rule
    "latest timestamp wins, then largest index".
    """
    if a.k != b.k:
        raise ValueError(f"channel count mismatch: {a.k} vs {b.k}")
    take_b = b.magnitude >= a.magnitude
    return CodedVector(
        np.where(take_b, b.magnitude, a.magnitude),
        np.where(take_b, b.phase, a.phase),
    )


def complex_max_fold(vectors: Sequence[CodedVector]) -> CodedVector:
    """Left fold of :func:`complex_max` over a sequence (oldest first)."""
    if len(vectors) == 0:
        raise ValueError("cannot fold an empty sequence")
    acc = vectors[0]
    for v in vectors[1:]:
        acc = complex_max(acc, v)
    return acc


def to_real_pairs(v: CodedVector) -> np.ndarray:
    """Rectangular form as 2K reals: channel k -> (m*cos(phi), m*sin(phi))
    at positions 2k and 2k+1."""
    out = np.empty(2 * v.k, dtype=np.float64)
    out[0::2] = v.magnitude * np.cos(v.phase)
    out[1::2] = v.magnitude * np.sin(v.phase)
    return out
