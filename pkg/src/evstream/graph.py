"""Batch-form training graph and the training loop.

Training runs the window aggregation as one differentiable batch graph:
every event in a window goes through the shared per-event feature blocks,
gets aged to the window anchor, and the per-channel winner feeds the heads.
Gradient flows only to each channel's winning event; the magnitude clamp
passes gradient only where its argument was positive.

For a real-valued channel z with sign phase, the aged complex value is
``sign(z) * M * exp(-i * theta)`` with ``M = [|z| - dt/tau]+`` and
``theta = 2*pi*dt/tau``, i.e. rectangular components
``(S*cos(theta), -S*sin(theta))`` where ``S = sign(z)*M`` is a
soft-threshold of z.  ``dS/dz = 1`` wherever ``|z| > dt/tau``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import coding
from .events import SensorGeometry
from .nn import (
    MlpModel,
    TrainConfig,
    TrainingDivergedError,
    AdamState,
    adam_step,
    backward_block,
    encode_event_inputs,
    forward_block,
    softmax_cross_entropy,
    squared_error,
    update_running_stats,
)
from .oracle import AblationMode

TWO_PI = coding.TWO_PI


@dataclass
class WindowBatch:
    """A batch of variable-length windows flattened for shared-MLP passes."""

    inputs: np.ndarray        # (sum_n, 3 or 4) per-event network input
    dt_us: np.ndarray         # (sum_n,) anchor_t - t per event
    offsets: np.ndarray       # (B+1,) window boundaries into the flat axis
    tau_us: int
    labels: Optional[np.ndarray] = None    # (sum_n,) event class ids
    targets: Optional[np.ndarray] = None   # (B, reg_out) per-window targets

    @property
    def n_windows(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_events(self) -> int:
        return self.inputs.shape[0]


def make_window_batch(events, anchors_t, offsets, geometry: SensorGeometry,
                      tau_us: int, mode: str = AblationMode.FULL,
                      labels=None, targets=None) -> WindowBatch:
    """Assemble a batch from flattened per-window event slices.

    ``events`` is a structured event array holding the windows back to back;
    ``anchors_t[b]`` is window b's anchor timestamp.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    dt = np.empty(len(events), dtype=np.int64)
    for b in range(len(offsets) - 1):
        sl = slice(offsets[b], offsets[b + 1])
        dt[sl] = anchors_t[b] - events["t"][sl].astype(np.int64)
    if np.any(dt < 0) or np.any(dt >= tau_us):
        raise ValueError("window events must lie in (anchor - tau, anchor]")
    dt_frac = coding.decay_fraction(dt, tau_us) if mode == AblationMode.POINTNET else None
    inputs = encode_event_inputs(events["x"], events["y"], events["p"], geometry,
                                 dt_frac=dt_frac)
    return WindowBatch(inputs, dt, offsets, tau_us, labels=labels, targets=targets)


def _pool_windows(z: np.ndarray, batch: WindowBatch, mode: str):
    """Per-window, per-channel winner selection and pooled global features.

    Returns ``(global_feat, winners, pool_cache)``; winners are flat event
    indices per (window, channel).  The per-window argmax runs over the
    reversed slice so ties resolve to the largest index, which (with
    time-ordered windows) is the batch tie rule: latest timestamp, then
    largest sequence index.
    """
    B = batch.n_windows
    k = z.shape[1]
    frac = coding.decay_fraction(batch.dt_us, batch.tau_us)

    if mode == AblationMode.POINTNET:
        score = z
    elif mode in (AblationMode.FULL, AblationMode.NO_TR):
        score = np.maximum(np.abs(z) - frac[:, None], 0.0)
        score[batch.dt_us >= batch.tau_us] = 0.0
    elif mode in (AblationMode.NO_TD, AblationMode.NO_ALL):
        score = np.abs(z)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    winners = np.empty((B, k), dtype=np.int64)
    for b in range(B):
        lo, hi = batch.offsets[b], batch.offsets[b + 1]
        if hi <= lo:
            raise ValueError(f"window {b} is empty")
        rev = score[lo:hi][::-1]
        winners[b] = (hi - lo - 1) - np.argmax(rev, axis=0) + lo

    ch = np.arange(k)
    zw = z[winners, ch]
    if mode == AblationMode.POINTNET:
        cache = {"winners": winners, "mode": mode}
        return zw, winners, cache

    mw = score[winners, ch]
    s = np.sign(zw) * mw
    rotate = mode in (AblationMode.FULL, AblationMode.NO_TD)
    if rotate:
        theta = TWO_PI * frac
        cos_t = np.cos(theta)[winners]
        sin_t = np.sin(theta)[winners]
    else:
        cos_t = np.ones_like(s)
        sin_t = np.zeros_like(s)
    global_feat = np.empty((B, 2 * k), dtype=np.float64)
    global_feat[:, 0::2] = s * cos_t
    global_feat[:, 1::2] = -s * sin_t
    # Clamp gate: gradient passes only where the decayed magnitude is live.
    if mode in (AblationMode.FULL, AblationMode.NO_TR):
        gate = (mw > 0.0).astype(np.float64)
    else:
        gate = np.ones_like(mw)
    cache = {"winners": winners, "cos": cos_t, "sin": sin_t, "gate": gate, "mode": mode}
    return global_feat, winners, cache


def _pool_backward(d_global: np.ndarray, pool_cache: dict, n_events: int, k: int):
    """Route head gradient back to each channel's winning event."""
    winners = pool_cache["winners"]
    dz = np.zeros((n_events, k), dtype=np.float64)
    ch = np.arange(k)
    if pool_cache["mode"] == AblationMode.POINTNET:
        np.add.at(dz, (winners.ravel(), np.tile(ch, winners.shape[0])),
                  d_global.ravel())
        return dz
    ds = (d_global[:, 0::2] * pool_cache["cos"]
          - d_global[:, 1::2] * pool_cache["sin"]) * pool_cache["gate"]
    np.add.at(dz, (winners.ravel(), np.tile(ch, winners.shape[0])), ds.ravel())
    return dz


def forward(model: MlpModel, batch: WindowBatch, mode: str = AblationMode.FULL,
            heads: Sequence[str] = ("global", "eventwise"), training: bool = False):
    """Run the full graph; returns ``(outputs, cache)``.

    ``outputs`` maps 'global' to (B, reg_out) and 'eventwise' to
    (sum_n, n_classes) for the requested heads.
    """
    if (mode == AblationMode.POINTNET) != model.pointnet:
        raise ValueError("pointnet mode requires a pointnet-variant model")
    local, c1 = forward_block(model.mlp1, batch.inputs, training)
    z, c2 = forward_block(model.mlp2, local, training)
    global_feat, winners, pool_cache = _pool_windows(z, batch, mode)

    outputs = {}
    cache = {"c1": c1, "c2": c2, "local": local, "z": z, "pool": pool_cache,
             "global": global_feat, "heads": tuple(heads)}
    if "global" in heads:
        reg, c3 = forward_block(model.mlp3, global_feat, training)
        outputs["global"] = reg
        cache["c3"] = c3
    if "eventwise" in heads:
        per_event_global = np.repeat(global_feat, np.diff(batch.offsets), axis=0)
        seg_in = np.concatenate([local, per_event_global], axis=1)
        seg, c4 = forward_block(model.mlp4, seg_in, training)
        outputs["eventwise"] = seg
        cache["c4"] = c4
        cache["seg_in"] = seg_in
    return outputs, cache


def forward_backward(model: MlpModel, batch: WindowBatch,
                     mode: str = AblationMode.FULL,
                     heads: Sequence[str] = ("global", "eventwise")):
    """Training-mode forward, loss, and full backward pass.

    Returns ``(total_loss, parts, grads, caches)`` with ``grads`` aligned to
    ``model.parameters()`` and ``caches`` holding the BN batch statistics of
    all four blocks for the deferred running-stat update.
    """
    outputs, cache = forward(model, batch, mode, heads, training=True)
    parts = {}
    d_global_feat = np.zeros_like(cache["global"])
    grads3 = grads4 = None

    if "global" in heads:
        if batch.targets is None:
            raise ValueError("global head requires batch targets")
        reg_loss, d_reg = squared_error(outputs["global"], batch.targets)
        parts["global"] = reg_loss
        d_in3, grads3 = backward_block(model.mlp3, cache["c3"], d_reg)
        d_global_feat += d_in3

    d_local_extra = None
    if "eventwise" in heads:
        if batch.labels is None:
            raise ValueError("eventwise head requires batch labels")
        seg_loss, d_seg = softmax_cross_entropy(outputs["eventwise"], batch.labels)
        parts["eventwise"] = seg_loss
        d_seg_in, grads4 = backward_block(model.mlp4, cache["c4"], d_seg)
        d_local_extra = d_seg_in[:, :model.local_dim]
        d_pe_global = d_seg_in[:, model.local_dim:]
        # Sum each window's per-event global gradient back onto its feature.
        sums = np.add.reduceat(d_pe_global, batch.offsets[:-1], axis=0)
        d_global_feat += sums

    dz = _pool_backward(d_global_feat, cache["pool"], batch.n_events,
                        cache["z"].shape[1])
    d_local, grads2 = backward_block(model.mlp2, cache["c2"], dz)
    if d_local_extra is not None:
        d_local = d_local + d_local_extra
    _, grads1 = backward_block(model.mlp1, cache["c1"], d_local)

    grads = []
    for name, block_grads in (("mlp1", grads1), ("mlp2", grads2),
                              ("mlp3", grads3), ("mlp4", grads4)):
        block = dict(model.blocks())[name]
        if block_grads is None:
            for layer in block:
                grads.append(np.zeros_like(layer.dense.weights))
                grads.append(np.zeros_like(layer.dense.bias))
                if layer.bn is not None:
                    grads.append(np.zeros_like(layer.bn.gamma))
                    grads.append(np.zeros_like(layer.bn.beta))
            continue
        for (dw, db, dg, dbta), layer in zip(block_grads, block):
            grads.append(dw)
            grads.append(db)
            if layer.bn is not None:
                grads.append(dg)
                grads.append(dbta)

    total = float(sum(parts.values()))
    caches = {"mlp1": cache["c1"], "mlp2": cache["c2"],
              "mlp3": cache.get("c3"), "mlp4": cache.get("c4")}
    return total, parts, grads, caches


# ---------------------------------------------------------------------------
# Batch composition and the training loop
# ---------------------------------------------------------------------------

def compose_batch(data, config: TrainConfig, rng: np.random.Generator,
                  mode: Optional[str] = None) -> WindowBatch:
    """Sample ``batch_size`` random windows from a labeled stream.

    ``data`` provides ``events``, ``labels``, ``geometry`` and
    ``motion_at(t_us)`` (velocity in px/s); regression targets are converted
    to px per window (px/tau).
    """
    mode = config.mode if mode is None else mode
    events = data.events
    ts = events["t"].astype(np.int64)
    chunks, anchors, label_chunks, targets = [], [], [], []
    geometry = data.geometry
    want_seg = "eventwise" in config.heads
    tau = config.tau_us
    while len(chunks) < config.batch_size:
        anchor_idx = int(rng.integers(0, len(events)))
        anchor_t = int(ts[anchor_idx])
        left = int(np.searchsorted(ts, anchor_t - tau, side="right"))
        sl = events[left:anchor_idx + 1]
        lab = data.labels[left:anchor_idx + 1] if data.labels is not None else None
        if config.crop is not None:
            cw, ch = config.crop
            x0 = int(rng.integers(0, geometry.width - cw + 1))
            y0 = int(rng.integers(0, geometry.height - ch + 1))
            m = ((sl["x"] >= x0) & (sl["x"] < x0 + cw)
                 & (sl["y"] >= y0) & (sl["y"] < y0 + ch))
            if not m.any():
                continue
            sl = sl[m].copy()
            sl["x"] -= x0
            sl["y"] -= y0
            if lab is not None:
                lab = lab[m]
        chunks.append(sl)
        anchors.append(anchor_t)
        if want_seg:
            label_chunks.append(lab)
        targets.append(data.motion_at(anchor_t) * (tau / 1e6))
    offsets = np.cumsum([0] + [len(c) for c in chunks])
    flat = np.concatenate(chunks)
    labels = np.concatenate(label_chunks) if want_seg else None
    tgt = np.asarray(targets, dtype=np.float64) if "global" in config.heads else None
    batch_geometry = SensorGeometry(*config.crop) if config.crop is not None else geometry
    return make_window_batch(flat, anchors, offsets, batch_geometry, tau,
                             mode=mode, labels=labels, targets=tgt)


def train(model: MlpModel, data, config: TrainConfig, log_fn=None):
    """Optimize the model on randomly composed windows.

    One epoch draws ``streams_per_epoch`` windows in batches of
    ``batch_size``.  Returns ``(model, history)`` where history has one
    record per epoch.  A non-finite loss aborts with diagnostics.
    """
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    adam = AdamState(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    history = []
    steps_per_epoch = max(1, config.streams_per_epoch // config.batch_size)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        momentum = config.bn_momentum_at(epoch)
        acc = {"total": 0.0}
        for step in range(steps_per_epoch):
            batch = compose_batch(data, config, rng)
            total, parts, grads, caches = forward_backward(
                model, batch, config.mode, config.heads)
            if not np.isfinite(total):
                raise TrainingDivergedError(
                    f"non-finite loss {total} at epoch {epoch} step {step} "
                    f"(parts={parts}, lr={lr:g})")
            adam_step(params, grads, adam, lr)
            for name, block in model.blocks():
                if caches[name] is not None:
                    update_running_stats(block, caches[name], momentum)
            acc["total"] += total
            for k, v in parts.items():
                acc[k] = acc.get(k, 0.0) + v
        record = {"epoch": epoch, "lr": lr,
                  **{k: v / steps_per_epoch for k, v in acc.items()}}
        history.append(record)
        if log_fn is not None:
            log_fn(record)
    return model, history


def run_steps(model: MlpModel, batch: WindowBatch, config: TrainConfig,
              n_steps: int, lr: Optional[float] = None):
    """Repeated optimization on one fixed batch; returns the loss trace."""
    params = model.parameters()
    adam = AdamState(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    lr = config.learning_rate if lr is None else lr
    trace = []
    for _ in range(n_steps):
        total, _, grads, caches = forward_backward(model, batch, config.mode,
                                                   config.heads)
        if not np.isfinite(total):
            raise TrainingDivergedError(f"non-finite loss {total}")
        adam_step(params, grads, adam, lr)
        for name, block in model.blocks():
            if caches[name] is not None:
                update_running_stats(block, caches[name], 0.9)
        trace.append(total)
    return trace
