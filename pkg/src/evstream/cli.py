"""Command-line entry points.

Subcommands: ``synth`` (scene generation), ``train``, ``infer`` (streaming
inference with on-demand queries), ``bench`` (throughput/latency harness),
``eval`` (metrics).  Exit codes: 0 success, 1 runtime failure,
2 configuration error.

``infer`` runs the event-driven updater and the on-demand query loop as two
concurrent activities: the updater pushes events up to each query boundary
and publishes a snapshot; the query thread consumes snapshots and runs the
heads while the updater streams ahead.  Outputs therefore depend only on
the stream and the query schedule, never on wall-clock races.
"""

from __future__ import annotations

import argparse
import json
import os
import queue
import sys
import threading

import numpy as np

from . import synth
from .bench import BenchReport, make_bench_model, run_bench
from .engine import Engine, EngineConfig, OnDemandHeads
from .events import (
    read_events_binary,
    read_events_csv,
    write_events_binary,
    write_events_csv,
)
from .lut import build_local_lut, build_lut, load_lut, save_lut
from .metrics import motion_l2, segmentation_scores
from .nn import MlpModel, TrainConfig, load_config, load_weights, save_weights, weights_checksum
from .graph import train


class ConfigError(Exception):
    """User-facing configuration problem (exit code 2)."""


def _print_kv(pairs) -> None:
    for k, v in pairs:
        print(f"{k}={v}")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    if args.config:
        try:
            with open(args.config) as f:
                config = synth.scene_from_json(f.read())
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"bad scene config: {e}")
    else:
        config = synth.default_desk_scene()
    if args.seed is not None:
        config.seed = args.seed
    data = synth.generate(config)
    os.makedirs(args.out, exist_ok=True)
    if args.format == "csv":
        write_events_csv(os.path.join(args.out, "events.csv"), data.events)
    else:
        write_events_binary(os.path.join(args.out, "events.evt"), data.events,
                            data.geometry)
    synth.write_labels_csv(os.path.join(args.out, "labels.csv"), data.labels)
    synth.write_motion_csv(os.path.join(args.out, "motion.csv"),
                           data.motion_t, data.motion_uv)
    _print_kv([("events", len(data.events)),
               ("duration_us", data.duration_us),
               ("out", args.out)])
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_dataset(path) -> synth.LabeledStream:
    evt_bin = os.path.join(path, "events.evt")
    evt_csv = os.path.join(path, "events.csv")
    if os.path.exists(evt_bin):
        events, geometry = read_events_binary(evt_bin)
    elif os.path.exists(evt_csv):
        events = read_events_csv(evt_csv)
        from .events import SensorGeometry
        geometry = SensorGeometry(int(events["x"].max()) + 1,
                                  int(events["y"].max()) + 1)
    else:
        raise ConfigError(f"no events.evt or events.csv under {path}")
    labels = synth.read_labels_csv(os.path.join(path, "labels.csv"), len(events))
    motion_t, motion_uv = synth.read_motion_csv(os.path.join(path, "motion.csv"))
    duration = int(max(events["t"].max() if events.size else 0,
                       motion_t[-1] if motion_t.size else 0)) + 1
    return synth.LabeledStream(events, labels, geometry, motion_t, motion_uv, duration)


def _cmd_train(args) -> int:
    try:
        config = load_config(args.config) if args.config else TrainConfig()
    except (OSError, ValueError, TypeError, KeyError) as e:
        raise ConfigError(f"bad train config: {e}")
    if args.seed is not None:
        config.seed = args.seed
    if args.k is not None:
        config.k = args.k
    if args.tau_us is not None:
        config.tau_us = args.tau_us
    if args.mode is not None:
        config.mode = args.mode
    data = _load_dataset(args.data)
    if args.init_weights:
        model = load_weights(args.init_weights)
    else:
        model = MlpModel.create(k=config.k, n_classes=config.n_classes,
                                reg_out=config.reg_out, sizes=config.sizes,
                                pointnet=config.mode == "pointnet",
                                seed=config.seed)
    loss_log = args.loss_log or (args.out + ".losses.csv")
    with open(loss_log, "w") as f:
        f.write("epoch,lr,total,global,eventwise\n")

        def log(rec):
            f.write(f"{rec['epoch']},{rec['lr']:.8g},{rec['total']:.10g},"
                    f"{rec.get('global', float('nan')):.10g},"
                    f"{rec.get('eventwise', float('nan')):.10g}\n")
            f.flush()

        train(model, data, config, log_fn=log)
    checksum = save_weights(model, args.out)
    _print_kv([("weights", args.out), ("checksum", checksum), ("loss_log", loss_log)])
    return 0


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------

def _read_stream(path):
    if path.endswith(".csv"):
        return read_events_csv(path), None
    events, geometry = read_events_binary(path)
    return events, geometry


def _cmd_infer(args) -> int:
    model = load_weights(args.weights)
    lut = load_lut(args.lut)
    if lut.checksum != weights_checksum(model):
        raise ConfigError("table checksum does not match the weights; "
                          "rebuild the table for these weights")
    local_lut = load_lut(args.local_lut) if args.local_lut else None
    if args.mode == "eventwise" and local_lut is None:
        local_lut = build_local_lut(model, lut.geometry)
    heads = OnDemandHeads.from_model(model, local_lut)
    events, _ = _read_stream(args.stream)
    if events.size == 0:
        raise ConfigError("empty stream")
    engine = Engine(EngineConfig(lut=lut, tau_us=args.tau_us))
    ts = events["t"].astype(np.int64)
    t_first, t_last = int(ts[0]), int(ts[-1])

    query_ts = []
    if args.query_hz > 0:
        period = 1e6 / args.query_hz
        m = 1
        while t_first + m * period <= t_last:
            query_ts.append(t_first + int(round(m * period)))
            m += 1

    out_q: queue.Queue = queue.Queue(maxsize=8)
    error: list = []

    def updater():
        try:
            pos = 0
            for qt in query_ts:
                hi = int(np.searchsorted(ts, qt, side="right"))
                engine.push(events[pos:hi])
                out_q.put((qt, engine.snapshot(), pos, hi))
                pos = hi
            engine.push(events[pos:])
        except Exception as e:  # propagate to the consumer
            error.append(e)
        finally:
            out_q.put(None)

    rows = []
    worker = threading.Thread(target=updater, daemon=True)
    worker.start()
    while True:
        item = out_q.get()
        if item is None:
            break
        qt, snap, lo, hi = item
        if args.mode == "global":
            out = heads.infer_global(snap, qt)
            rows.append((qt, out))
        else:
            if hi > lo:
                scores = heads.infer_eventwise(snap, events[lo:hi], qt)
                pred = np.argmax(scores, axis=1)
                for i, cls in zip(range(lo, hi), pred):
                    rows.append((i, int(ts[i]), int(cls)))
    worker.join()
    if error:
        raise error[0]

    with open(args.out, "w") as f:
        if args.mode == "global":
            width = len(rows[0][1]) if rows else model.reg_out
            f.write("t_us," + ",".join(f"out{i}" for i in range(width)) + "\n")
            for qt, out in rows:
                f.write(f"{qt}," + ",".join(f"{v:.9g}" for v in out) + "\n")
        else:
            f.write("event_index,t_us,pred_class\n")
            for idx, t, cls in rows:
                f.write(f"{idx},{t},{cls}\n")
    _print_kv([("queries", len(query_ts)), ("rows", len(rows)), ("out", args.out)])
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _cmd_bench(args) -> int:
    from .events import SensorGeometry
    geometry = SensorGeometry(args.width, args.height)
    if args.weights:
        model = load_weights(args.weights)
        if args.lut:
            lut = load_lut(args.lut)
            if lut.checksum != weights_checksum(model):
                raise ConfigError("table checksum does not match the weights")
        else:
            lut = build_lut(model, geometry)
    else:
        model, lut = make_bench_model(args.k, geometry, seed=args.seed or 0)
    report = run_bench(model, lut, rate_meps=args.rate_meps,
                       duration_s=args.duration, tau_us=args.tau_us,
                       seed=args.seed or 0)
    lines = report.format_lines()
    for line in lines:
        print(line)
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_csv_rows(path, expected_header):
    with open(path) as f:
        header = f.readline().strip()
        if header != expected_header:
            raise ValueError(f"bad header in {path}: {header!r}")
        body = f.read().strip()
    if not body:
        return np.empty((0, len(expected_header.split(",")) ))
    return np.loadtxt(body.splitlines(), delimiter=",", ndmin=2)


def _cmd_eval(args) -> int:
    if args.task == "seg":
        pred_rows = _read_csv_rows(args.pred, "event_index,t_us,pred_class")
        labels = synth.read_labels_csv(args.labels, None)
        idx = pred_rows[:, 0].astype(np.int64)
        if idx.size and idx.max() >= len(labels):
            raise ValueError("prediction indexes events beyond the label file")
        scores = segmentation_scores(pred_rows[:, 2].astype(np.int64),
                                     labels[idx], args.n_classes)
        pairs = [("ga", f"{scores['ga']:.4f}"), ("miou", f"{scores['miou']:.4f}")]
        pairs += [(f"iou_{c}", f"{v:.4f}") for c, v in enumerate(scores["iou"])]
        _print_kv(pairs)
        return 0
    # motion: predictions are px/tau; ground truth file is px/s.
    pred_rows = _read_csv_rows(args.pred, "t_us,out0,out1")
    motion_t, motion_uv = synth.read_motion_csv(args.truth)
    ti = np.clip(np.searchsorted(motion_t, pred_rows[:, 0], side="right") - 1,
                 0, len(motion_t) - 1)
    target = motion_uv[ti] * (args.tau_us / 1e6)
    err = motion_l2(pred_rows[:, 1:3], target)
    _print_kv([("motion_l2_px_per_tau", f"{err:.6f}"), ("rows", len(pred_rows))])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evstream",
                                description="Recursive event-stream engine tools")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic labeled scene")
    sp.add_argument("--config", help="scene config JSON (default: desk scene)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--format", choices=("binary", "csv"), default="binary")
    sp.set_defaults(func=_cmd_synth)

    tp = sub.add_parser("train", help="train on a generated dataset")
    tp.add_argument("--data", required=True, help="dataset directory")
    tp.add_argument("--config", help="train config JSON")
    tp.add_argument("--out", required=True, help="weights file to write")
    tp.add_argument("--loss-log", help="loss CSV (default: <out>.losses.csv)")
    tp.add_argument("--init-weights", help="resume from an existing weights file")
    tp.add_argument("--seed", type=int)
    tp.add_argument("--k", type=int)
    tp.add_argument("--tau-us", type=int)
    tp.add_argument("--mode")
    tp.set_defaults(func=_cmd_train)

    ip = sub.add_parser("infer", help="stream events and query on demand")
    ip.add_argument("--weights", required=True)
    ip.add_argument("--lut", required=True)
    ip.add_argument("--local-lut")
    ip.add_argument("--stream", required=True)
    ip.add_argument("--mode", choices=("global", "eventwise"), default="global")
    ip.add_argument("--query-hz", type=float, default=1000.0)
    ip.add_argument("--tau-us", type=int, default=32000)
    ip.add_argument("--out", required=True)
    ip.set_defaults(func=_cmd_infer)

    bp = sub.add_parser("bench", help="throughput / latency harness")
    bp.add_argument("--weights")
    bp.add_argument("--lut")
    bp.add_argument("--k", type=int, default=256)
    bp.add_argument("--width", type=int, default=240)
    bp.add_argument("--height", type=int, default=180)
    bp.add_argument("--rate-meps", type=float, default=1.0)
    bp.add_argument("--duration", type=float, default=2.0)
    bp.add_argument("--tau-us", type=int, default=32000)
    bp.add_argument("--seed", type=int)
    bp.add_argument("--out")
    bp.set_defaults(func=_cmd_bench)

    ep = sub.add_parser("eval", help="score predictions")
    ep.add_argument("--task", choices=("seg", "motion"), required=True)
    ep.add_argument("--pred", required=True)
    ep.add_argument("--labels", help="labels.csv (seg)")
    ep.add_argument("--truth", help="motion.csv (motion)")
    ep.add_argument("--n-classes", type=int, default=2)
    ep.add_argument("--tau-us", type=int, default=32000)
    ep.set_defaults(func=_cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
