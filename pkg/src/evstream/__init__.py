"""Streaming event-camera feature engine and training toolkit.

The package is organized around a single idea: a K-channel complex feature
summarizing all recent events can be maintained recursively, one event at a
time, because the temporal code (linear magnitude decay + phase rotation)
commutes with per-channel max selection.  At inference time the per-event
MLP is replaced by a lookup table over the finite (x, y, polarity) input
space, so the per-event update costs O(K) with no matrix products.

Modules
-------
events   event records, sliding windows, noise filters, file formats
coding   temporal coding, complex max, real-pair conversion
nn       dense layers, batch norm, Adam, losses, weight serialization
graph    batch-form training graph and the training loop
lut      precomputed per-(x, y, p) feature tables
engine   event-driven recursive state update + on-demand head inference
oracle   batch reference implementations and ablation variants
synth    synthetic labeled event-stream generation
metrics  segmentation / regression evaluation
bench    throughput and latency measurement harness
cli      command-line entry points
"""

from .coding import (
    ChannelCode,
    CodedVector,
    complex_max,
    complex_max_fold,
    compose_code,
    temporal_code,
    to_real_pairs,
)
from .events import (
    EVENT_DTYPE,
    Event,
    EventWindow,
    OutOfOrderEventError,
    SensorGeometry,
    compose_training_window,
    nn_filter,
    push,
    refractory_filter,
)
from .engine import Engine, EngineConfig, GlobalFeature, OnDemandHeads
from .lut import FeatureLut, build_local_lut, build_lut, lookup
from .nn import MlpModel, TrainConfig
from .oracle import AblationMode, batch_global_feature, pointnet_forward

__all__ = [
    "AblationMode",
    "ChannelCode",
    "CodedVector",
    "EVENT_DTYPE",
    "Engine",
    "EngineConfig",
    "Event",
    "EventWindow",
    "FeatureLut",
    "GlobalFeature",
    "MlpModel",
    "OnDemandHeads",
    "OutOfOrderEventError",
    "SensorGeometry",
    "TrainConfig",
    "batch_global_feature",
    "build_local_lut",
    "build_lut",
    "complex_max",
    "complex_max_fold",
    "compose_code",
    "compose_training_window",
    "lookup",
    "nn_filter",
    "pointnet_forward",
    "push",
    "refractory_filter",
    "temporal_code",
    "to_real_pairs",
]

__version__ = "0.1.0"
