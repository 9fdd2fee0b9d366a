"""Inference engine and analytic cost modeler for depthwise-separable
convolutional networks (the MobileNet family).

Three strands, verified against each other:

* naive reference ops (the correctness oracle) and a blocked-GEMM fast
  backend with a copy-free 1x1 path;
* an architecture builder covering width/resolution multipliers and the
  shallow variant, with a round-trippable text format;
* an exact integer mult-add/parameter model with per-layer, per-type,
  and multiplier-sweep accounting tables.

A small RMSprop trainer plus finite-difference gradient checker make the
training-related behavior testable at desk scale.
"""

from depthsep.arch import (
    ArchDescriptor,
    Hyperparams,
    LayerKind,
    LayerSpec,
    build_mobilenet,
    emit_arch,
    parse_arch,
)
from depthsep.cost import CostReport, analyze, breakdown_by_type, sweep
from depthsep.runtime import Model, fold_batchnorm, forward, init_weights, load_model, save_model

__all__ = [
    "ArchDescriptor",
    "Hyperparams",
    "LayerKind",
    "LayerSpec",
    "build_mobilenet",
    "emit_arch",
    "parse_arch",
    "CostReport",
    "analyze",
    "breakdown_by_type",
    "sweep",
    "Model",
    "fold_batchnorm",
    "forward",
    "init_weights",
    "load_model",
    "save_model",
]

__version__ = "0.1.0"
