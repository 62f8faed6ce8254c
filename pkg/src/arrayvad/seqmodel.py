"""Causal TCN classifier for 3-class frame labeling (silence / one / overlap).

The network is a stack of dilated causal 1-D convolutions over a feature
sequence: per-frame layer norm, a 1x1 bottleneck projection, ``blocks``
repeats of ``layers_per_block`` dilated conv layers (dilation doubling per
layer) with a residual connection around each block, then a linear 1x1
projection to class logits. There is no temporal downsampling, so one logit
row comes out per input frame.

Everything runs on the float64 autodiff graph, so a scalar loss computed
from ``tcn_forward`` output can be swept backward through every parameter
with ``GradTape.gradients`` (or ``arrayvad.autodiff.grad`` directly).

Convolutions are expressed as shifted matmuls over a left-padded sequence:
tap ``j`` of a kernel reads the input ``(kernel-1-j) * dilation`` frames in
the past, so frame ``t`` of the output never sees frames after ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    concat,
    getitem,
    grad as _graph_grad,
    parameter,
    relu,
    tmean,
    tsqrt,
)
from .errors import ArgumentError, NumericError

_NORM_EPS = 1e-5


@dataclass(frozen=True)
class TcnConfig:
    """Shape of the classifier.

    ``input_dim`` is the per-frame feature width the net expects. Dilation
    of layer ``l`` inside a block is ``2**l``.
    """

    input_dim: int
    bottleneck: int = 64
    hidden: int = 128
    layers_per_block: int = 5
    blocks: int = 3
    kernel: int = 3
    n_classes: int = 3

    def __post_init__(self):
        for name in ("input_dim", "bottleneck", "hidden", "layers_per_block",
                     "blocks", "kernel"):
            if int(getattr(self, name)) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if self.n_classes < 2:
            raise ArgumentError("n_classes must be >= 2")

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "bottleneck": self.bottleneck,
            "hidden": self.hidden,
            "layers_per_block": self.layers_per_block,
            "blocks": self.blocks,
            "kernel": self.kernel,
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: int(v) for k, v in d.items()})


def count_parameters(cfg: TcnConfig) -> int:
    """Closed-form scalar count of every trainable entry.

    Audited against direct enumeration of ``tcn_init`` output in the tests;
    keep the two in sync when touching the architecture.
    """
    f, b, h, k = cfg.input_dim, cfg.bottleneck, cfg.hidden, cfg.kernel
    n_conv = cfg.blocks * cfg.layers_per_block
    total = 2 * f                      # layer norm gain + bias
    total += f * b + b                 # bottleneck 1x1
    total += k * b * h + (n_conv - 1) * k * h * h + n_conv * h
    if b != h:
        total += b * h                 # residual projection on block 0
    total += h * cfg.n_classes + cfg.n_classes
    return total


def receptive_field(cfg: TcnConfig) -> int:
    """Frames of past context that can influence one output frame."""
    per_block = sum((cfg.kernel - 1) * 2 ** l
                    for l in range(cfg.layers_per_block))
    return 1 + cfg.blocks * per_block


@dataclass
class ModelParams:
    """Named parameter tensors plus the config and seed that produced them."""

    tensors: Dict[str, Tensor]
    config: TcnConfig
    seed: int

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Detached float64 copies keyed by tensor name, for checkpointing."""
        return {name: np.array(t.data) for name, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        fresh = {name: parameter(t.data.copy())
                 for name, t in self.tensors.items()}
        return ModelParams(tensors=fresh, config=self.config, seed=self.seed)

    def validate(self):
        for name, t in self.tensors.items():
            if not np.isfinite(t.data).all():
                raise NumericError(f"non-finite values in parameter {name}")


@dataclass
class GradTape:
    """One reverse sweep over a parameter set.

    The op graph is recorded implicitly as forward ops run on the tensors;
    this object binds the parameter dictionary so a single call turns a
    scalar loss into a complete name -> gradient mapping. Parameters the
    loss never touched come back as zero arrays.
    """

    params: Mapping[str, Tensor] = field(default_factory=dict)

    def gradients(self, loss: Tensor) -> Dict[str, np.ndarray]:
        return _graph_grad(loss, self.params)


def _conv_layer_names(cfg):
    for bi in range(cfg.blocks):
        for li in range(cfg.layers_per_block):
            cin = cfg.bottleneck if (bi == 0 and li == 0) else cfg.hidden
            yield bi, li, cin


def tcn_init(cfg: TcnConfig, seed: int) -> ModelParams:
    """Deterministic init: uniform +-1/sqrt(fan_in), norm gain 1 / bias 0."""
    rng = np.random.default_rng(int(seed))

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return parameter(rng.uniform(-bound, bound, size=shape))

    tensors: Dict[str, Tensor] = {}
    tensors["norm/gain"] = parameter(np.ones(cfg.input_dim))
    tensors["norm/bias"] = parameter(np.zeros(cfg.input_dim))
    tensors["bottleneck/w"] = uniform(cfg.input_dim,
                                      (cfg.input_dim, cfg.bottleneck))
    tensors["bottleneck/b"] = uniform(cfg.input_dim, (cfg.bottleneck,))
    for bi, li, cin in _conv_layer_names(cfg):
        fan = cfg.kernel * cin
        tensors[f"block{bi}/conv{li}/w"] = uniform(
            fan, (cfg.kernel, cin, cfg.hidden))
        tensors[f"block{bi}/conv{li}/b"] = uniform(fan, (cfg.hidden,))
    if cfg.bottleneck != cfg.hidden:
        tensors["block0/res/w"] = uniform(cfg.bottleneck,
                                          (cfg.bottleneck, cfg.hidden))
    tensors["out/w"] = uniform(cfg.hidden, (cfg.hidden, cfg.n_classes))
    tensors["out/b"] = uniform(cfg.hidden, (cfg.n_classes,))
    return ModelParams(tensors=tensors, config=cfg, seed=int(seed))


def layer_norm(x, gain, bias, eps=_NORM_EPS):
    """Per-frame normalization over the feature axis, differentiable."""
    x = as_tensor(x)
    mu = tmean(x, axis=1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=1, keepdims=True)
    return centered / tsqrt(var + eps) * gain + bias


def causal_conv1d(x, w, b, dilation):
    """Dilated causal conv over time: (T, Cin) x (k, Cin, Cout) -> (T, Cout).

    The input is left-padded with (k-1)*dilation zero frames so tap j reads
    (k-1-j)*dilation frames into the past and the last tap reads the current
    frame.
    """
    k, cin, _ = w.shape
    t = x.shape[0]
    pad = (k - 1) * int(dilation)
    if pad:
        x = concat([Tensor(np.zeros((pad, cin))), x], axis=0)
    out = None
    for j in range(k):
        lo = j * int(dilation)
        tap = getitem(x, slice(lo, lo + t)) @ getitem(w, j)
        out = tap if out is None else out + tap
    return out + b


def tcn_forward(params: ModelParams, x) -> Tensor:
    """Logits (T, n_classes) for a feature sequence (T, input_dim)."""
    cfg = params.config
    x = as_tensor(x)
    if x.ndim != 2:
        raise ArgumentError("expected a 2-D (frames, features) input")
    if x.shape[1] != cfg.input_dim:
        raise ArgumentError(
            f"feature width {x.shape[1]} does not match input_dim "
            f"{cfg.input_dim}")
    if x.shape[0] < 1:
        raise ArgumentError("need at least one frame")
    t = params.tensors
    h = layer_norm(x, t["norm/gain"], t["norm/bias"])
    h = relu(h @ t["bottleneck/w"] + t["bottleneck/b"])
    for bi in range(cfg.blocks):
        skip = h
        for li in range(cfg.layers_per_block):
            h = relu(causal_conv1d(h, t[f"block{bi}/conv{li}/w"],
                                   t[f"block{bi}/conv{li}/b"], 2 ** li))
        res_key = f"block{bi}/res/w"
        if bi == 0 and res_key in t.keys():
            skip = skip @ t[res_key]
        h = h + skip
    return h @ t["out/w"] + t["out/b"]


def posteriors(logits) -> np.ndarray:
    """Rowwise stable softmax of logits, as a plain (T, n_classes) array.

    Inference-side helper; the training losses work on logits directly.
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(
        logits, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError("non-finite logits")
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def vad_osd_scores(probs):
    """Per-frame detection scores from 3-class posteriors.

    Speech activity is the mass on the one-speaker and overlap classes
    combined; overlap is the mass on the overlap class alone.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise ArgumentError("expected (frames, 3) posteriors")
    return probs[:, 1] + probs[:, 2], probs[:, 2]


def decisions(probs) -> np.ndarray:
    """Argmax class per frame; ties resolve toward the lower class index."""
    probs = np.asarray(probs, dtype=np.float64)
    return np.argmax(probs, axis=-1).astype(np.int64)
