"""Branch-aware quantization wrappers and the training loop.

A wrapped layer applies three independent quantizer states: one to the
base weights, one to the spline weights, and one activation quantizer
used at all three activation sites (the layer input, the post-activation
base features, and the flattened basis features). Quantizer parameters
train jointly with the weights at a 10x smaller learning rate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .layers import KanLayer, KanMlp
from .quantizers import (DOREFA, PACT, PER_TENSOR, QAT_METHODS, BitConfig,
                         QuantizerState, make_quantizer)
from .tensor import Rng, Tensor, cross_entropy, first_nonfinite, linear, no_grad

QUANT_LR_SCALE = 0.1


@dataclass
class BranchQuantSpec:
    """Three never-aliased quantizer states for one wrapped layer."""

    base_weight_q: QuantizerState
    spline_weight_q: QuantizerState
    activation_q: QuantizerState
    method: str
    bits: BitConfig

    def __post_init__(self):
        states = (self.base_weight_q, self.spline_weight_q, self.activation_q)
        if len({id(s) for s in states}) != 3:
            raise ConfigError("branch quantizer states must be distinct objects")

    def states(self) -> tuple[QuantizerState, QuantizerState, QuantizerState]:
        return self.base_weight_q, self.spline_weight_q, self.activation_q

    def learnable_params(self) -> list[Tensor]:
        return [p for s in self.states() for p in s.learnable_params()]


def make_branch_spec(method: str, bits: BitConfig,
                     weight_granularity: str = PER_TENSOR) -> BranchQuantSpec:
    """Quantizer states for one layer. PACT clips activations only, so its
    weight branches fall back to the DoReFa scheme (the method's usual
    companion for weights)."""
    if method not in QAT_METHODS:
        raise ConfigError(
            f"unsupported QAT method {method!r}; choose one of {QAT_METHODS}")
    weight_method = DOREFA if method == PACT else method
    return BranchQuantSpec(
        base_weight_q=make_quantizer(weight_method, bits.weight_bits,
                                     for_weights=True,
                                     granularity=weight_granularity),
        spline_weight_q=make_quantizer(weight_method, bits.weight_bits,
                                       for_weights=True,
                                       granularity=weight_granularity),
        activation_q=make_quantizer(method, bits.act_bits, for_weights=False),
        method=method,
        bits=bits,
    )


class QuantKanLayer:
    """A KanLayer plus its branch quantizer states.

    PTQ may install per-column feature scales (AWQ): weights were
    multiplied by the scale, so features are divided by it at run time.
    """

    def __init__(self, inner: KanLayer, spec: BranchQuantSpec):
        self.inner = inner
        self.spec = spec
        self.base_feature_scale: np.ndarray | None = None
        self.spline_feature_scale: np.ndarray | None = None
        # weight statistics are available now; activations wait for the
        # warm-up batch
        spec.base_weight_q.init_from(inner.W_b.data)
        spec.spline_weight_q.init_from(inner.W_s.data)

    def forward(self, x: Tensor) -> Tensor:
        return quant_forward(self, x)

    def parameters(self) -> list[Tensor]:
        return self.inner.parameters()

    def quant_parameters(self) -> list[Tensor]:
        return self.spec.learnable_params()


def quant_forward(layer: QuantKanLayer, x: Tensor) -> Tensor:
    """Quantized dual-branch forward, transcribing the quantized equation:
    the input is quantized once, each branch's features are re-quantized by
    the same activation state, and each weight matrix is quantized by its
    own state."""
    inner = layer.inner
    act_q = layer.spec.activation_q
    xq = act_q.apply(x, is_weight=False)
    base_feats = inner.base_features(xq)
    if layer.base_feature_scale is not None:
        base_feats = base_feats * Tensor(1.0 / layer.base_feature_scale)
    base_feats = act_q.apply(base_feats, is_weight=False)
    w_b = layer.spec.base_weight_q.apply(inner.W_b, is_weight=True)
    base_out = linear(base_feats, w_b)
    spline_feats = inner.spline_features(xq)
    if layer.spline_feature_scale is not None:
        spline_feats = spline_feats * Tensor(1.0 / layer.spline_feature_scale)
    spline_feats = act_q.apply(spline_feats, is_weight=False)
    w_s = layer.spec.spline_weight_q.apply(inner.W_s, is_weight=True)
    spline_out = linear(spline_feats, w_s)
    return base_out + spline_out


class QuantKanMlp:
    """Stack of quantized layers sharing the KanMlp interface."""

    def __init__(self, layers: list[QuantKanLayer]):
        self.layers = layers

    @property
    def widths(self) -> list[int]:
        return ([self.layers[0].inner.in_features]
                + [l.inner.out_features for l in self.layers])

    @property
    def basis(self):
        return self.layers[0].inner.basis

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def quant_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.quant_parameters()]

    def quant_states(self) -> list[QuantizerState]:
        return [s for layer in self.layers for s in layer.spec.states()]


def wrap_model(model: KanMlp, method: str, bits: BitConfig, rng: Rng,
               weight_granularity: str = PER_TENSOR) -> QuantKanMlp:
    """Clone the model and wrap every layer with branch quantizers.

    Weight quantizers initialize from the cloned weights immediately;
    activation quantizers initialize from the first forward batch. ``rng``
    is reserved for stochastic initializers; current schemes are
    statistics-driven.
    """
    del rng
    layers = [
        QuantKanLayer(layer.clone(), make_branch_spec(method, bits,
                                                      weight_granularity))
        for layer in model.layers
    ]
    return QuantKanMlp(layers)


# -- optimizers -----------------------------------------------------------


class Sgd:
    def __init__(self, groups: list[dict]):
        self.groups = groups

    def zero_grad(self):
        for group in self.groups:
            for p in group["params"]:
                p.zero_grad()

    def step(self, lr_factor: float = 1.0):
        for group in self.groups:
            lr = group["lr"] * lr_factor
            for p in group["params"]:
                if p.grad is not None:
                    p.data -= lr * p.grad


class Adam:
    def __init__(self, groups: list[dict], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.state = {}
        for group in self.groups:
            for p in group["params"]:
                self.state[id(p)] = (np.zeros_like(p.data), np.zeros_like(p.data))

    def zero_grad(self):
        for group in self.groups:
            for p in group["params"]:
                p.zero_grad()

    def step(self, lr_factor: float = 1.0):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for group in self.groups:
            lr = group["lr"] * lr_factor
            for p in group["params"]:
                if p.grad is None:
                    continue
                m, v = self.state[id(p)]
                m *= self.beta1
                m += (1 - self.beta1) * p.grad
                v *= self.beta2
                v += (1 - self.beta2) * (p.grad * p.grad)
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs/batch_size must be >= 1 and lr > 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class LogRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    wall_seconds: float

    def csv(self) -> str:
        return (f"{self.epoch},{self.split},{self.loss:.6f},"
                f"{self.accuracy:.6f},{self.wall_seconds:.3f}")


LOG_HEADER = "epoch,split,loss,accuracy,wall_seconds"


def _make_optimizer(model, cfg: TrainConfig):
    groups = [{"params": model.parameters(), "lr": cfg.learning_rate}]
    if hasattr(model, "quant_parameters"):
        qparams = model.quant_parameters()
        if qparams:
            groups.append({"params": qparams,
                           "lr": cfg.learning_rate * QUANT_LR_SCALE})
    return Adam(groups) if cfg.optimizer == "adam" else Sgd(groups)


def train(model, data, cfg: TrainConfig) -> list[LogRow]:
    """Minimize cross-entropy; quantizer parameters are learned alongside.

    Raises :class:`TrainingDiverged` naming the first non-finite tensor if
    the loss goes NaN/Inf. Deterministic for a fixed seed.
    """
    n = len(data.labels)
    if n == 0:
        raise ConfigError("training dataset is empty")
    rng = Rng(cfg.seed)
    optimizer = None  # built after warm-up so quantizer params exist
    log: list[LogRow] = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        if cfg.lr_schedule == "cosine":
            lr_factor = 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        else:
            lr_factor = 1.0
        order = rng.permutation(n)
        losses = []
        correct = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x = Tensor(data.images[idx])
            labels = data.labels[idx]
            logits = model.forward(x)
            loss = cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; first bad tensor: "
                    f"{first_nonfinite(loss)}")
            if optimizer is None:
                # the first forward initialized activation quantizers
                optimizer = _make_optimizer(model, cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr_factor)
            if hasattr(model, "quant_states"):
                for state in model.quant_states():
                    state.clamp_params()
            losses.append(float(loss.data))
            correct += int((logits.data.argmax(axis=1) == labels).sum())
        log.append(LogRow(epoch=epoch, split="train",
                          loss=float(np.mean(losses)),
                          accuracy=correct / n,
                          wall_seconds=time.perf_counter() - start))
    return log


def evaluate(model, data, batch_size: int = 512) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    n = len(data.labels)
    if n == 0:
        raise ConfigError("evaluation dataset is empty")
    correct = 0
    with no_grad():
        for lo in range(0, n, batch_size):
            x = Tensor(data.images[lo:lo + batch_size])
            logits = model.forward(x)
            correct += int((logits.data.argmax(axis=1)
                            == data.labels[lo:lo + batch_size]).sum())
    return correct / n
