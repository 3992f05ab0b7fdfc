"""Basis-function evaluation and the dual-branch KAN layer.

A layer computes ``y = base(x) @ W_b.T + flatten(Phi(x)) @ W_s.T`` where
``base`` is SiLU (or identity) and ``Phi`` is one of three basis families:
uniform B-splines (EfficientKAN convention), Gaussian RBFs (FastKAN), or
Legendre/Gram polynomials over a tanh-squashed input (KAGN). Basis
evaluation is a single tape node with an analytic input derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Rng, Tensor, linear

BSPLINE = "bspline"
RBF = "rbf"
GRAM = "gram"


@dataclass
class BasisConfig:
    kind: str = BSPLINE
    grid_size: int = 5
    spline_order: int = 3
    domain: tuple[float, float] = (-1.0, 1.0)
    degree: int = 3  # Gram only

    def __post_init__(self):
        if self.kind not in (BSPLINE, RBF, GRAM):
            raise ConfigError(f"unknown basis kind {self.kind!r}")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be >= 1")
        if self.spline_order < 0:
            raise ConfigError("spline_order must be >= 0")
        if self.domain[0] >= self.domain[1]:
            raise ConfigError("domain must be a nonempty interval")
        if self.kind == GRAM and tuple(self.domain) != (-1.0, 1.0):
            raise ConfigError("Gram basis requires domain [-1, 1]")

    @property
    def num_basis(self) -> int:
        if self.kind == GRAM:
            return self.degree + 1
        return self.grid_size + self.spline_order

    def knots(self) -> np.ndarray:
        """Uniform knot vector with ``spline_order`` extension knots per side."""
        lo, hi = self.domain
        step = (hi - lo) / self.grid_size
        idx = np.arange(-self.spline_order, self.grid_size + self.spline_order + 1)
        return lo + idx * step

    def rbf_centers(self) -> tuple[np.ndarray, float]:
        lo, hi = self.domain
        n = self.num_basis
        centers = np.linspace(lo, hi, n)
        width = (hi - lo) / (n - 1) if n > 1 else (hi - lo)
        return centers, width


def silu(x: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (sig + x.data * sig * (1.0 - sig)))

    return Tensor.from_op(data, (x,), backward, "silu")


def _bspline_arrays(xd: np.ndarray, cfg: BasisConfig):
    """Cox-de Boor bases of order ``spline_order`` plus their x-derivative."""
    knots = cfg.knots()
    k = cfg.spline_order
    u = xd[..., None]
    bases = ((u >= knots[:-1]) & (u < knots[1:])).astype(np.float64)
    prev = bases
    for order in range(1, k + 1):
        prev = bases
        left = (u - knots[: -order - 1]) / (knots[order:-1] - knots[: -order - 1])
        right = (knots[order + 1:] - u) / (knots[order + 1:] - knots[1:-order])
        bases = left * prev[..., :-1] + right * prev[..., 1:]
    if k == 0:
        dbases = np.zeros_like(bases)
    else:
        left_den = knots[k:-1] - knots[: -k - 1]
        right_den = knots[k + 1:] - knots[1:-k]
        dbases = k * (prev[..., :-1] / left_den - prev[..., 1:] / right_den)
    return bases, dbases


def bspline_basis(x: Tensor, cfg: BasisConfig) -> Tensor:
    """B-spline expansion [batch, in] -> [batch, in, G + k]."""
    bases, dbases = _bspline_arrays(x.data, cfg)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad((g * dbases).sum(axis=-1))

    return Tensor.from_op(bases, (x,), backward, "bspline_basis")


def rbf_basis(x: Tensor, cfg: BasisConfig) -> Tensor:
    """Gaussian bumps at uniform centers, width = center spacing."""
    centers, width = cfg.rbf_centers()
    z = (x.data[..., None] - centers) / width
    data = np.exp(-z * z)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad((g * data * (-2.0 * z / width)).sum(axis=-1))

    return Tensor.from_op(data, (x,), backward, "rbf_basis")


def gram_basis(x: Tensor, cfg: BasisConfig) -> Tensor:
    """Legendre polynomials P_0..P_degree via the three-term recurrence.

    Inputs are expected in [-1, 1]; the layer applies a tanh squash first.
    """
    xd = x.data
    deg = cfg.degree
    polys = [np.ones_like(xd)]
    dpolys = [np.zeros_like(xd)]
    if deg >= 1:
        polys.append(xd.copy())
        dpolys.append(np.ones_like(xd))
    for n in range(1, deg):
        nxt = ((2 * n + 1) * xd * polys[n] - n * polys[n - 1]) / (n + 1)
        polys.append(nxt)
        dpolys.append(dpolys[n - 1] + (2 * n + 1) * polys[n])
    data = np.stack(polys, axis=-1)
    dstack = np.stack(dpolys, axis=-1)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad((g * dstack).sum(axis=-1))

    return Tensor.from_op(data, (x,), backward, "gram_basis")


def basis_features(x: Tensor, cfg: BasisConfig) -> Tensor:
    """Dispatch to the configured basis; Gram gets the tanh squash."""
    if cfg.kind == BSPLINE:
        return bspline_basis(x, cfg)
    if cfg.kind == RBF:
        return rbf_basis(x, cfg)
    return gram_basis(x.tanh(), cfg)


class KanLayer:
    """Dual-branch layer: linear base path plus basis-expansion path."""

    def __init__(self, in_features: int, out_features: int, basis: BasisConfig,
                 rng: Rng, base_activation: str = "silu"):
        if base_activation not in ("silu", "identity"):
            raise ConfigError(f"unknown base activation {base_activation!r}")
        self.in_features = in_features
        self.out_features = out_features
        self.basis = basis
        self.base_activation = base_activation
        nb = basis.num_basis
        bound = 1.0 / np.sqrt(in_features)
        self.W_b = Tensor(rng.uniform((out_features, in_features), -bound, bound),
                          requires_grad=True)
        self.W_s = Tensor(rng.normal((out_features, in_features * nb),
                                     std=0.1 / np.sqrt(in_features * nb)),
                          requires_grad=True)

    def base_features(self, x: Tensor) -> Tensor:
        return silu(x) if self.base_activation == "silu" else x

    def spline_features(self, x: Tensor) -> Tensor:
        phi = basis_features(x, self.basis)
        return phi.reshape(x.shape[0], self.in_features * self.basis.num_basis)

    def forward(self, x: Tensor) -> Tensor:
        return kan_forward(self, x)

    def parameters(self) -> list[Tensor]:
        return [self.W_b, self.W_s]

    def clone(self) -> "KanLayer":
        dup = object.__new__(KanLayer)
        dup.in_features = self.in_features
        dup.out_features = self.out_features
        dup.basis = self.basis
        dup.base_activation = self.base_activation
        dup.W_b = Tensor(self.W_b.data.copy(), requires_grad=True)
        dup.W_s = Tensor(self.W_s.data.copy(), requires_grad=True)
        return dup


def kan_forward(layer: KanLayer, x: Tensor) -> Tensor:
    """Full-precision dual-branch forward pass."""
    if x.data.ndim != 2 or x.shape[1] != layer.in_features:
        raise DimensionError(
            f"expected input [batch, {layer.in_features}], got {x.shape}")
    base_out = linear(layer.base_features(x), layer.W_b)
    spline_out = linear(layer.spline_features(x), layer.W_s)
    return base_out + spline_out


class KanMlp:
    """Stack of KanLayers; the paper-scale classifier is two layers deep."""

    def __init__(self, layers: list[KanLayer]):
        self.layers = layers

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_features] + [l.out_features for l in self.layers]

    @property
    def basis(self) -> BasisConfig:
        return self.layers[0].basis

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def build_kan_mlp(widths: list[int], cfg: BasisConfig, rng: Rng,
                  base_activation: str = "silu") -> KanMlp:
    """Stacked KAN layers with deterministic seed-driven initialization."""
    if len(widths) < 2:
        raise ConfigError("need at least input and output widths")
    layers = [
        KanLayer(w_in, w_out, cfg, rng, base_activation=base_activation)
        for w_in, w_out in zip(widths[:-1], widths[1:])
    ]
    return KanMlp(layers)
