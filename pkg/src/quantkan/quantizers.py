"""Fake-quantization operators with straight-through-estimator gradients.

Six schemes share one state container: a fixed affine quantizer driven by
observed statistics (uniform), learned step size (LSQ), learned step size
plus offset (LSQ+), learned activation clipping (PACT), the non-adaptive
tanh/clip scheme (DoReFa), and learned pruning/clipping intervals (QIL).
Weights use signed ranges with zero offset (except LSQ+); activations use
unsigned ranges. ``bits == 32`` means identity pass-through.

Rounding is half-away-from-zero everywhere so integer codes are bit-exact
across platforms.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .tensor import Tensor, round_half_away

logger = logging.getLogger(__name__)

EPS = 1e-8
SUPPORTED_BITS = (2, 3, 4, 8, 32)

UNIFORM = "uniform"
LSQ = "lsq"
LSQ_PLUS = "lsq+"
PACT = "pact"
DOREFA = "dorefa"
QIL = "qil"
QAT_METHODS = (UNIFORM, LSQ, LSQ_PLUS, PACT, DOREFA, QIL)

PER_TENSOR = "per_tensor"
PER_CHANNEL = "per_channel"


def code_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return 0, 2 ** bits - 1


@dataclass
class BitConfig:
    weight_bits: int
    act_bits: int

    def token(self) -> str:
        return f"w{self.weight_bits}a{self.act_bits}"


_BIT_TOKEN = re.compile(r"^w(\d+)a(\d+)$")


def parse_bit_config(token: str) -> BitConfig:
    """Parse a "wXaY" token; X, Y must be one of 2/3/4/8/32."""
    m = _BIT_TOKEN.match(token)
    if not m:
        raise ParseError(
            f"malformed bit token {token!r}; expected w{{2|3|4|8|32}}a{{2|3|4|8|32}}")
    w, a = int(m.group(1)), int(m.group(2))
    if w not in SUPPORTED_BITS or a not in SUPPORTED_BITS:
        raise ParseError(
            f"unsupported bit widths in {token!r}; valid widths are {SUPPORTED_BITS}")
    return BitConfig(w, a)


@dataclass
class QuantizerState:
    """Per-branch quantizer parameters; learnable fields are Tensors."""

    method: str
    bits: int
    signed: bool
    granularity: str = PER_TENSOR
    s: Tensor | None = None
    z: Tensor | None = None
    alpha: Tensor | None = None
    c: Tensor | None = None
    d: Tensor | None = None
    gamma: float = 1.0
    initialized: bool = False

    def __post_init__(self):
        if self.method not in QAT_METHODS:
            raise ConfigError(f"unknown quantizer method {self.method!r}")
        if self.bits != 32 and self.bits < 2:
            raise ConfigError("bits must be >= 2 (or 32 for bypass)")
        if self.granularity not in (PER_TENSOR, PER_CHANNEL):
            raise ConfigError(f"unknown granularity {self.granularity!r}")

    @property
    def bypass(self) -> bool:
        return self.bits == 32

    @property
    def q_min(self) -> int:
        return code_range(self.bits, self.signed)[0]

    @property
    def q_max(self) -> int:
        return code_range(self.bits, self.signed)[1]

    def learnable_params(self) -> list[Tensor]:
        if self.bypass:
            return []
        if self.method == LSQ:
            return [self.s] if self.s is not None else []
        if self.method == LSQ_PLUS:
            return [t for t in (self.s, self.z) if t is not None]
        if self.method == PACT:
            return [self.alpha] if self.alpha is not None else []
        if self.method == QIL:
            return [t for t in (self.c, self.d) if t is not None]
        return []

    def clamp_params(self):
        """Re-impose positivity floors after an optimizer step."""
        if self.s is not None:
            np.maximum(self.s.data, EPS, out=self.s.data)
        if self.alpha is not None:
            np.maximum(self.alpha.data, EPS, out=self.alpha.data)
        if self.d is not None:
            np.maximum(self.d.data, EPS, out=self.d.data)
        if self.c is not None and self.d is not None:
            if np.any(self.c.data - self.d.data <= 0):
                logger.warning("qil interval collapsed (c - d <= 0); clamping")
            np.maximum(self.c.data, self.d.data + EPS, out=self.c.data)

    # -- initialization --------------------------------------------------

    def _reduce(self, x: np.ndarray, fn) -> np.ndarray:
        """Statistic over the tensor, or per output channel for weights."""
        if self.granularity == PER_CHANNEL and x.ndim >= 2:
            return fn(x.reshape(x.shape[0], -1), 1)[:, None]
        return np.asarray(fn(x.reshape(-1), 0))

    def init_from(self, x: np.ndarray):
        """Set initial parameters from a warm-up tensor (idempotent)."""
        if self.initialized or self.bypass or self.method == DOREFA:
            self.initialized = True
            return
        amean = self._reduce(x, lambda v, ax: np.abs(v).mean(axis=ax))
        xmin = self._reduce(x, lambda v, ax: v.min(axis=ax))
        xmax = self._reduce(x, lambda v, ax: v.max(axis=ax))
        if self.method == LSQ:
            self.s = Tensor(np.maximum(lsq_init_value(amean, self.q_max), EPS),
                            requires_grad=True)
        elif self.method == LSQ_PLUS:
            span = np.maximum((xmax - xmin) / (self.q_max - self.q_min), EPS)
            self.s = Tensor(span, requires_grad=True)
            self.z = Tensor(self.q_min - round_half_away(xmin / span),
                            requires_grad=True)
        elif self.method == UNIFORM:
            if self.signed:
                absmax = self._reduce(x, lambda v, ax: np.abs(v).max(axis=ax))
                self.s = Tensor(np.maximum(absmax / self.q_max, EPS))
                self.z = Tensor(np.zeros_like(absmax))
            else:
                span = np.maximum((xmax - xmin) / (self.q_max - self.q_min), EPS)
                self.s = Tensor(span)
                self.z = Tensor(self.q_min - round_half_away(xmin / span))
        elif self.method == PACT:
            self.alpha = Tensor(np.maximum(np.asarray(xmax, dtype=np.float64), EPS),
                                requires_grad=True)
        elif self.method == QIL:
            amax = self._reduce(x, lambda v, ax: np.abs(v).max(axis=ax))
            amin = self._reduce(x, lambda v, ax: np.abs(v).min(axis=ax))
            c = (amax + amin) / 2.0
            d = np.maximum((amax - amin) / 2.0, EPS)
            self.c = Tensor(np.maximum(c, d + EPS), requires_grad=True)
            self.d = Tensor(d, requires_grad=True)
        self.initialized = True

    # -- application -------------------------------------------------------

    def apply(self, x: Tensor, is_weight: bool) -> Tensor:
        """Fake-quantize ``x`` under this state; 32-bit returns ``x`` as-is."""
        if self.bypass:
            return x
        if not self.initialized:
            self.init_from(x.data)
        if self.method == UNIFORM:
            return fake_quant_affine(x, self.s.data, self.z.data,
                                     self.q_min, self.q_max)
        if self.method == LSQ:
            return lsq_quantize(x, self)
        if self.method == LSQ_PLUS:
            return lsqplus_quantize(x, self)
        if self.method == PACT:
            return pact_activation(x, self)
        if self.method == DOREFA:
            return dorefa_weight(x, self.bits) if is_weight \
                else dorefa_activation(x, self.bits)
        if is_weight:
            return qil_transform(x, self)
        return qil_activation(x, self)


def make_quantizer(method: str, bits: int, for_weights: bool,
                   granularity: str = PER_TENSOR) -> QuantizerState:
    """State with the standard signedness: weights signed, activations not."""
    return QuantizerState(method=method, bits=bits, signed=for_weights,
                          granularity=granularity if for_weights else PER_TENSOR)


# -- core affine fake-quant -----------------------------------------------


def lsq_init_value(abs_mean, q_max: int):
    """LSQ step-size initialization: 2 E|x| / sqrt(q_max)."""
    return 2.0 * np.asarray(abs_mean) / np.sqrt(q_max)


def fake_quant_affine(x: Tensor, s, z, q_min: int, q_max: int) -> Tensor:
    """Quantize-dequantize on a fixed affine grid; STE gradient to x only."""
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(s <= 0):
        raise ContractError("fake_quant_affine requires s > 0")
    v = x.data / s + z
    codes = np.clip(round_half_away(v), q_min, q_max)
    out = (codes - z) * s
    inside = (v >= q_min) & (v <= q_max)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * inside)

    return Tensor.from_op(out, (x,), backward, "fake_quant_affine")


def _grad_scale(x: np.ndarray, state: QuantizerState) -> float:
    n = x.size if state.granularity == PER_TENSOR else x.size / x.shape[0]
    return 1.0 / np.sqrt(n * state.q_max)


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Sum an elementwise gradient down to a parameter's shape."""
    if grad.shape == tuple(shape):
        return grad
    if len(shape) == 0 or all(n == 1 for n in shape):
        return np.asarray(grad.sum()).reshape(shape)
    return grad.reshape(grad.shape[0], -1).sum(axis=1)[:, None]


def lsq_quantize(x: Tensor, state: QuantizerState) -> Tensor:
    """Learned-step-size quantization with the LSQ gradient rule."""
    s = state.s
    sd = np.maximum(s.data, EPS)
    q_min, q_max = state.q_min, state.q_max
    v = x.data / sd
    codes = np.clip(round_half_away(v), q_min, q_max)
    out = codes * sd
    inside = (v >= q_min) & (v <= q_max)
    g = _grad_scale(x.data, state)

    def backward(up):
        if x.requires_grad:
            x.accumulate_grad(up * inside)
        if s.requires_grad:
            local = codes - v * inside
            s.accumulate_grad(_reduce_to(up * local, s.data.shape) * g)

    return Tensor.from_op(out, (x, s), backward, "lsq_quantize")


def lsqplus_quantize(x: Tensor, state: QuantizerState) -> Tensor:
    """Affine variant of LSQ with a learnable offset absorbing asymmetry."""
    s, z = state.s, state.z
    sd = np.maximum(s.data, EPS)
    zd = z.data
    q_min, q_max = state.q_min, state.q_max
    v = x.data / sd + zd
    codes = np.clip(round_half_away(v), q_min, q_max)
    out = (codes - zd) * sd
    inside = (v >= q_min) & (v <= q_max)
    g = _grad_scale(x.data, state)

    def backward(up):
        if x.requires_grad:
            x.accumulate_grad(up * inside)
        if s.requires_grad:
            local = (codes - zd) - (x.data / sd) * inside
            s.accumulate_grad(_reduce_to(up * local, s.data.shape) * g)
        if z.requires_grad:
            local = (inside - 1.0) * sd
            z.accumulate_grad(_reduce_to(up * local, z.data.shape) * g)

    return Tensor.from_op(out, (x, s, z), backward, "lsqplus_quantize")


def pact_activation(x: Tensor, state: QuantizerState) -> Tensor:
    """Clamp to [0, alpha], then quantize to 2^b uniform levels."""
    alpha = state.alpha
    ad = np.maximum(alpha.data, EPS)
    levels = 2 ** state.bits - 1
    y = np.clip(x.data, 0.0, ad)
    step = ad / levels
    out = round_half_away(y / step) * step
    pass_x = (x.data > 0.0) & (x.data < ad)
    at_clip = x.data >= ad

    def backward(up):
        if x.requires_grad:
            x.accumulate_grad(up * pass_x)
        if alpha.requires_grad:
            alpha.accumulate_grad(_reduce_to(up * at_clip, alpha.data.shape))

    return Tensor.from_op(out, (x, alpha), backward, "pact_activation")


def dorefa_weight(w: Tensor, bits: int) -> Tensor:
    """tanh-normalized weight quantization onto 2^b levels in [-1, 1].

    The max-normalizer is treated as a constant in the backward pass.
    """
    tw = np.tanh(w.data)
    denom = 2.0 * np.abs(tw).max() + EPS
    t = tw / denom + 0.5
    levels = 2 ** bits - 1
    q = round_half_away(t * levels) / levels
    out = 2.0 * q - 1.0

    def backward(up):
        if w.requires_grad:
            w.accumulate_grad(up * 2.0 * (1.0 - tw * tw) / denom)

    return Tensor.from_op(out, (w,), backward, "dorefa_weight")


def dorefa_activation(x: Tensor, bits: int) -> Tensor:
    """Clamp to [0, 1], then quantize with 2^b - 1 uniform steps."""
    levels = 2 ** bits - 1
    y = np.clip(x.data, 0.0, 1.0)
    out = round_half_away(y * levels) / levels
    inside = (x.data > 0.0) & (x.data < 1.0)

    def backward(up):
        if x.requires_grad:
            x.accumulate_grad(up * inside)

    return Tensor.from_op(out, (x,), backward, "dorefa_activation")


def qil_transform(w: Tensor, state: QuantizerState) -> Tensor:
    """Prune below c-d, clip above c+d, power-map between, then quantize.

    The transformed value lies in [-1, 1] and is quantized symmetrically
    with 2^(b-1)-1 positive levels.
    """
    c, d = state.c, state.d
    dd = np.maximum(d.data, EPS)
    cd = np.maximum(c.data, dd + EPS)
    lo = cd - dd
    gamma = state.gamma
    a = np.abs(w.data)
    sign = np.sign(w.data)
    mid = (a > lo) & (a < cd + dd)
    clipped = a >= cd + dd
    r = np.where(mid, (a - lo) / (2.0 * dd), 0.0)
    pre = np.where(clipped, sign, sign * np.where(mid, r ** gamma, 0.0))
    q_max = 2 ** (state.bits - 1) - 1
    step = 1.0 / q_max
    codes = np.clip(round_half_away(pre / step), -q_max, q_max)
    out = codes * step
    rpow1 = np.where(mid, r ** (gamma - 1.0), 0.0)

    def backward(up):
        if w.requires_grad:
            w.accumulate_grad(up * gamma * rpow1 / (2.0 * dd) * mid)
        if c.requires_grad:
            local = sign * gamma * rpow1 * (-1.0 / (2.0 * dd)) * mid
            c.accumulate_grad(_reduce_to(up * local, c.data.shape))
        if d.requires_grad:
            local = sign * gamma * rpow1 * ((cd - a) / (2.0 * dd * dd)) * mid
            d.accumulate_grad(_reduce_to(up * local, d.data.shape))

    return Tensor.from_op(out, (w, c, d), backward, "qil_transform")


def qil_activation(x: Tensor, state: QuantizerState) -> Tensor:
    """Unsigned analog of the QIL transform for activation tensors."""
    c, d = state.c, state.d
    dd = np.maximum(d.data, EPS)
    cd = np.maximum(c.data, dd + EPS)
    lo = cd - dd
    gamma = state.gamma
    a = x.data
    mid = (a > lo) & (a < cd + dd)
    clipped = a >= cd + dd
    r = np.where(mid, (a - lo) / (2.0 * dd), 0.0)
    pre = np.where(clipped, 1.0, np.where(mid, r ** gamma, 0.0))
    levels = 2 ** state.bits - 1
    out = round_half_away(pre * levels) / levels
    rpow1 = np.where(mid, r ** (gamma - 1.0), 0.0)

    def backward(up):
        if x.requires_grad:
            x.accumulate_grad(up * gamma * rpow1 / (2.0 * dd) * mid)
        if c.requires_grad:
            local = gamma * rpow1 * (-1.0 / (2.0 * dd)) * mid
            c.accumulate_grad(_reduce_to(up * local, c.data.shape))
        if d.requires_grad:
            local = gamma * rpow1 * ((cd - a) / (2.0 * dd * dd)) * mid
            d.accumulate_grad(_reduce_to(up * local, d.data.shape))

    return Tensor.from_op(out, (x, c, d), backward, "qil_activation")
