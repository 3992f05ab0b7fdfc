"""Post-training quantization of trained KAN models.

Every solver treats the two branches of a layer as separate units: range
observers and round-to-nearest form the uniform baseline; AdaRound and
BRECQ learn per-element rounding against branch/layer reconstruction
error; GPTQ runs damped least-squares column compensation; AWQ rescales
weight columns by activation magnitude; HAWQ-style allocation spends a
global bit budget by Hessian-trace sensitivity. Activations are handled
by observers at the configured bit-width.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DecompositionError
from .layers import KanLayer, KanMlp
from .qat import QuantKanLayer, QuantKanMlp, evaluate, make_branch_spec
from .quantizers import (EPS, UNIFORM, BitConfig, QuantizerState, code_range,
                         make_quantizer, round_half_away)
from .tensor import Rng, Tensor, cholesky, cross_entropy, no_grad

logger = logging.getLogger(__name__)

PTQ_METHODS = ("uniform", "adaround", "gptq", "brecq", "awq", "hawq")

BASE = "base"
SPLINE = "spline"

# AdaRound rectified-sigmoid constants and annealing schedule: no
# regularizer during warm-up, beta annealed to its endpoint by
# ANNEAL_END so the final stretch runs at full binarization pressure
ZETA = 1.1
GAMMA = -0.1
BETA_START = 18.0
BETA_END = 2.0
WARMUP_FRAC = 0.2
ANNEAL_END = 0.6
ROUND_LAMBDA = 0.01
BINARY_TOL = 1e-3


# -- calibration -------------------------------------------------------------


@dataclass
class LayerCalibration:
    inputs: np.ndarray   # FP inputs to this layer [n, in]
    outputs: np.ndarray  # FP outputs of this layer [n, out]


@dataclass
class CalibrationBatch:
    layers: list[LayerCalibration]
    labels: np.ndarray
    sample_count: int


def collect_calibration(model: KanMlp, data, n: int) -> CalibrationBatch:
    """Cache every layer's FP inputs/outputs on the first ``n`` samples."""
    if not 1 <= n <= len(data.labels):
        raise ConfigError(
            f"calibration size {n} outside [1, {len(data.labels)}]")
    x = data.images[:n]
    entries = []
    with no_grad():
        for layer in model.layers:
            out = layer.forward(Tensor(x)).data
            entries.append(LayerCalibration(inputs=x, outputs=out))
            x = out
    return CalibrationBatch(entries, labels=data.labels[:n].copy(),
                            sample_count=n)


# -- observers ----------------------------------------------------------------


@dataclass
class ObserverStats:
    min: float
    max: float
    abs_mean: float
    percentile_lo: float
    percentile_hi: float
    histogram: np.ndarray = field(repr=False)

    HIST_BINS = 2048


def observer_stats(x: np.ndarray, percentile: float = 99.9) -> ObserverStats:
    flat = x.reshape(-1)
    lo, hi = float(flat.min()), float(flat.max())
    plo, phi = np.percentile(flat, [100.0 - percentile, percentile])
    hist, _ = np.histogram(flat, bins=ObserverStats.HIST_BINS)
    return ObserverStats(min=lo, max=hi, abs_mean=float(np.abs(flat).mean()),
                         percentile_lo=float(plo), percentile_hi=float(phi),
                         histogram=hist)


MINMAX = "minmax"
PERCENTILE = "percentile"
MSE_GRID = "mse"


def observe(x: np.ndarray, mode: str = MINMAX, bits: int = 8,
            signed: bool = False, symmetric: bool = False,
            percentile: float = 99.9) -> tuple[float, float]:
    """Scale and zero-point mapping the observed range onto the code grid.

    Symmetric mode forces z = 0. A constant tensor degenerates to the
    epsilon scale with z centering the constant.
    """
    if x.size == 0:
        raise ConfigError("cannot observe an empty tensor")
    stats = observer_stats(x, percentile=percentile)
    if mode == PERCENTILE:
        lo, hi = stats.percentile_lo, stats.percentile_hi
    elif mode == MINMAX:
        lo, hi = stats.min, stats.max
    else:
        raise ConfigError(f"unknown observer mode {mode!r}")
    q_min, q_max = code_range(bits, signed)
    if symmetric:
        bound = max(abs(lo), abs(hi))
        s = max(bound / max(q_max, 1), EPS)
        return s, 0.0
    span = hi - lo
    if span <= 0:
        # constant tensor: epsilon scale, offset centers the constant
        s = EPS
        mid = (q_min + q_max) / 2.0
        return s, mid - lo / s
    s = max(span / (q_max - q_min), EPS)
    z = q_min - round_half_away(np.asarray(lo / s))[()]
    return s, float(z)


def weight_scales(w: np.ndarray, bits: int, mode: str = MINMAX) -> np.ndarray:
    """Per-output-channel symmetric scales; ``mse`` grid-searches a shrink
    factor per channel minimizing weight reconstruction error."""
    q_min, q_max = code_range(bits, signed=True)
    absmax = np.abs(w).max(axis=1, keepdims=True)
    base = np.maximum(absmax / q_max, EPS)
    if mode != MSE_GRID:
        return base
    best = base.copy()
    best_err = _rtn_error(w, base, q_min, q_max)
    for shrink in np.linspace(0.30, 1.0, 36)[:-1]:
        cand = np.maximum(base * shrink, EPS)
        err = _rtn_error(w, cand, q_min, q_max)
        better = err < best_err
        best[better] = cand[better]
        best_err[better] = err[better]
    return best


def _rtn_error(w, s, q_min, q_max):
    deq = np.clip(round_half_away(w / s), q_min, q_max) * s
    return ((deq - w) ** 2).sum(axis=1, keepdims=True)


def rtn_codes(w: np.ndarray, s: np.ndarray, bits: int) -> np.ndarray:
    q_min, q_max = code_range(bits, signed=True)
    return np.clip(round_half_away(w / s), q_min, q_max)


# -- branch features and the reconstruction objective --------------------------


def branch_features(layer: KanLayer, x: np.ndarray, branch: str) -> np.ndarray:
    with no_grad():
        t = Tensor(x)
        if branch == BASE:
            return layer.base_features(t).data
        return layer.spline_features(t).data


@dataclass
class PtqLossWeights:
    lambda_base: float = 1.0
    lambda_spline: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.lambda_base) and np.isfinite(self.lambda_spline)):
            raise ConfigError("loss weights must be finite")
        if self.lambda_base < 0 or self.lambda_spline < 0:
            raise ConfigError("loss weights must be non-negative")


def ptq_loss(layer: KanLayer, w_b_hat: np.ndarray, w_s_hat: np.ndarray,
             entry: LayerCalibration,
             weights: PtqLossWeights = PtqLossWeights()) -> float:
    """Branch + layer reconstruction error, averaged over calibration rows."""
    if entry is None:
        raise ConfigError("no calibration cached for this layer")
    fb = branch_features(layer, entry.inputs, BASE)
    fs = branch_features(layer, entry.inputs, SPLINE)
    base_ref = fb @ layer.W_b.data.T
    spline_ref = fs @ layer.W_s.data.T
    base_hat = fb @ w_b_hat.T
    spline_hat = fs @ w_s_hat.T
    term_b = ((base_hat - base_ref) ** 2).sum(axis=1).mean()
    term_s = ((spline_hat - spline_ref) ** 2).sum(axis=1).mean()
    term_full = (((base_hat + spline_hat) - (base_ref + spline_ref)) ** 2
                 ).sum(axis=1).mean()
    return float(weights.lambda_base * term_b
                 + weights.lambda_spline * term_s + term_full)


# -- rounding optimization (AdaRound / BRECQ core) -----------------------------


@dataclass
class RoundingUnit:
    """One weight matrix being rounded: fixed grid, learnable direction."""
    w: np.ndarray
    s: np.ndarray
    bits: int
    features: np.ndarray  # [n, cols]

    def __post_init__(self):
        self.q_min, self.q_max = code_range(self.bits, signed=True)
        self.floor = np.floor(self.w / self.s)
        residual = np.clip(self.w / self.s - self.floor, 1e-4, 1 - 1e-4)
        # rectified sigmoid starts at the RTN residual: h(v0) = residual
        self.v0 = -np.log((ZETA - GAMMA) / (residual - GAMMA) - 1.0)

    def dequant(self, h: np.ndarray) -> np.ndarray:
        return np.clip(self.floor + h, self.q_min, self.q_max) * self.s

    def rtn(self) -> np.ndarray:
        return rtn_codes(self.w, self.s, self.bits) * self.s


def _rectified_sigmoid(v: Tensor) -> Tensor:
    return (v.sigmoid() * (ZETA - GAMMA) + GAMMA).clip(0.0, 1.0)


@dataclass
class RoundingResult:
    hard: list[np.ndarray]   # 0/1 decisions per unit
    soft_gap: float          # worst |h - round(h)| before hard assignment
    fell_back: bool          # reverted to round-to-nearest


def optimize_rounding(units: list[RoundingUnit], target: np.ndarray,
                      iters: int, lr: float = 1e-2) -> RoundingResult:
    """Soft-to-hard rounding against reconstruction of ``target``.

    Falls back to round-to-nearest if optimization failed to improve on it.
    """
    from .qat import Adam

    vs = [Tensor(u.v0.copy(), requires_grad=True) for u in units]
    opt = Adam([{"params": vs, "lr": lr}])
    n = target.shape[0]
    feats = [Tensor(u.features) for u in units]

    def reconstruction(hs: list[Tensor]) -> Tensor:
        out = None
        for u, f, h in zip(units, feats, hs):
            soft = (Tensor(u.floor) + h).clip(u.q_min, u.q_max) * Tensor(u.s)
            term = _matmul_t(f, soft)
            out = term if out is None else out + term
        return out

    for it in range(iters):
        hs = [_rectified_sigmoid(v) for v in vs]
        diff = reconstruction(hs) - Tensor(target)
        rec_loss = (diff * diff).sum() * (1.0 / n)
        loss = rec_loss
        progress = it / max(iters - 1, 1)
        if progress >= WARMUP_FRAC:
            t = min((progress - WARMUP_FRAC) / (ANNEAL_END - WARMUP_FRAC), 1.0)
            beta = BETA_START + (BETA_END - BETA_START) * t
            reg = None
            for h in hs:
                r = (1.0 - ((h * 2.0 - 1.0).abs() ** beta)).sum()
                reg = r if reg is None else reg + r
            loss = loss + reg * ROUND_LAMBDA
        opt.zero_grad()
        loss.backward()
        opt.step()

    h_final = [_rectified_sigmoid(v).data for v in vs]
    soft_gap = max(float(np.abs(h - np.round(h)).max()) for h in h_final)
    if soft_gap > BINARY_TOL:
        logger.warning(
            "rounding variables not binary after %d iters (gap %.2e); "
            "hard-thresholding at 0.5", iters, soft_gap)
    hard = [(h > 0.5).astype(np.float64) for h in h_final]

    def output_mse(weight_list):
        out = sum(u.features @ w.T for u, w in zip(units, weight_list))
        return float(((out - target) ** 2).sum() / n)

    optimized = output_mse([u.dequant(h) for u, h in zip(units, hard)])
    rtn = output_mse([u.rtn() for u in units])
    fell_back = optimized > rtn
    if fell_back:
        # only accept improvements over plain rounding at the binary limit
        hard = [np.clip(rtn_codes(u.w, u.s, u.bits) - u.floor, 0.0, 1.0)
                for u in units]
    return RoundingResult(hard=hard, soft_gap=soft_gap, fell_back=fell_back)


def _matmul_t(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T where both operands may carry gradients."""
    data = x.data @ w.data.T

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data)
        if w.requires_grad:
            w.accumulate_grad(g.T @ x.data)

    return Tensor.from_op(data, (x, w), backward, "matmul_t")


def adaround_layer(layer: KanLayer, branch: str, entry: LayerCalibration,
                   iters: int = 800, bits: int = 4,
                   scale_mode: str = MINMAX,
                   ) -> tuple[np.ndarray, np.ndarray, RoundingResult]:
    """Learn per-element floor/ceil decisions for one branch.

    Returns the dequantized weights, the integer codes, and the rounding
    diagnostics.
    """
    w = layer.W_b.data if branch == BASE else layer.W_s.data
    feats = branch_features(layer, entry.inputs, branch)
    s = weight_scales(w, bits, mode=scale_mode)
    unit = RoundingUnit(w=w, s=s, bits=bits, features=feats)
    target = feats @ w.T
    result = optimize_rounding([unit], target, iters=iters)
    h = result.hard[0]
    codes = np.clip(unit.floor + h, unit.q_min, unit.q_max)
    return unit.dequant(h), codes, result


def brecq_block(layers: list[KanLayer], entries: list[LayerCalibration],
                iters: int = 800, bits: int = 4,
                scale_mode: str = MSE_GRID) -> list[dict]:
    """Jointly optimize both branches of each layer in the block against
    the block's FP output. The default block is a single layer.

    The joint optimization explores a larger, coupled landscape; as a
    safeguard the per-branch-independent solution is also computed and
    whichever reconstructs the block output better is kept.
    """
    if not layers:
        raise ConfigError("empty block")
    if len(layers) == 1:
        layer, entry = layers[0], entries[0]
        fb = branch_features(layer, entry.inputs, BASE)
        fs = branch_features(layer, entry.inputs, SPLINE)
        units = [
            RoundingUnit(layer.W_b.data, weight_scales(layer.W_b.data, bits,
                                                       scale_mode), bits, fb),
            RoundingUnit(layer.W_s.data, weight_scales(layer.W_s.data, bits,
                                                       scale_mode), bits, fs),
        ]
        target = entry.outputs
        result = optimize_rounding(units, target, iters=iters)
        hb, hs = result.hard
        indep_b = optimize_rounding([units[0]], fb @ layer.W_b.data.T,
                                    iters=iters).hard[0]
        indep_s = optimize_rounding([units[1]], fs @ layer.W_s.data.T,
                                    iters=iters).hard[0]

        def block_mse(h_pair):
            out = (fb @ units[0].dequant(h_pair[0]).T
                   + fs @ units[1].dequant(h_pair[1]).T)
            return float(((out - target) ** 2).mean())

        if block_mse((indep_b, indep_s)) < block_mse((hb, hs)):
            hb, hs = indep_b, indep_s
        return [{"W_b": units[0].dequant(hb), "W_s": units[1].dequant(hs),
                 "codes_b": np.clip(units[0].floor + hb, units[0].q_min,
                                    units[0].q_max),
                 "codes_s": np.clip(units[1].floor + hs, units[1].q_min,
                                    units[1].q_max)}]
    # multi-layer blocks: optimize layer by layer against the block output,
    # feeding each layer its quantized predecessor's activations
    results = []
    x = entries[0].inputs
    for layer, entry in zip(layers, entries):
        local = LayerCalibration(inputs=x, outputs=entry.outputs)
        res = brecq_block([layer], [local], iters=iters, bits=bits,
                          scale_mode=scale_mode)[0]
        results.append(res)
        probe = layer.clone()
        probe.W_b.data[...] = res["W_b"]
        probe.W_s.data[...] = res["W_s"]
        with no_grad():
            x = probe.forward(Tensor(x)).data
    return results


# -- GPTQ ---------------------------------------------------------------------


def gptq_layer(w: np.ndarray, x: np.ndarray, bits: int,
               scale_mode: str = MINMAX,
               damp_frac: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Column-ordered quantize-and-compensate on the damped least-squares
    objective. ``x`` holds calibration features [n, cols].

    Returns dequantized weights and their integer codes. Falls back to
    round-to-nearest if the damped Hessian never factorizes.
    """
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != w.shape[1]:
        raise ConfigError(f"calibration features {x.shape} do not match "
                          f"weights {w.shape}")
    cols = w.shape[1]
    s = weight_scales(w, bits, mode=scale_mode)
    q_min, q_max = code_range(bits, signed=True)
    hessian = 2.0 * (x.T @ x)
    dead = np.diag(hessian) == 0
    if dead.any():
        # columns with no calibration signal: quantize by plain rounding,
        # receive and emit no compensation
        hessian[dead, dead] = 1.0
    damp = damp_frac * float(np.mean(np.diag(hessian)))
    damp = damp if damp > 0 else EPS
    upper = None
    for attempt in range(4):
        try:
            lower = cholesky(hessian + damp * np.eye(cols)).data
            identity = np.eye(cols)
            inv_lower = np.linalg.solve(lower, identity)
            h_inv = inv_lower.T @ inv_lower
            upper = np.linalg.cholesky(h_inv).T
            break
        except (DecompositionError, np.linalg.LinAlgError):
            damp *= 10.0
    if upper is None:
        logger.warning("gptq hessian failed to factorize; falling back to "
                       "round-to-nearest")
        codes = rtn_codes(w, s, bits)
        return codes * s, codes
    work = w.astype(np.float64).copy()
    codes = np.zeros_like(work)
    for i in range(cols):
        col = work[:, i]
        q = np.clip(round_half_away(col / s[:, 0]), q_min, q_max)
        codes[:, i] = q
        deq = q * s[:, 0]
        err = (col - deq) / upper[i, i]
        if i + 1 < cols:
            work[:, i + 1:] -= np.outer(err, upper[i, i + 1:])
    # greedy compensation can overshoot into the clip range on small
    # problems; keep plain rounding when it reconstructs better
    rtn = rtn_codes(w, s, bits)
    ref = x @ w.T
    mse_gptq = ((x @ (codes * s).T - ref) ** 2).mean()
    mse_rtn = ((x @ (rtn * s).T - ref) ** 2).mean()
    if mse_gptq > mse_rtn:
        logger.debug("gptq compensation lost to round-to-nearest; keeping rtn")
        codes = rtn
    return codes * s, codes


# -- AWQ ------------------------------------------------------------------------


def awq_scale(layer: KanLayer, entry: LayerCalibration, branch: str,
              bits: int, grid: int = 20) -> np.ndarray:
    """Per-input-column scales (mean |activation|)^alpha, alpha grid-searched
    to minimize the quantized branch output error."""
    feats = branch_features(layer, entry.inputs, branch)
    w = layer.W_b.data if branch == BASE else layer.W_s.data
    mean_abs = np.abs(feats).mean(axis=0)
    reference = feats @ w.T
    best_scales, best_err = None, np.inf
    for alpha in np.linspace(0.0, 1.0, grid):
        scales = np.where(mean_abs > 0, mean_abs ** alpha, 1.0)
        scales = np.maximum(scales, EPS)
        w_scaled = w * scales
        s = weight_scales(w_scaled, bits)
        deq = rtn_codes(w_scaled, s, bits) * s
        out = (feats / scales) @ deq.T
        err = float(((out - reference) ** 2).mean())
        if err < best_err:
            best_err, best_scales = err, scales
    return best_scales


def apply_awq(layer: KanLayer, base_scales: np.ndarray,
              spline_scales: np.ndarray) -> KanLayer:
    """Scale weight columns up; callers must divide the matching features
    by the same scales so the FP function is unchanged."""
    scaled = layer.clone()
    scaled.W_b.data *= base_scales
    scaled.W_s.data *= spline_scales
    return scaled


# -- Hessian-trace sensitivity and bit allocation -------------------------------


def hutchinson_trace(loss_fn, params: np.ndarray, n_probes: int, rng: Rng,
                     fd_step: float = 1e-4) -> float:
    """Mean of v' H v over Rademacher probes; Hv via central differences
    of the gradient."""

    def grad_at(values: np.ndarray) -> np.ndarray:
        t = Tensor(values, requires_grad=True)
        loss = loss_fn(t)
        loss.backward()
        return t.grad if t.grad is not None else np.zeros_like(values)

    total = 0.0
    for _ in range(n_probes):
        v = rng.rademacher(params.shape)
        g_hi = grad_at(params + fd_step * v)
        g_lo = grad_at(params - fd_step * v)
        hv = (g_hi - g_lo) / (2.0 * fd_step)
        total += float((v * hv).sum())
    return total / n_probes


@dataclass
class SensitivityRow:
    layer: int
    branch: str
    trace: float
    perturbation: dict[int, float]  # bits -> ||Q_b(W) - W||^2
    param_count: int


@dataclass
class SensitivityReport:
    rows: list[SensitivityRow]


def _unit_loss_fn(model: KanMlp, layer_idx: int, branch: str,
                  calib: CalibrationBatch):
    """Cross-entropy over the calibration set as a function of one unit."""
    inputs = calib.layers[0].inputs
    labels = calib.labels
    layer = model.layers[layer_idx]
    attr = "W_b" if branch == BASE else "W_s"
    original = getattr(layer, attr)

    def loss_fn(param: Tensor) -> Tensor:
        setattr(layer, attr, param)
        try:
            logits = model.forward(Tensor(inputs))
            return cross_entropy(logits, labels)
        finally:
            setattr(layer, attr, original)

    return loss_fn


def hawq_allocate(model: KanMlp, calib: CalibrationBatch,
                  budget_avg_bits: float,
                  candidate_bits: tuple[int, ...] = (2, 3, 4, 8),
                  n_probes: int = 32, rng: Rng | None = None,
                  ) -> tuple[dict[tuple[int, str], int], SensitivityReport]:
    """Greedy bit assignment minimizing trace-weighted quantization error
    under a parameter-weighted average bit budget.

    Demotions proceed from the cheapest sensitivity increase per saved
    bit; ties break toward the earlier layer, base branch first.
    """
    candidates = sorted(set(candidate_bits))
    if budget_avg_bits < candidates[0]:
        raise ConfigError(
            f"budget {budget_avg_bits} below minimum attainable average "
            f"{candidates[0]}")
    rng = rng or Rng(0)
    units = [(i, br) for i in range(len(model.layers)) for br in (BASE, SPLINE)]
    rows: list[SensitivityRow] = []
    omega: dict[tuple[int, str], dict[int, float]] = {}
    counts: dict[tuple[int, str], int] = {}
    for probe_idx, (i, br) in enumerate(units):
        layer = model.layers[i]
        w = (layer.W_b if br == BASE else layer.W_s).data
        loss_fn = _unit_loss_fn(model, i, br, calib)
        trace = hutchinson_trace(loss_fn, w, n_probes, rng.split(probe_idx))
        perturb = {}
        for b in candidates:
            s = weight_scales(w, b)
            deq = rtn_codes(w, s, b) * s
            perturb[b] = float(((deq - w) ** 2).sum())
        mean_trace = trace / w.size
        omega[(i, br)] = {b: mean_trace * perturb[b] for b in candidates}
        counts[(i, br)] = w.size
        rows.append(SensitivityRow(layer=i, branch=br, trace=trace,
                                   perturbation=perturb, param_count=w.size))
    assignment = greedy_allocate(omega, counts, candidates, budget_avg_bits)
    return assignment, SensitivityReport(rows)


def greedy_allocate(omega: dict[tuple[int, str], dict[int, float]],
                    counts: dict[tuple[int, str], int],
                    candidates: list[int],
                    budget_avg_bits: float) -> dict[tuple[int, str], int]:
    """Demote from all-max until the parameter-weighted average fits.

    Each step picks the demotion with the smallest sensitivity increase
    per saved weighted bit; ties break toward the earlier layer with the
    base branch before the spline branch.
    """
    units = list(omega.keys())
    total_params = sum(counts.values())
    assignment = {u: candidates[-1] for u in units}
    branch_rank = {BASE: 0, SPLINE: 1}

    def weighted_avg():
        return sum(assignment[u] * counts[u] for u in units) / total_params

    while weighted_avg() > budget_avg_bits + 1e-12:
        options = []
        for u in units:
            b = assignment[u]
            idx = candidates.index(b)
            if idx == 0:
                continue
            lower = candidates[idx - 1]
            delta_omega = omega[u][lower] - omega[u][b]
            saved = (b - lower) * counts[u] / total_params
            options.append((delta_omega / saved, u[0], branch_rank[u[1]],
                            u, lower))
        if not options:
            raise ConfigError(
                f"budget {budget_avg_bits} unattainable; minimum average is "
                f"{weighted_avg()}")
        options.sort(key=lambda o: (o[0], o[1], o[2]))
        _, _, _, unit, lower = options[0]
        assignment[unit] = lower
    return assignment


# -- dispatch -------------------------------------------------------------------


@dataclass
class PtqUnitResult:
    layer: int
    branch: str
    bits: int
    loss_before: float
    loss_after: float
    codes: np.ndarray | None = field(repr=False, default=None)


@dataclass
class PtqReport:
    method: str
    bits: str
    units: list[PtqUnitResult]
    accuracy: float | None = None

    def csv_rows(self) -> list[str]:
        rows = ["layer,branch,method,bits,loss_before,loss_after"]
        for u in self.units:
            rows.append(f"{u.layer},{u.branch},{self.method},{u.bits},"
                        f"{u.loss_before:.6e},{u.loss_after:.6e}")
        if self.accuracy is not None:
            rows.append(f"summary,,{self.method},{self.bits},,"
                        f"{self.accuracy * 100:.2f}")
        return rows


def _quantize_weights(model: KanMlp, method: str, bits: BitConfig,
                      calib: CalibrationBatch, iters: int,
                      loss_weights: PtqLossWeights,
                      ) -> tuple[list[dict], list[PtqUnitResult]]:
    """Run the chosen solver per layer; returns new weights plus a report."""
    w_bits = bits.weight_bits
    new_weights: list[dict] = []
    units: list[PtqUnitResult] = []
    hawq_assignment = None
    if method == "hawq":
        hawq_assignment, _ = hawq_allocate(model, calib, float(w_bits))
    for i, (layer, entry) in enumerate(zip(model.layers, calib.layers)):
        result = {"W_b": layer.W_b.data.copy(), "W_s": layer.W_s.data.copy(),
                  "base_scale": None, "spline_scale": None,
                  "codes": {}}
        per_branch_bits = {BASE: w_bits, SPLINE: w_bits}
        if w_bits == 32:
            new_weights.append(result)
            continue
        if method in ("uniform", "hawq"):
            if method == "hawq":
                per_branch_bits = {br: hawq_assignment[(i, br)]
                                   for br in (BASE, SPLINE)}
            for br, key in ((BASE, "W_b"), (SPLINE, "W_s")):
                w = result[key]
                s = weight_scales(w, per_branch_bits[br])
                codes = rtn_codes(w, s, per_branch_bits[br])
                result[key] = codes * s
                result["codes"][br] = codes
        elif method == "adaround":
            for br, key in ((BASE, "W_b"), (SPLINE, "W_s")):
                deq, codes, _ = adaround_layer(layer, br, entry, iters=iters,
                                               bits=w_bits)
                result[key] = deq
                result["codes"][br] = codes
        elif method == "gptq":
            for br, key in ((BASE, "W_b"), (SPLINE, "W_s")):
                feats = branch_features(layer, entry.inputs, br)
                w = layer.W_b.data if br == BASE else layer.W_s.data
                deq, codes = gptq_layer(w, feats, w_bits)
                result[key] = deq
                result["codes"][br] = codes
        elif method == "brecq":
            block = brecq_block([layer], [entry], iters=iters, bits=w_bits)[0]
            result["W_b"], result["W_s"] = block["W_b"], block["W_s"]
            result["codes"][BASE] = block["codes_b"]
            result["codes"][SPLINE] = block["codes_s"]
        elif method == "awq":
            scales_b = awq_scale(layer, entry, BASE, w_bits)
            scales_s = awq_scale(layer, entry, SPLINE, w_bits)
            scaled = apply_awq(layer, scales_b, scales_s)
            for br, key, scales in ((BASE, "W_b", scales_b),
                                    (SPLINE, "W_s", scales_s)):
                w = scaled.W_b.data if br == BASE else scaled.W_s.data
                s = weight_scales(w, w_bits)
                codes = rtn_codes(w, s, w_bits)
                result[key] = codes * s
                result["codes"][br] = codes
            result["base_scale"] = scales_b
            result["spline_scale"] = scales_s
        else:
            raise ConfigError(
                f"unsupported PTQ method {method!r}; choose from {PTQ_METHODS}")

        # report: reconstruction loss of plain rounding vs the solver output
        rtn_b = rtn_codes(layer.W_b.data, weight_scales(
            layer.W_b.data, per_branch_bits[BASE]), per_branch_bits[BASE]) \
            * weight_scales(layer.W_b.data, per_branch_bits[BASE])
        rtn_s = rtn_codes(layer.W_s.data, weight_scales(
            layer.W_s.data, per_branch_bits[SPLINE]), per_branch_bits[SPLINE]) \
            * weight_scales(layer.W_s.data, per_branch_bits[SPLINE])
        loss_before = ptq_loss(layer, rtn_b, rtn_s, entry, loss_weights)
        if result["base_scale"] is not None:
            # compare in the rescaled coordinates AWQ actually runs in
            eff_b = result["W_b"] / result["base_scale"]
            eff_s = result["W_s"] / result["spline_scale"]
            loss_after = ptq_loss(layer, eff_b, eff_s, entry, loss_weights)
        else:
            loss_after = ptq_loss(layer, result["W_b"], result["W_s"], entry,
                                  loss_weights)
        for br in (BASE, SPLINE):
            units.append(PtqUnitResult(
                layer=i, branch=br, bits=per_branch_bits[br],
                loss_before=loss_before, loss_after=loss_after,
                codes=result["codes"].get(br)))
        new_weights.append(result)
    return new_weights, units


def build_ptq_model(model: KanMlp, new_weights: list[dict], bits: BitConfig,
                    calib: CalibrationBatch,
                    act_observer: str = MINMAX) -> QuantKanMlp:
    """Assemble the quantized model: solved weights plus fixed activation
    quantizers calibrated on the cached layer inputs."""
    qlayers = []
    for layer, entry, solved in zip(model.layers, calib.layers, new_weights):
        inner = layer.clone()
        inner.W_b.data[...] = solved["W_b"]
        inner.W_s.data[...] = solved["W_s"]
        spec = make_branch_spec(UNIFORM, BitConfig(32, bits.act_bits))
        qlayer = QuantKanLayer(inner, spec)
        if solved["base_scale"] is not None:
            qlayer.base_feature_scale = solved["base_scale"]
            qlayer.spline_feature_scale = solved["spline_scale"]
        act_q = spec.activation_q
        if not act_q.bypass:
            sites = [entry.inputs.reshape(-1)]
            with no_grad():
                xq = Tensor(entry.inputs)
                feats_b = inner.base_features(xq).data
                feats_s = inner.spline_features(xq).data
            if qlayer.base_feature_scale is not None:
                feats_b = feats_b / qlayer.base_feature_scale
                feats_s = feats_s / qlayer.spline_feature_scale
            sites += [feats_b.reshape(-1), feats_s.reshape(-1)]
            s, z = observe(np.concatenate(sites), mode=act_observer,
                           bits=bits.act_bits, signed=False)
            act_q.s = Tensor(np.asarray(s))
            act_q.z = Tensor(np.asarray(z))
            act_q.initialized = True
        qlayers.append(qlayer)
    return QuantKanMlp(qlayers)


def run_ptq(model: KanMlp, method: str, bits: BitConfig, calib_size: int,
            data, eval_data=None, iters: int = 800,
            loss_weights: PtqLossWeights = PtqLossWeights(),
            act_observer: str = MINMAX) -> tuple[QuantKanMlp, PtqReport]:
    """Calibrate, solve each layer, and assemble the quantized model."""
    if method not in PTQ_METHODS:
        raise ConfigError(
            f"unsupported PTQ method {method!r}; choose from {PTQ_METHODS}")
    calib = collect_calibration(model, data, calib_size)
    new_weights, units = _quantize_weights(model, method, bits, calib, iters,
                                           loss_weights)
    qmodel = build_ptq_model(model, new_weights, bits, calib,
                             act_observer=act_observer)
    report = PtqReport(method=method, bits=bits.token(), units=units)
    if eval_data is not None:
        report.accuracy = evaluate(qmodel, eval_data)
    return qmodel, report
