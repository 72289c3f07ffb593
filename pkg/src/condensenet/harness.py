"""Randomized case generation and independent oracles.

Nothing here calls the kernels it is used to check: the convolution and
pooling oracles are plain loops, and gradients come from central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .netdef import ConvLayer, NetworkDef, PoolLayer, init_random_weights
from .quant import ActQuantizer
from .tensor import Tensor


@dataclass(frozen=True)
class CaseSpec:
    seed: int = 0
    conv_layers: tuple = (1, 4)
    channels: tuple = (1, 8)  # condensed output channels per conv
    max_expanded: int = 32
    alphas: tuple = (1, 2, 4)
    ops: tuple = ("max", "avg", "min")
    size: tuple = (5, 64)
    schemes: tuple = ("w1a2", "full32")
    kernels: tuple = (1, 3, 5)
    pool_prob: float = 0.35


def gen_network(spec: CaseSpec, seed: int | None = None):
    """Deterministic (NetworkDef, WeightStore, input Tensor) for ``seed`` (default ``spec.seed``)."""
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    pick = lambda seq: seq[int(rng.integers(len(seq)))]  # noqa: E731
    scheme = pick(spec.schemes)
    h = int(rng.integers(spec.size[0], spec.size[1] + 1))
    w = int(rng.integers(spec.size[0], spec.size[1] + 1))
    in_ch = int(rng.integers(1, 5))
    in_bits = 8 if scheme == "w1a2" else pick((8, 32))
    layers = []
    for _ in range(int(rng.integers(spec.conv_layers[0], spec.conv_layers[1] + 1))):
        alpha = pick(spec.alphas)
        cond = int(rng.integers(spec.channels[0], min(spec.channels[1], spec.max_expanded // alpha) + 1))
        if scheme == "w1a2":
            act = ActQuantizer("hwgq2", delta=pick((0.25, 0.5, 1.0)))
        else:
            act = ActQuantizer(pick(("leaky", "relu", "identity")))
        layers.append(ConvLayer(cond * alpha, pick(spec.kernels), alpha, pick(spec.ops), act))
        if rng.random() < spec.pool_prob:
            layers.append(PoolLayer(pick((1, 2))))
    net = NetworkDef(h, w, in_ch, in_bits, layers, scheme)
    weights = init_random_weights(net, seed)
    if in_bits == 8:
        x = rng.integers(0, 256, (in_ch, h, w), dtype=np.uint8)
    else:
        x = rng.normal(0.0, 1.0, (in_ch, h, w)).astype(np.float32)
    return net, weights, Tensor.from_array(x, in_bits)


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


# oracles


def conv_oracle(x: np.ndarray, w: np.ndarray, bias=None) -> np.ndarray:
    """Direct-definition same-size convolution with zero padding."""
    n_in, height, width = x.shape
    c_out, _, k, _ = w.shape
    pad = (k - 1) // 2
    out = np.zeros((c_out, height, width))
    for c in range(c_out):
        for y in range(height):
            for xx in range(width):
                s = 0.0
                for n in range(n_in):
                    for u in range(k):
                        for v in range(k):
                            yy, xi = y + u - pad, xx + v - pad
                            if 0 <= yy < height and 0 <= xi < width:
                                s += float(w[c, n, u, v]) * float(x[n, yy, xi])
                out[c, y, xx] = s + (0.0 if bias is None else float(bias[c]))
    return out


def xpool_oracle(x: np.ndarray, alpha: int, op: str):
    """Dense per-pixel reduction over channel windows; returns (values, argidx or None)."""
    c, height, width = x.shape
    out = np.zeros((c // alpha, height, width))
    idx = np.zeros((c // alpha, height, width), dtype=np.int64)
    for j in range(c // alpha):
        for y in range(height):
            for xx in range(width):
                vals = [float(x[j * alpha + a, y, xx]) for a in range(alpha)]
                if op == "avg":
                    out[j, y, xx] = sum(vals) / alpha
                else:
                    best = max(vals) if op == "max" else min(vals)
                    out[j, y, xx] = best
                    idx[j, y, xx] = j * alpha + vals.index(best)
    return out, (None if op == "avg" else idx)


def spool_oracle(x: np.ndarray, stride: int) -> np.ndarray:
    c, height, width = x.shape
    oh, ow = -(-height // stride), -(-width // stride)
    out = np.zeros((c, oh, ow), dtype=x.dtype)
    for ch in range(c):
        for y in range(oh):
            for xx in range(ow):
                window = [x[ch, yy, xi] for yy in (y * stride, y * stride + 1) for xi in (xx * stride, xx * stride + 1)
                          if yy < height and xi < width]
                out[ch, y, xx] = max(window)
    return out


def best_scale_grid(w: np.ndarray, grid: np.ndarray) -> tuple[float, float]:
    """Scale on ``grid`` minimizing ||w - scale * sign(w)||^2, and that error."""
    s = np.where(w >= 0, 1.0, -1.0)
    errs = [float(np.sum((w - g * s) ** 2)) for g in grid]
    i = int(np.argmin(errs))
    return float(grid[i]), errs[i]


# gradient check on small full-precision chains: conv -> leaky -> xpool -> conv -> squared error


@dataclass
class GradCase:
    x: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    target: np.ndarray
    alpha: int
    op: str
    slope: float = 0.1


def _chain_forward(c: GradCase, x, w1, b1, w2, b2):
    z = L.conv2d(x, w1, b1)
    a = L.leaky_relu(z, c.slope)
    p, trace = L.xpool(a, c.alpha, c.op)
    y = L.conv2d(p, w2, b2)
    return z, a, p, trace, y


def chain_loss(c: GradCase, x=None, w1=None, b1=None, w2=None, b2=None) -> float:
    y = _chain_forward(c, c.x if x is None else x, c.w1 if w1 is None else w1, c.b1 if b1 is None else b1,
                       c.w2 if w2 is None else w2, c.b2 if b2 is None else b2)[-1]
    return 0.5 * float(np.sum((y - c.target) ** 2))


def chain_gradients(c: GradCase) -> dict:
    z, a, p, trace, y = _chain_forward(c, c.x, c.w1, c.b1, c.w2, c.b2)
    g_y = y - c.target
    g_p, g_w2, g_b2 = L.conv2d_backward(g_y, p, c.w2)
    g_a = L.xpool_backward(g_p, trace, c.alpha, c.op)
    g_z = L.leaky_relu_backward(g_a, z, c.slope)
    g_x, g_w1, g_b1 = L.conv2d_backward(g_z, c.x, c.w1)
    return {"x": g_x, "w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def _margins_ok(c: GradCase, margin: float) -> bool:
    z = L.conv2d(c.x, c.w1, c.b1)
    if np.abs(z).min() < margin:
        return False
    if c.op == "avg" or c.alpha == 1:
        return True
    g = np.sort(L.leaky_relu(z, c.slope).reshape((-1, c.alpha) + z.shape[1:]), axis=1)
    gap = g[:, -1] - g[:, -2] if c.op == "max" else g[:, 1] - g[:, 0]
    return gap.min() >= margin


def make_grad_case(seed: int, margin: float = 1e-3, jitter: float = 0.05, max_tries: int = 500) -> GradCase:
    """Random chain whose kinks (leaky zero crossing, pooling ties) sit at least
    ``margin`` away from every evaluation point.

    Inputs and biases are re-jittered with the case's own generator until that holds.
    """
    rng = np.random.default_rng(seed)
    n_in = int(rng.integers(1, 4))
    alpha = int(rng.choice([1, 2, 4]))
    cond = int(rng.integers(1, 4))
    k1, k2 = int(rng.choice([1, 3])), int(rng.choice([1, 3]))
    hh, ww = int(rng.integers(3, 7)), int(rng.integers(3, 7))
    c_out = int(rng.integers(1, 3))
    case = GradCase(
        x=rng.uniform(-1, 1, (n_in, hh, ww)),
        w1=rng.uniform(-0.5, 0.5, (cond * alpha, n_in, k1, k1)),
        b1=rng.uniform(-0.25, 0.25, cond * alpha),
        w2=rng.uniform(-0.5, 0.5, (c_out, cond, k2, k2)),
        b2=rng.uniform(-0.25, 0.25, c_out),
        target=rng.normal(0, 1, (c_out, hh, ww)),
        alpha=alpha,
        op=("max", "avg")[seed % 2] if alpha > 1 else "max",
    )
    for _ in range(max_tries):
        if _margins_ok(case, margin):
            return case
        case.x = case.x + rng.uniform(-jitter, jitter, case.x.shape)
        case.b1 = case.b1 + rng.uniform(-jitter, jitter, case.b1.shape)
    raise RuntimeError(f"no well-separated case found for seed {seed}")


def normwise_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n||_inf / max(||a||_inf, ||n||_inf); 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(seed: int = 0, cases: int = 20, h: float = 1e-4) -> list[dict]:
    """Compare analytic and central-difference gradients on ``cases`` seeded chains.

    Returns one dict per case: shapes, op, and the relative error per parameter.
    """
    results = []
    for i in range(cases):
        case = make_grad_case(seed * 1000 + i)
        analytic = chain_gradients(case)
        errors = {}
        for name in ("x", "w1", "b1", "w2", "b2"):
            numeric = finite_diff_grad(lambda v, name=name: chain_loss(case, **{name: v}), getattr(case, name), h)
            errors[name] = normwise_rel_error(analytic[name], numeric)
        results.append({"case": i, "alpha": case.alpha, "op": case.op, "x_shape": case.x.shape,
                        "w1_shape": case.w1.shape, "errors": errors, "max_error": max(errors.values())})
    return results
