"""Full-precision training of a small condensation net on a synthetic regression task."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class ToyConfig:
    seed: int = 0
    samples: int = 100
    in_channels: int = 2
    size: int = 8
    hidden: int = 4  # condensed width after the pooling layer
    alpha: int = 2
    steps: int = 500
    lr: float = 0.01
    slope: float = 0.1


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def init_params(cfg: ToyConfig, rng: np.random.Generator) -> dict:
    """conv3x3 -> leaky -> xpool(max) -> conv3x3 -> leaky -> conv1x1."""
    expanded = cfg.hidden * cfg.alpha

    def he(shape):
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    return {
        "w1": he((expanded, cfg.in_channels, 3, 3)), "b1": np.zeros(expanded),
        "w2": he((cfg.hidden, cfg.hidden, 3, 3)), "b2": np.zeros(cfg.hidden),
        "w3": he((1, cfg.hidden, 1, 1)), "b3": np.zeros(1),
    }


def forward(p: dict, x: np.ndarray, cfg: ToyConfig):
    z1 = L.conv2d(x, p["w1"], p["b1"])
    a1 = L.leaky_relu(z1, cfg.slope)
    q1, trace = L.xpool(a1, cfg.alpha, "max")
    z2 = L.conv2d(q1, p["w2"], p["b2"])
    a2 = L.leaky_relu(z2, cfg.slope)
    y = L.conv2d(a2, p["w3"], p["b3"])
    return y, (x, z1, q1, trace, z2, a2)


def backward(p: dict, cache, g_y: np.ndarray, cfg: ToyConfig) -> dict:
    x, z1, q1, trace, z2, a2 = cache
    g_a2, g_w3, g_b3 = L.conv2d_backward(g_y, a2, p["w3"])
    g_z2 = L.leaky_relu_backward(g_a2, z2, cfg.slope)
    g_q1, g_w2, g_b2 = L.conv2d_backward(g_z2, q1, p["w2"])
    g_a1 = L.xpool_backward(g_q1, trace, cfg.alpha, "max")
    g_z1 = L.leaky_relu_backward(g_a1, z1, cfg.slope)
    _, g_w1, g_b1 = L.conv2d_backward(g_z1, x, p["w1"])
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "w3": g_w3, "b3": g_b3}


def make_dataset(cfg: ToyConfig, rng: np.random.Generator):
    """Inputs are Gaussian; targets come from a frozen teacher of the same architecture."""
    x = rng.normal(0.0, 1.0, (cfg.samples, cfg.in_channels, cfg.size, cfg.size))
    teacher = init_params(cfg, rng)
    y, _ = forward(teacher, x, cfg)
    return x, y


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


def train_toy(cfg: ToyConfig = ToyConfig()) -> list[float]:
    """Full-batch Adam on MSE.  Returns the loss before each step plus the final loss."""
    rng = np.random.default_rng(cfg.seed)
    x, target = make_dataset(cfg, rng)
    params = init_params(cfg, rng)
    opt = Adam(cfg.lr)
    history = []
    for _ in range(cfg.steps):
        y, cache = forward(params, x, cfg)
        history.append(mse(y, target))
        g_y = 2.0 * (y - target) / y.size
        opt.step(params, backward(params, cache, g_y, cfg))
    history.append(mse(forward(params, x, cfg)[0], target))
    return history
