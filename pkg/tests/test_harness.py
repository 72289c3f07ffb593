import numpy as np
import pytest

from condensenet import layers as L
from condensenet.harness import (
    CaseSpec,
    conv_oracle,
    finite_diff_grad,
    gen_network,
    make_grad_case,
    normwise_rel_error,
    xpool_oracle,
)
from condensenet.training import ToyConfig, train_toy


def test_seed_replay_yields_identical_case():
    a, b = gen_network(CaseSpec(), 17), gen_network(CaseSpec(), 17)
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    assert gen_network(CaseSpec(seed=17))[0] == a[0]


def test_generated_cases_respect_limits():
    spec = CaseSpec()
    seen_alpha, seen_ops, seen_schemes = set(), set(), set()
    for seed in range(200):
        net, weights, x = gen_network(spec, seed)
        assert net.height <= 64 and net.width <= 64
        assert all(c.out <= 32 for c in net.convs) and 1 <= len(net.convs) <= 4
        assert len(weights) == len(net.convs) and x.shape == (net.channels, net.height, net.width)
        seen_alpha |= {c.alpha for c in net.convs}
        seen_ops |= {c.pool for c in net.convs}
        seen_schemes.add(net.scheme)
    assert seen_alpha == {1, 2, 4} and seen_ops == {"max", "avg", "min"} and seen_schemes == {"w1a2", "full32"}


def test_finite_diff_square():
    g = finite_diff_grad(lambda v: float(v[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-6


@pytest.mark.parametrize("h", [1e-4, 1e-2, 0.5])
def test_finite_diff_exact_on_linear(h):
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    g = finite_diff_grad(lambda v: float(np.sum(a * v)), np.zeros((2, 2)), h)
    np.testing.assert_allclose(g, a, rtol=1e-10)


def test_finite_diff_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda v: float("inf") if v[0] > 0 else 0.0, np.array([0.0]))


def test_oracles_are_independent_of_kernels():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(2, 4, 5)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(conv_oracle(x, w), L.conv2d(x, w), rtol=1e-12, atol=1e-12)
    ref, idx = xpool_oracle(np.array([1.0, 1.0]).reshape(2, 1, 1), 2, "max")
    assert idx.item() == 0


def test_grad_cases_keep_kinks_away():
    for seed in range(20):
        case = make_grad_case(seed)
        z = L.conv2d(case.x, case.w1, case.b1)
        assert np.abs(z).min() >= 1e-3


def test_normwise_error():
    assert normwise_rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert normwise_rel_error(np.array([2.0, 0.0]), np.array([2.0, 1e-3])) == pytest.approx(5e-4)


def test_toy_training_short_run_decreases_loss():
    hist = train_toy(ToyConfig(steps=40))
    assert len(hist) == 41 and hist[-1] < hist[0]
