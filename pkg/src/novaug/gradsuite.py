"""Randomized finite-difference validation of every differentiable operation.

Each entry draws random small configurations and compares analytic gradients
against central differences via ``grad_check``. The loss configurations keep
their scaling parameter moderate: large scales (e.g. the proxy-anchor default
alpha of 32) drive saturated coordinates' true gradients below the
finite-difference noise floor, which would measure the probe, not the code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ConditionalBatchNorm, Linear
from .losses import EmbeddingBatch, LossParams, ProxyBank, j_met
from .ot import SinkhornParams, cosine_cost, sinkhorn
from .synthesis import ConditionalGenerator, generate
from .tensor import Tensor, grad_check, l2_normalize


@dataclass
class OpReport:
    name: str
    configurations: int
    worst_error: float
    tolerance: float

    @property
    def passed(self):
        return self.worst_error <= self.tolerance


def _weighted_sum(out, weights):
    return (out * weights).sum()


def _check_linear(rng, h):
    b, d_in, d_out = rng.integers(2, 6), rng.integers(2, 6), rng.integers(2, 5)
    layer = Linear(int(d_in), int(d_out), rng)
    x = Tensor(rng.standard_normal((b, d_in)), requires_grad=True)
    w = rng.standard_normal((b, d_out))
    return grad_check(lambda: _weighted_sum(layer(x), w),
                      [layer.weight, layer.bias, x], h=h)


def _check_cbn(rng, h):
    b, dim, classes = int(rng.integers(3, 7)), int(rng.integers(2, 6)), int(rng.integers(1, 5))
    cbn = ConditionalBatchNorm(classes, dim)
    cbn.gamma.data[:] = rng.standard_normal((classes, dim))
    cbn.beta.data[:] = rng.standard_normal((classes, dim))
    x = Tensor(rng.standard_normal((b, dim)), requires_grad=True)
    labels = rng.integers(0, classes, size=b)
    w = rng.standard_normal((b, dim))
    return grad_check(lambda: _weighted_sum(cbn(x, labels), w),
                      [cbn.gamma, cbn.beta, x], h=h)


def _check_l2_normalize(rng, h):
    b, dim = int(rng.integers(2, 6)), int(rng.integers(2, 7))
    x = Tensor(rng.standard_normal((b, dim)) * 2.0, requires_grad=True)
    w = rng.standard_normal((b, dim))
    return grad_check(lambda: _weighted_sum(l2_normalize(x), w), [x], h=h)


def _loss_checker(kind):
    def check(rng, h):
        b, dim = int(rng.integers(4, 8)), 8
        num_real, num_novel = int(rng.integers(3, 6)), int(rng.integers(0, 3))
        params = LossParams(
            kind,
            alpha=float(rng.uniform(4.0, 12.0)),
            delta=float(rng.uniform(0.05, 0.3)),
            temperature=float(rng.uniform(0.5, 2.0)),
        )
        raw = Tensor(rng.standard_normal((b, dim)), requires_grad=True)
        labels = rng.integers(1, num_real + 1, size=b)
        bank = ProxyBank.initialize(num_real, num_novel, dim, rng)

        def f():
            return j_met(EmbeddingBatch(l2_normalize(raw), labels), bank, params)

        return grad_check(f, [raw] + bank.parameters(), h=h)

    return check


def _check_generator(rng, h):
    # redraw configurations whose smallest nonzero gradient coordinate sits
    # below ~1e-6: central differences cannot resolve those against roundoff,
    # so the probe (not the gradient) would fail
    from .tensor import backward

    for _ in range(20):
        num_classes = int(rng.integers(1, 4))
        dim = 4
        gen = ConditionalGenerator(num_classes, first_label=4, output_dim=dim,
                                   rng=rng, hidden_dim=6)
        bank = ProxyBank.initialize(3, num_classes, dim, rng)
        labels = rng.integers(4, 4 + num_classes, size=3)
        noise = Tensor(rng.standard_normal((3, 16)))
        params = LossParams("proxy_anchor", alpha=float(rng.uniform(4.0, 10.0)))

        def f():
            return j_met(generate(gen, labels, noise), bank, params)

        backward(f())
        floor = min(
            np.abs(g[g != 0.0]).min() if np.any(g != 0.0) else np.inf
            for g in (p.grad for p in gen.parameters())
        )
        for p in gen.parameters():
            p.zero_grad()
        if floor >= 1e-6:
            break
    return grad_check(f, gen.parameters(), h=h)


def _check_sinkhorn(rng, h):
    n, m = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    # fixed iteration count: finite differences then probe exactly the
    # function the unrolled graph computes
    params = SinkhornParams(
        epsilon=float(rng.uniform(0.05, 0.2)),
        max_iterations=80,
        convergence_tol=0.0,
    )
    xp = Tensor(rng.standard_normal((n, 3)), requires_grad=True)
    xq = Tensor(rng.standard_normal((m, 3)), requires_grad=True)

    def f():
        value, _ = sinkhorn(cosine_cost(l2_normalize(xp), l2_normalize(xq)), params)
        return value

    return grad_check(f, [xp, xq], h=h)


# name -> (runner, step size h, tolerance)
SUITE = {
    "linear": (_check_linear, 1e-5, 1e-4),
    "conditional_batch_norm": (_check_cbn, 1e-5, 1e-4),
    "l2_normalize": (_check_l2_normalize, 1e-5, 1e-4),
    "proxy_anchor": (_loss_checker("proxy_anchor"), 3e-5, 1e-4),
    "proxy_nca": (_loss_checker("proxy_nca"), 3e-5, 1e-4),
    "norm_softmax": (_loss_checker("norm_softmax"), 3e-5, 1e-4),
    "generator_forward": (_check_generator, 7e-6, 1e-4),
    "sinkhorn_value": (_check_sinkhorn, 1e-5, 1e-3),
}


def run_gradient_suite(configurations=50, seed=20240517, only=None):
    """Run every op check at ``configurations`` random configs; return reports."""
    import zlib

    reports = []
    for name, (runner, h, tol) in SUITE.items():
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        for _ in range(configurations):
            worst = max(worst, runner(rng, h))
        reports.append(OpReport(name, configurations, worst, tol))
    return reports
