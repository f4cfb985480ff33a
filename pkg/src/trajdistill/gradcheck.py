"""Finite-difference verification of every differentiable path in the package.

Three families of checks:

* first-order: each registered op, reduced to a scalar by a fixed random
  weighting, against central differences;
* second-order: the gradient of ``||grad f||^2`` for every smooth op, and
  the parameter gradient of the input-gradient penalty;
* meta-gradient: the matching loss differentiated through a short unrolled
  student run, with respect to synthetic pixels and the step size.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FIRST_ORDER_TOL = 1e-6
SECOND_ORDER_TOL = 1e-4
# gradients that vanish exactly are compared against finite-difference noise
SCALE_FLOOR = 1e-6


def _err(a, b) -> float:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), SCALE_FLOOR)
    return float(np.linalg.norm(a - b) / scale)


@dataclass(frozen=True)
class CheckResult:
    name: str
    kind: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.kind:<12} {self.name:<28} rel_err={self.error:.2e} (tol {self.tol:.0e})"


@dataclass(frozen=True)
class OpCase:
    """``fn`` maps input Tensors to a Tensor; ``inputs`` builds the arrays."""

    name: str
    fn: Callable
    inputs: Callable
    smooth: bool = True


def _rng(name: str) -> np.random.Generator:
    return np.random.default_rng(sum(map(ord, name)))


def _normal(*shape):
    return lambda r: r.normal(size=shape)


def _positive(*shape):
    return lambda r: r.uniform(0.5, 2.0, size=shape)


def _away_from_zero(*shape):
    return lambda r: r.choice([-1.0, 1.0], size=shape) * r.uniform(0.2, 1.5, size=shape)


def _inputs(*makers):
    return lambda r: [m(r) for m in makers]


_LABELS = np.array([0, 2, 1, 2])

OP_CASES = [
    OpCase("add", lambda a, b: a + b, _inputs(_normal(3, 4), _normal(4))),
    OpCase("sub", lambda a, b: a - b, _inputs(_normal(3, 4), _normal(3, 1))),
    OpCase("neg", lambda a: -a, _inputs(_normal(5))),
    OpCase("mul", lambda a, b: a * b, _inputs(_normal(2, 3), _normal(2, 3))),
    OpCase("div", lambda a, b: a / b, _inputs(_normal(2, 3), _positive(2, 3))),
    OpCase("power", lambda a: a ** 3.0, _inputs(_normal(4))),
    OpCase("exp", lambda a: ad.exp(a), _inputs(_normal(4))),
    OpCase("log", lambda a: ad.log(a), _inputs(_positive(4))),
    OpCase("sqrt", lambda a: ad.sqrt(a), _inputs(_positive(4))),
    OpCase("relu", lambda a: ad.relu(a), _inputs(_away_from_zero(3, 4)), smooth=False),
    OpCase("sum", lambda a: ad.tsum(a, axis=1), _inputs(_normal(3, 4))),
    OpCase("mean", lambda a: ad.mean(a, axis=0, keepdims=True), _inputs(_normal(3, 4))),
    OpCase("reshape", lambda a: ad.reshape(a, (2, 6)) ** 2.0, _inputs(_normal(3, 4))),
    OpCase("transpose", lambda a: ad.transpose(a, (2, 0, 1)) ** 2.0, _inputs(_normal(2, 3, 4))),
    OpCase("swapaxes", lambda a: ad.swapaxes(a, 0, 2) ** 2.0, _inputs(_normal(2, 3, 4))),
    OpCase("getitem_basic", lambda a: a[1:, ::2] ** 2.0, _inputs(_normal(3, 4))),
    OpCase("getitem_fancy", lambda a: a[np.array([0, 2, 2]), np.array([1, 0, 1])] ** 2.0,
           _inputs(_normal(3, 4))),
    OpCase("broadcast_to", lambda a: ad.broadcast_to(a, (3, 4)) ** 2.0, _inputs(_normal(1, 4))),
    OpCase("sum_to", lambda a: ad.sum_to(a, (1, 4)) ** 2.0, _inputs(_normal(3, 4))),
    OpCase("pad2d", lambda a: ad.pad2d(a, 1) ** 2.0, _inputs(_normal(1, 2, 3, 3))),
    OpCase("concat", lambda a, b: ad.concat([a, b], axis=1) ** 2.0,
           _inputs(_normal(2, 3), _normal(2, 2))),
    OpCase("matmul", lambda a, b: a @ b, _inputs(_normal(3, 4), _normal(4, 2))),
    OpCase("matmul_batched", lambda a, b: a @ b, _inputs(_normal(2, 3, 4), _normal(4, 2))),
    OpCase("conv2d", lambda x, w, b: ad.conv2d(x, w, b, padding=1),
           _inputs(_normal(2, 2, 4, 4), _normal(3, 2, 3, 3), _normal(3))),
    OpCase("instance_norm", lambda x, g, b: ad.instance_norm(x, g, b),
           _inputs(_normal(2, 3, 3, 3), _positive(3), _normal(3))),
    OpCase("avg_pool2d", lambda x: ad.avg_pool2d(x, 2) ** 2.0, _inputs(_normal(1, 2, 4, 4))),
    OpCase("logsumexp", lambda x: ad.logsumexp(x, axis=1), _inputs(_normal(3, 5))),
    OpCase("log_softmax", lambda x: ad.log_softmax(x, axis=1), _inputs(_normal(3, 5))),
    OpCase("softmax", lambda x: ad.softmax(x, axis=1), _inputs(_normal(3, 5))),
    OpCase("cross_entropy", lambda x: ad.cross_entropy(x, _LABELS), _inputs(_normal(4, 3))),
    OpCase("cross_entropy_none", lambda x: ad.cross_entropy(x, _LABELS, reduction="none"),
           _inputs(_normal(4, 3))),
    OpCase("l2_norm", lambda a: ad.l2_norm(a), _inputs(_normal(6))),
    OpCase("squared_distance", lambda a, b: ad.squared_distance(a, b), _inputs(_normal(6), _normal(6))),
]


def _scalarize(case: OpCase, arrays, weights=None):
    """``sum(out * W)`` with a fixed weighting, plus the weighting used."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = case.fn(*ts)
    if weights is None:
        weights = _rng(case.name + "/w").normal(size=out.shape)
    return ts, (out * Tensor(weights)).sum(), weights


def _fd_for_input(case: OpCase, arrays, i, weights, eps):
    def f(x):
        trial = list(arrays)
        trial[i] = x
        with ad.no_grad():
            ts = [Tensor(a) for a in trial]
            return float(np.sum(case.fn(*ts).data * weights))
    return ad.finite_diff(f, arrays[i], eps)


def check_op(case: OpCase, eps: float = 1e-5) -> CheckResult:
    arrays = case.inputs(_rng(case.name))
    ts, s, weights = _scalarize(case, arrays)
    grads = ad.grad(s, ts)
    err = max(_err(g.data, _fd_for_input(case, arrays, i, weights, eps))
              for i, g in enumerate(grads))
    return CheckResult(case.name, "first-order", err, FIRST_ORDER_TOL)


def check_op_second_order(case: OpCase, eps: float = 1e-5) -> CheckResult:
    """d/dx ||d s/dx||^2 against differences of the first-order gradient."""
    arrays = case.inputs(_rng(case.name))
    weights = None

    def grad_sq(xs, create):
        nonlocal weights
        ts, s, weights = _scalarize(case, xs, weights)
        gs = ad.grad(s, ts, create_graph=create)
        total = None
        for g in gs:
            term = (g * g).sum()
            total = term if total is None else total + term
        return ts, total

    ts, total = grad_sq(arrays, True)
    if not total.requires_grad:
        # linear op: the squared gradient is constant
        return CheckResult(case.name, "second-order", 0.0, SECOND_ORDER_TOL)
    hv = ad.grad(total, ts)
    errs = []
    for i, g in enumerate(hv):
        def f(x, i=i):
            trial = list(arrays)
            trial[i] = x
            return grad_sq(trial, False)[1].item()
        errs.append(_err(g.data, ad.finite_diff(f, arrays[i], eps)))
    return CheckResult(case.name, "second-order", max(errs), SECOND_ORDER_TOL)


def check_hessian_vector(eps: float = 1e-5) -> CheckResult:
    """grad of ||grad f||^2 for f(x) = x1*x2 at (1, 2); exact value is 2x."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = ad.grad(x[0] * x[1], [x], create_graph=True)
    (hv,) = ad.grad((g * g).sum(), [x])

    def gsq(a):
        return a[1] ** 2 + a[0] ** 2
    fd = ad.finite_diff(gsq, x.data, eps)
    return CheckResult("hessian_vector_x1x2", "second-order", _err(hv, fd), SECOND_ORDER_TOL)


def check_penalty(eps: float = 1e-5) -> CheckResult:
    """Parameter gradient of the input-gradient penalty on a 2-layer MLP."""
    from .buffer import gradient_penalty
    from .nn import ModelSpec, forward, init_params

    spec = ModelSpec("mlp", 1, 5, (4,), 3)
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, size=(6, 4))
    y = rng.integers(0, 3, size=6)
    theta0 = init_params(spec, 3).data

    def penalty(theta, create):
        th = Tensor(theta, requires_grad=create)
        xs = Tensor(x, requires_grad=True)
        per = ad.cross_entropy(forward(spec, th, xs), y, reduction="none")
        return th, gradient_penalty(per, xs, 1.0)

    th, p = penalty(theta0, True)
    (g,) = ad.grad(p, [th])
    fd = ad.finite_diff(lambda t: penalty(t, False)[1].item(), theta0, eps)
    return CheckResult("gradient_penalty_params", "second-order", _err(g, fd), SECOND_ORDER_TOL)


def meta_fixture(N: int = 3, M: int = 1, rho: float = 0.1, balance: bool = True):
    """A tiny MLP trajectory, synthetic set and config for meta-gradient checks."""
    from .buffer import OptimizerSettings, SmoothnessConfig, train_expert
    from .datasets import gen_blobs
    from .distill import DistillConfig, representative_init
    from .nn import ModelSpec, param_count

    spec = ModelSpec("mlp", 1, 8, (6,), 3)
    assert param_count(spec) <= 200
    data = gen_blobs(3, 20, 6, 0.1, seed=5)
    traj = train_expert(data, spec, SmoothnessConfig(), OptimizerSettings(lr=0.05, batch_size=20),
                        epochs=3, seed=1)
    syn = representative_init(data, traj, 1, seed=0, alpha0=0.05)
    cfg = DistillConfig(M=M, N=N, T_plus=1, rho=rho, balance=balance, outer_iters=1)
    return traj, syn, cfg


def check_meta_gradient(eps: float = 1e-5, N: int = 3, M: int = 1, start: int = 1,
                        rho: float = 0.1) -> CheckResult:
    """Matching loss through N unrolled student steps, w.r.t. pixels and alpha."""
    from .distill import SegmentPlan, segment_loss

    traj, syn, cfg = meta_fixture(N, M, rho)
    plan = SegmentPlan(0, start, perturb_seed=11, step_seeds=tuple(range(N)))

    def loss(images, alpha, track):
        img = Tensor(images, requires_grad=track)
        a = Tensor(alpha, requires_grad=track)
        total, _ = segment_loss(img, a, syn.labels, traj, plan, cfg)
        return img, a, total

    img, a, total = loss(syn.images, syn.alpha, True)
    g_img, g_a = ad.grad(total, [img, a])
    fd_img = ad.finite_diff(lambda x: loss(x, syn.alpha, False)[2].item(), syn.images, eps)
    fd_a = ad.finite_diff(lambda x: loss(syn.images, float(x), False)[2].item(),
                          np.array(syn.alpha), eps)
    err = max(_err(g_img, fd_img), _err(g_a, fd_a))
    return CheckResult(f"meta_gradient_N{N}_M{M}", "meta", err, SECOND_ORDER_TOL)


@dataclass
class SuiteReport:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max((r.error for r in self.results), default=0.0)

    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list:
        out = [r.line() for r in self.results]
        out.append(f"{'PASS' if self.passed else 'FAIL'}: {len(self.results) - len(self.failures())}"
                   f"/{len(self.results)} checks, max rel_err={self.max_error:.2e}, {self.seconds:.1f}s")
        return out


def run_suite(eps: float = 1e-5, cases=None, meta: bool = True) -> SuiteReport:
    t0 = time.perf_counter()
    cases = OP_CASES if cases is None else cases
    results = [check_op(c, eps) for c in cases]
    results += [check_op_second_order(c, eps) for c in cases if c.smooth]
    results += [check_hessian_vector(eps), check_penalty(eps)]
    if meta:
        results += [check_meta_gradient(eps, N=3, M=1), check_meta_gradient(eps, N=3, M=3, start=0)]
    return SuiteReport(results, time.perf_counter() - t0)


def eps_sweep(epsilons=(1e-4, 1e-5, 1e-6), cases=None) -> dict:
    """Max first-order error per op for each step size."""
    cases = OP_CASES if cases is None else cases
    return {c.name: [check_op(c, e).error for e in epsilons] for c in cases}


@contextlib.contextmanager
def injected_fault(op: str = "exp", factor: float = 1.01):
    """Temporarily scale one op's local derivative (mutation sanity check)."""
    original = getattr(ad, op)

    def faulty(a, *args, **kwargs):
        out = original(a, *args, **kwargs)
        if not out.requires_grad:
            return out
        (parent, vjp), *rest = out._parents
        out._parents = ((parent, lambda g: vjp(g) * factor), *rest)
        return out

    setattr(ad, op, faulty)
    try:
        yield
    finally:
        setattr(ad, op, original)
