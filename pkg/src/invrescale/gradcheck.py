"""Central finite-difference verification of every taped primitive and the
key composites (coupling block, full objective).

Each check builds a scalar probe loss sum(op(inputs) * R) with a fixed
random R, compares the taped gradient against central differences in f64,
and reports the worst relative error.  Composites subsample parameter
coordinates (checking every one of thousands of weights would add nothing).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import LossWeights, total_loss
from .network import InvBlock, LatentSpec, RescaleModel
from .tensor import Parameter, Tape, Tensor
from .wavelet import haar_forward, haar_inverse

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
FD_STEP = 1e-5

PERTURB_ENV = "INVRESCALE_GRADCHECK_PERTURB"


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-6, abs(analytic) + abs(numeric))


def _check_params(name: str, params: Sequence[Parameter], loss_fn: Callable[[], float],
                  grad_fn: Callable[[], list[np.ndarray]], tol: float,
                  max_coords: int | None, h: float = FD_STEP) -> CheckResult:
    grads = grad_fn()
    if os.environ.get(PERTURB_ENV) == name:
        grads = [g + 1e-2 for g in grads]  # test hook: sabotage to prove the harness fails
    rng = np.random.default_rng(1234)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, _rel_err(float(gflat[i]), fd))
    return CheckResult(name, worst, tol)


def _probe_check(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray],
                 tol: float = PRIMITIVE_TOL) -> CheckResult:
    params = [Parameter(a.astype(np.float64)) for a in inputs]
    out_shape = fn(*params).data.shape
    probe = Tensor(np.random.default_rng(7).standard_normal(out_shape))

    def run():
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(fn(*params), probe))
        return tape, loss

    def loss_fn() -> float:
        return run()[1].item()

    def grad_fn() -> list[np.ndarray]:
        for p in params:
            p.zero_grad()
        tape, loss = run()
        tape.backward(loss)
        return [p.grad.copy() for p in params]

    return _check_params(name, params, loss_fn, grad_fn, tol, max_coords=None)


def check_primitives() -> list[CheckResult]:
    # 150 points per operand so every primitive is exercised at >= 100
    # random points.
    rng = np.random.default_rng(42)
    a = rng.standard_normal((2, 3, 5, 5))
    b = rng.standard_normal((2, 3, 5, 5))
    away = a + 0.2 * np.sign(a)  # keep |x| > 0.1 for kinked/absolute ops
    pos = np.abs(a) + 0.5
    x = rng.standard_normal((2, 3, 6, 6))
    k3 = rng.standard_normal((4, 3, 3, 3))
    k1 = rng.standard_normal((4, 3, 1, 1))
    bias = rng.standard_normal(4)
    even = rng.standard_normal((1, 3, 6, 6))
    coeffs = rng.standard_normal((1, 12, 3, 3))

    checks = [
        ("add", lambda u, v: T.add(u, v), [a, b]),
        ("sub", lambda u, v: T.sub(u, v), [a, b]),
        ("mul", lambda u, v: T.mul(u, v), [a, b]),
        ("scale", lambda u: T.scale(u, -1.7), [a]),
        ("shift", lambda u: T.shift(u, 0.3), [a]),
        ("exp", lambda u: T.exp(u), [a]),
        ("sigmoid", lambda u: T.sigmoid(u), [a]),
        ("leaky_relu", lambda u: T.leaky_relu(u, 0.2), [away]),
        ("absolute", lambda u: T.absolute(u), [away]),
        ("sqrt", lambda u: T.sqrt(u), [pos]),
        ("concat", lambda u, v: T.concat([u, v]), [a, b]),
        ("narrow", lambda u: T.narrow(u, 1, 2), [a]),
        ("conv2d_1x1", lambda u, kk, bb: T.conv2d(u, kk, bb), [x, k1, bias]),
        ("conv2d_3x3", lambda u, kk, bb: T.conv2d(u, kk, bb), [x, k3, bias]),
        ("reduce_sum", lambda u: T.reduce_sum(u), [a]),
        ("reduce_mean", lambda u: T.reduce_mean(u), [a]),
        ("reduce_sumsq", lambda u: T.reduce_sumsq(u), [a]),
        ("haar_forward", haar_forward, [even]),
        ("haar_inverse", haar_inverse, [coeffs]),
    ]
    return [_probe_check(name, fn, inputs) for name, fn, inputs in checks]


def check_invblock(max_coords: int = 8) -> CheckResult:
    rng = np.random.default_rng(5)
    block = InvBlock(3, 5, growth=4, clamp=1.0, rng=rng, dtype="f64", name="gc")
    # Unfreeze the zero-initialized final layers so every parameter matters.
    for p in block.parameters():
        if not p.data.any():
            p.assign(0.1 * rng.standard_normal(p.data.shape))
    h1 = Tensor(rng.standard_normal((2, 3, 4, 4)))
    h2 = Tensor(rng.standard_normal((2, 5, 4, 4)))
    probe1 = Tensor(rng.standard_normal((2, 3, 4, 4)))
    probe2 = Tensor(rng.standard_normal((2, 5, 4, 4)))
    params = block.parameters()

    def run():
        with Tape() as tape:
            o1, o2 = block.forward(h1, h2)
            loss = T.reduce_sum(T.mul(o1, probe1)) + T.reduce_sum(T.mul(o2, probe2))
        return tape, loss

    def loss_fn() -> float:
        return run()[1].item()

    def grad_fn():
        for p in params:
            p.zero_grad()
        tape, loss = run()
        tape.backward(loss)
        return [p.grad.copy() for p in params]

    return _check_params("invblock", params, loss_fn, grad_fn, COMPOSITE_TOL, max_coords)


def check_total_loss(max_coords: int = 5) -> CheckResult:
    rng = np.random.default_rng(9)
    model = RescaleModel(scale=2, latent=LatentSpec(2, "gaussian", "zero"),
                         blocks_per_stage=2, growth=4, dtype="f64", seed=11)
    for p in model.parameters():
        if not p.data.any():
            p.assign(0.05 * rng.standard_normal(p.data.shape))
    x = Tensor(rng.random((1, 3, 8, 8)))
    weights = LossWeights(recon=1.0, guide=4.0, dist=1e-2, invariance=1.0, samples=3)
    params = model.parameters()

    def run():
        # Fresh identically-seeded latent draws keep the loss a deterministic
        # function of the parameters; quantization is off because rounding is
        # not finite-difference checkable (the straight-through rule is
        # verified separately).
        with Tape() as tape:
            loss, _ = total_loss(model, x, weights, np.random.default_rng(77),
                                 quantize=False)
        return tape, loss

    def loss_fn() -> float:
        return run()[1].item()

    def grad_fn():
        for p in params:
            p.zero_grad()
        tape, loss = run()
        tape.backward(loss)
        return [p.grad.copy() for p in params]

    return _check_params("total_loss", params, loss_fn, grad_fn, COMPOSITE_TOL, max_coords)


def run_all(size: str = "tiny") -> list[CheckResult]:
    results = check_primitives()
    results.append(check_invblock())
    if size != "tiny":
        results.append(check_total_loss())
    return results
