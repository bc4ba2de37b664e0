"""Quick oracle suite behind the ``selftest`` CLI subcommand.

Each check pits a fast code path against an independent slow one (dot-product
identities, dense linear algebra, conjugate gradients, finite differences)
and prints one pass/fail line.  Runs in a few seconds.
"""

from __future__ import annotations

import numpy as np

from .diffusion import LatentState, build_schedule, reverse_diffusion
from .linop import Compose, Decimate, Identity, LinearOperator, PeriodicConv, gaussian_psf
from .prior import GaussianPriorPredictor, MLPPredictor, generative_map, generative_map_vjp, IdentityCodec
from .prox import ProxProblem, prox_cg, prox_deblur_fft, prox_sr_fft


def materialize(op: LinearOperator) -> np.ndarray:
    """Dense matrix of an operator on single-channel images (columns = basis responses)."""
    h, w = op.input_shape
    oh, ow = op.output_shape
    mat = np.empty((oh * ow, h * w))
    basis = np.zeros((h, w))
    for j in range(h * w):
        basis.flat[j] = 1.0
        mat[:, j] = op.apply(basis).ravel()
        basis.flat[j] = 0.0
    return mat


def _check_adjoints(rng: np.random.Generator) -> float:
    shape = (16, 16)
    kernel = gaussian_psf(1.2, 5)
    ops = [
        Identity(shape),
        PeriodicConv(kernel, shape),
        Decimate(2, shape),
        Compose(Decimate(2, shape), PeriodicConv(kernel, shape)),
    ]
    worst = 0.0
    for op in ops:
        for _ in range(20):
            x = rng.standard_normal(op.input_shape)
            y = rng.standard_normal(op.output_shape)
            ax = op.apply(x)
            err = abs(float(np.vdot(ax, y)) - float(np.vdot(x, op.adjoint(y))))
            worst = max(worst, err / (np.linalg.norm(ax) * np.linalg.norm(y)))
    return worst


def _check_deblur_prox(rng: np.random.Generator) -> float:
    shape = (16, 16)
    worst = 0.0
    for _ in range(3):
        op = PeriodicConv(gaussian_psf(rng.uniform(0.5, 2.0), 5), shape)
        b = rng.standard_normal(shape)
        r = rng.standard_normal(shape)
        mu = float(rng.uniform(0.1, 5.0))
        t_fft = prox_deblur_fft(ProxProblem(op, b, r, mu))
        amat = materialize(op)
        t_dense = np.linalg.solve(
            amat.T @ amat + mu * np.eye(amat.shape[1]), amat.T @ b.ravel() + mu * r.ravel()
        ).reshape(shape)
        worst = max(worst, np.linalg.norm(t_fft - t_dense) / np.linalg.norm(t_dense))
    return worst


def _check_sr_prox(rng: np.random.Generator) -> float:
    shape = (16, 16)
    worst = 0.0
    for d in (2, 4):
        op = Compose(Decimate(d, shape), PeriodicConv(gaussian_psf(1.2, 5), shape))
        b = rng.standard_normal(op.output_shape)
        r = rng.standard_normal(shape)
        mu = float(rng.uniform(0.1, 5.0))
        problem = ProxProblem(op, b, r, mu)
        t_fast = prox_sr_fft(problem)
        t_cg = prox_cg(problem, tol=1e-10, max_iter=2000).image
        worst = max(worst, np.linalg.norm(t_fast - t_cg) / np.linalg.norm(t_cg))
    return worst


def _check_schedule() -> float:
    sched = build_schedule(1000)
    prod = np.cumprod(np.sqrt(sched.alpha))
    return float(np.max(np.abs(np.sqrt(sched.alpha_bar[1:]) - prod)))


def _check_ddim_exact(rng: np.random.Generator) -> float:
    sched = build_schedule(1000)
    m = rng.standard_normal(12)
    predictor = GaussianPriorPredictor(m, tau=0.0, schedule=sched)
    worst = 0.0
    for p in (1, 10, 50):
        v = LatentState(rng.standard_normal(3), 5.0 * rng.standard_normal(12))
        out = reverse_diffusion(v, p, predictor, sched)
        worst = max(worst, float(np.max(np.abs(out.z - m))))
    return worst


def _check_vjp(rng: np.random.Generator) -> float:
    sched = build_schedule(40)
    s1, s2, p = 4, 9, 3
    codec = IdentityCodec((3, 3))
    net = MLPPredictor.initialize(s1, s2, hidden=8, schedule=sched, seed=7)
    v = LatentState(rng.standard_normal(s1), rng.standard_normal(s2))
    w = rng.standard_normal((3, 3))
    g = generative_map_vjp(v, w, p, net, sched, codec).concat()

    def f(vec: np.ndarray) -> float:
        st = LatentState.from_concat(vec, s1)
        return float(np.vdot(generative_map(st, p, net, sched, codec), w))

    worst = 0.0
    h = 1e-5
    v0 = v.concat()
    for _ in range(10):
        u = rng.standard_normal(v0.size)
        fd = (f(v0 + h * u) - f(v0 - h * u)) / (2 * h)
        worst = max(worst, abs(float(g @ u) - fd) / max(abs(fd), 1e-12))
    return worst


def run_selftest(verbose: bool = True) -> bool:
    rng = np.random.default_rng(20240501)
    checks = [
        ("operator adjoint dot tests", _check_adjoints(rng), 1e-10),
        ("deblur prox vs dense solve", _check_deblur_prox(rng), 1e-8),
        ("sr prox vs conjugate gradients", _check_sr_prox(rng), 1e-6),
        ("schedule product consistency", _check_schedule(), 1e-12),
        ("sampler exactness (point-mass prior)", _check_ddim_exact(rng), 1e-10),
        ("generative map vjp vs finite differences", _check_vjp(rng), 1e-4),
    ]
    ok = True
    for name, err, tol in checks:
        passed = err <= tol
        ok = ok and passed
        if verbose:
            status = "PASS" if passed else "FAIL"
            print(f"[{status}] {name}: err={err:.3e} (tol {tol:.0e})")
    return ok
