"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines and measured margins.
"""

import time

import numpy as np
import pytest

import reld
from reld.cli import main as cli_main
from reld.image import make_phantom, psnr, save_image
from reld.linop import Compose, Decimate, Identity, PeriodicConv, gaussian_psf
from reld.prior import (
    BlockDCTCodec,
    GaussianPriorPredictor,
    IdentityCodec,
    MLPPredictor,
    generative_map,
    generative_map_vjp,
    make_denoising_dataset,
    train_predictor,
)
from reld.prox import ProxProblem, prox_cg, prox_deblur_fft, prox_sr_fft
from reld.diffusion import LatentState, build_schedule, forward_marginal, forward_step, reverse_diffusion
from reld.solver import PriorBundle, SolverConfig, reld_solve


def report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def materialize(op):
    h, w = op.input_shape
    oh, ow = op.output_shape
    mat = np.empty((oh * ow, h * w))
    basis = np.zeros((h, w))
    for j in range(h * w):
        basis.flat[j] = 1.0
        mat[:, j] = op.apply(basis).ravel()
        basis.flat[j] = 0.0
    return mat


def test_01_operator_adjoint_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for shape in [(8, 8), (16, 16), (32, 32)]:
        kernel = gaussian_psf(rng.uniform(0.5, 2.0), 5)
        ops = [
            Identity(shape),
            PeriodicConv(kernel, shape),
            Decimate(2, shape),
            Compose(Decimate(2, shape), PeriodicConv(kernel, shape)),
        ]
        for op in ops:
            for _ in range(50):
                x = rng.standard_normal(op.input_shape)
                y = rng.standard_normal(op.output_shape)
                ax = op.apply(x)
                err = abs(float(np.vdot(ax, y)) - float(np.vdot(x, op.adjoint(y))))
                worst = max(worst, err / (np.linalg.norm(ax) * np.linalg.norm(y)))
    elapsed = time.perf_counter() - start
    report(
        "operator adjoint suite",
        worst <= 1e-10 and elapsed < 5.0,
        f"worst rel err {worst:.2e} (tol 1e-10), {elapsed:.2f}s (limit 5s)",
    )


def test_02_deblur_prox_vs_dense_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    shape = (16, 16)
    worst = 0.0
    for _ in range(10):
        op = PeriodicConv(gaussian_psf(rng.uniform(0.4, 2.5), 5), shape)
        b = rng.standard_normal(shape)
        r = rng.standard_normal(shape)
        mu = float(rng.uniform(0.05, 10.0))
        t = prox_deblur_fft(ProxProblem(op, b, r, mu))
        amat = materialize(op)
        t_dense = np.linalg.solve(
            amat.T @ amat + mu * np.eye(256), amat.T @ b.ravel() + mu * r.ravel()
        ).reshape(shape)
        worst = max(worst, np.linalg.norm(t - t_dense) / np.linalg.norm(t_dense))
    elapsed = time.perf_counter() - start
    report(
        "deblur prox vs dense normal equations",
        worst <= 1e-8 and elapsed < 10.0,
        f"worst rel err {worst:.2e} (tol 1e-8), {elapsed:.2f}s (limit 10s)",
    )


def test_03_sr_prox_vs_cg_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(103)
    shape = (16, 16)
    worst = 0.0
    for d in (2, 4):
        op = Compose(Decimate(d, shape), PeriodicConv(gaussian_psf(1.2, 5), shape))
        problem = ProxProblem(
            op, rng.standard_normal(op.output_shape), rng.standard_normal(shape),
            float(rng.uniform(0.1, 2.0)),
        )
        t_fast = prox_sr_fft(problem)
        t_cg = prox_cg(problem, tol=1e-10, max_iter=5000).image
        worst = max(worst, np.linalg.norm(t_fast - t_cg) / np.linalg.norm(t_cg))
    elapsed = time.perf_counter() - start
    report(
        "sr prox (Woodbury) vs CG oracle",
        worst <= 1e-6 and elapsed < 10.0,
        f"worst rel err {worst:.2e} (tol 1e-6), {elapsed:.2f}s (limit 10s)",
    )


def test_04_schedule_consistency():
    sched = build_schedule(1000)
    prod_err = float(np.max(np.abs(np.sqrt(sched.alpha_bar[1:]) - np.cumprod(np.sqrt(sched.alpha)))))

    rng = np.random.default_rng(104)
    n = 10_000
    z0_value = 1.7
    stat_ok = True
    details = [f"sqrt-product err {prod_err:.2e} (tol 1e-12)"]
    for t_target in (100, 1000):
        chain = np.full(n, z0_value)
        for t in range(1, t_target + 1):
            chain = forward_step(chain, sched.beta_at(t), rng.standard_normal(n))
        ab = sched.alpha_bar_at(t_target)
        marginal = forward_marginal(np.full(n, z0_value), ab, rng.standard_normal(n))
        mean_se = np.sqrt(1.0 - ab) / np.sqrt(n)
        var_se = (1.0 - ab) * np.sqrt(2.0 / (n - 1))
        for label, sample in (("chain", chain), ("marginal", marginal)):
            dm = abs(sample.mean() - np.sqrt(ab) * z0_value) / mean_se
            dv = abs(sample.var(ddof=1) - (1.0 - ab)) / var_se
            stat_ok = stat_ok and dm <= 4.0 and dv <= 4.0
            details.append(f"t={t_target} {label}: mean {dm:.2f} SE, var {dv:.2f} SE")
    report(
        "schedule consistency",
        prod_err <= 1e-12 and stat_ok,
        "; ".join(details),
    )


def test_05_ddim_exactness_oracle():
    sched = build_schedule(1000)
    rng = np.random.default_rng(105)
    m = rng.standard_normal(24)
    predictor = GaussianPriorPredictor(m, tau=0.0, schedule=sched)
    worst = 0.0
    for p in (1, 10, 50):
        v = LatentState(rng.standard_normal(6), 10.0 * rng.standard_normal(24))
        out = reverse_diffusion(v, p, predictor, sched)
        worst = max(worst, float(np.max(np.abs(out.z - m))))
    report(
        "sampler exactness with point-mass prior",
        worst <= 1e-10,
        f"worst deviation {worst:.2e} (tol 1e-10) over p in {{1, 10, 50}}",
    )


def test_06_gradient_correctness():
    sched = build_schedule(60, 5e-3, 5e-2)
    codec = IdentityCodec((5, 5))
    s1 = s2 = codec.latent_size  # s = 50 <= 64
    net = MLPPredictor.initialize(s1, s2, hidden=16, schedule=sched, seed=66)
    rng = np.random.default_rng(106)
    v = LatentState(rng.standard_normal(s1), rng.standard_normal(s2))
    w = rng.standard_normal((5, 5))
    p = 3
    g = generative_map_vjp(v, w, p, net, sched, codec).concat()

    def f(vec):
        state = LatentState.from_concat(vec, s1)
        return float(np.vdot(generative_map(state, p, net, sched, codec), w))

    v0 = v.concat()
    h = 1e-5
    worst = 0.0
    for _ in range(20):
        u = rng.standard_normal(v0.size)
        u /= np.linalg.norm(u)
        fd = (f(v0 + h * u) - f(v0 - h * u)) / (2 * h)
        worst = max(worst, abs(float(g @ u) - fd) / max(abs(fd), 1e-12))
    report(
        "generative-map gradient vs finite differences",
        worst <= 1e-4,
        f"worst rel err {worst:.2e} (tol 1e-4) over 20 directions",
    )


def test_07_toy_training_oracle():
    start = time.perf_counter()
    sched = build_schedule(1000)
    rng = np.random.default_rng(107)
    s2 = 16
    dataset = [(rng.standard_normal(s2), np.zeros(2)) for _ in range(512)]
    net = train_predictor(dataset, sched, steps=4000, seed=8, hidden=64, batch_size=128, lr=3e-3)

    held = np.random.default_rng(108)
    n = 4000
    t = held.integers(1, 1001, n)
    z0 = held.standard_normal((n, s2))
    eps = held.standard_normal((n, s2))
    ab = sched.alpha_bar[t]
    zt = np.sqrt(ab)[:, None] * z0 + np.sqrt(1 - ab)[:, None] * eps
    pred, _ = net.eps_batch(np.zeros((n, 2)), zt, t)
    bayes = np.sqrt(1 - ab)[:, None] * zt  # analytic predictor for m=0, tau=1
    gap = float(np.mean((pred - bayes) ** 2))
    elapsed = time.perf_counter() - start
    report(
        "toy training vs Bayes oracle",
        gap <= 0.05 and elapsed < 300.0,
        f"held-out MSE gap to analytic predictor {gap:.4f} (tol 0.05), {elapsed:.1f}s (limit 300s)",
    )


@pytest.fixture(scope="module")
def smoke_prior():
    shape = (64, 64)
    codec = BlockDCTCodec(shape, block_size=8, kept=10)
    sched = build_schedule(10, 0.02, 0.35)
    rng = np.random.default_rng(99)
    images = [make_phantom(*shape, seed=int(s)) for s in rng.integers(0, 2**31, 256)]
    dataset = make_denoising_dataset(images, codec, sigma_max=0.25, seed=5)
    net = train_predictor(dataset, sched, steps=3000, seed=5, hidden=96, batch_size=64, lr=2e-3)
    return PriorBundle(codec, net, sched)


def test_08_end_to_end_smoke_restoration(smoke_prior):
    shape = (64, 64)
    gt = make_phantom(*shape, seed=1234)
    sigma_a = 1.0
    op = PeriodicConv(gaussian_psf(sigma_a, reld.default_psf_size(sigma_a)), shape)
    b = reld.awgn_corrupt(op.apply(gt), 25.0 / 255.0, seed=7)

    cfg = SolverConfig(p=10, mu0=1.0, gamma=1.01, eta=1e-3, k_max=100, seed=3)
    start = time.perf_counter()
    x_star, trace = reld_solve(b, op, smoke_prior, cfg)
    elapsed = time.perf_counter() - start
    x_again, _ = reld_solve(b, op, smoke_prior, cfg)

    psnr_b = psnr(gt, np.clip(b, 0, 1))
    psnr_x = psnr(gt, np.clip(x_star, 0, 1))
    deterministic = np.array_equal(x_star, x_again)
    report(
        "end-to-end smoke restoration",
        psnr_x >= psnr_b + 1.0 and deterministic and elapsed < 120.0 and len(trace) == 100,
        f"PSNR {psnr_b:.2f} -> {psnr_x:.2f} dB (need +1.0), deterministic={deterministic}, "
        f"solve {elapsed:.1f}s (limit 120s)",
    )


def test_09_ablation_harness(tmp_path):
    gt_path = tmp_path / "gt.png"
    save_image(make_phantom(16, 16, seed=13), gt_path, bit_depth=16)
    out = tmp_path / "sweep.csv"
    (tmp_path / "s.cfg").write_text(
        f"""
task = deblur
seed = 2
degrade.sigma_a = 1.0
degrade.sigma_eta = 15
io.input = {gt_path}
io.sweep = {out}
prior.codec = identity
prior.predictor = analytic
prior.mean = 0.5
prior.tau = 0.3
schedule.t = 30
solver.p = 5
solver.k_max = 4
"""
    )
    cfg = str(tmp_path / "s.cfg")

    code = cli_main([
        "sweep", "--config", cfg, "--workers", "2",
        "--grid", "solver.mu0=lin:0.05:2:40",
        "--grid", "solver.gamma=1,1.01,1.05",
    ])
    lines = out.read_text().strip().splitlines()
    grid_ok = code == 0 and len(lines) == 1 + 40 * 3
    all_ok = all(line.split(",")[-1] == "ok" for line in lines[1:])

    code_p = cli_main(["sweep", "--config", cfg, "--grid", "solver.p=1,5,10,15"])
    lines_p = out.read_text().strip().splitlines()
    psnrs = [float(line.split(",")[1]) for line in lines_p[1:]]
    p_ok = code_p == 0 and len(lines_p) == 5 and len(set(psnrs)) > 1

    report(
        "ablation sweep harness",
        grid_ok and all_ok and p_ok,
        f"mu0 x gamma grid rows {len(lines) - 1} (need 120), statuses ok={all_ok}; "
        f"p-sweep PSNR values {sorted(set(round(v, 2) for v in psnrs))} (non-degenerate)",
    )
