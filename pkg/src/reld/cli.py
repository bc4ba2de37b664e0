"""Command-line harness: degrade images, restore them, run parameter sweeps.

Configuration is a flat key = value text file with dotted section names
(see SCHEMA below for every known key); unknown keys are rejected.  Noise
levels are accepted on the conventional 0-255 scale and divided by 255
internally.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .diffusion import build_schedule
from .image import awgn_corrupt, clip01, load_image, make_phantom, psnr, save_image
from .linop import Compose, Decimate, Identity, PeriodicConv, default_psf_size, gaussian_psf
from .prior import (
    BlockDCTCodec,
    GaussianPriorPredictor,
    IdentityCodec,
    MLPPredictor,
    TrainingDivergedError,
    ZeroPredictor,
    make_denoising_dataset,
    train_predictor,
)
from .selfcheck import run_selftest
from .solver import PriorBundle, SolverConfig, SolverDivergedError, reld_solve


class ConfigError(Exception):
    pass


def _parse_float_or_none(raw: str):
    return None if raw.lower() in ("none", "off") else float(raw)


def _choice(*options: str):
    def parse(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"must be one of {options}, got {raw!r}")
        return raw

    return parse


# key -> (parser, default); None default means optional/unset
SCHEMA: dict = {
    "task": (_choice("denoise", "deblur", "sr"), None),
    "seed": (int, 0),
    "degrade.sigma_a": (float, 0.0),
    "degrade.sigma_eta": (float, 0.0),  # 0-255 scale
    "degrade.psf_size": (int, 0),  # 0 = auto from sigma_a
    "degrade.d": (int, 1),
    "io.input": (str, None),
    "io.degraded": (str, None),
    "io.ground_truth": (str, None),
    "io.restored": (str, None),
    "io.trace": (str, None),
    "io.metadata": (str, None),
    "io.sweep": (str, None),
    "schedule.t": (int, 1000),
    "schedule.beta_start": (float, 1e-4),
    "schedule.beta_end": (float, 2e-2),
    "prior.codec": (_choice("identity", "block"), "block"),
    "prior.block_size": (int, 8),
    "prior.kept": (int, 10),
    "prior.predictor": (_choice("zero", "analytic", "mlp"), "zero"),
    "prior.tau": (float, 1.0),
    "prior.mean": (float, 0.0),
    "prior.weights": (str, None),
    "solver.p": (int, 10),
    "solver.mu0": (float, 1.0),
    "solver.gamma": (float, 1.01),
    "solver.eta": (float, 1e-3),
    "solver.k_max": (int, 100),
    "solver.rel_tol": (_parse_float_or_none, None),
    "solver.inner_steps": (int, 1),
    "train.samples": (int, 128),
    "train.steps": (int, 2000),
    "train.batch": (int, 32),
    "train.hidden": (int, 64),
    "train.lr": (float, 1e-3),
    "train.sigma_max": (float, 0.25),
    "train.height": (int, 64),
    "train.width": (int, 64),
    "train.channels": (int, 1),
    "train.out": (str, None),
}


def parse_config_text(text: str) -> dict:
    """Parse flat key = value lines into typed values; unknown keys are errors."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown configuration key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return values


def load_config(path: str | Path, seed_override: int | None = None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOError(f"cannot read config file {path}: {exc}") from exc
    values = parse_config_text(text)
    if values["task"] is None:
        raise ConfigError("config must set 'task' (denoise | deblur | sr)")
    if seed_override is not None:
        values["seed"] = seed_override
    _validate_task(values)
    return values


def _validate_task(cfg: dict) -> None:
    task = cfg["task"]
    if task == "deblur" and cfg["degrade.sigma_a"] <= 0:
        raise ConfigError("deblur requires degrade.sigma_a > 0")
    if task == "sr" and cfg["degrade.d"] < 2:
        raise ConfigError("sr requires degrade.d >= 2")
    if task != "sr" and cfg["degrade.d"] != 1:
        raise ConfigError(f"degrade.d applies to the sr task only (got {cfg['degrade.d']})")
    if cfg["prior.predictor"] == "mlp" and not cfg["prior.weights"]:
        raise ConfigError("prior.predictor = mlp requires prior.weights")


def _resolve_out(path: str | None, out_dir: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if out_dir is not None and not p.is_absolute():
        p = Path(out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _resolved_psf_size(cfg: dict, spatial: tuple[int, int]) -> int:
    size = cfg["degrade.psf_size"]
    if size == 0:
        size = default_psf_size(cfg["degrade.sigma_a"], spatial) if cfg["degrade.sigma_a"] > 0 else 1
    return size


def build_operator(cfg: dict, spatial: tuple[int, int]):
    """Degradation operator on the reconstruction grid given the task config."""
    task = cfg["task"]
    sigma_a = cfg["degrade.sigma_a"]
    if task == "denoise":
        return Identity(spatial)
    size = _resolved_psf_size(cfg, spatial)
    if task == "deblur":
        return PeriodicConv(gaussian_psf(sigma_a, size), spatial)
    dec = Decimate(cfg["degrade.d"], spatial)
    if sigma_a > 0:
        return Compose(dec, PeriodicConv(gaussian_psf(sigma_a, size), spatial))
    return dec


def build_prior(cfg: dict, image_shape: tuple[int, ...]) -> PriorBundle:
    schedule = build_schedule(cfg["schedule.t"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
    if cfg["prior.codec"] == "identity":
        codec = IdentityCodec(image_shape)
    else:
        codec = BlockDCTCodec(image_shape, cfg["prior.block_size"], cfg["prior.kept"])
    kind = cfg["prior.predictor"]
    if kind == "zero":
        predictor = ZeroPredictor(codec.latent_size)
    elif kind == "analytic":
        mean = np.full(codec.latent_size, cfg["prior.mean"])
        predictor = GaussianPriorPredictor(mean, cfg["prior.tau"], schedule)
    else:
        predictor = MLPPredictor.load(cfg["prior.weights"])
        if predictor.s2 != codec.latent_size or predictor.s1 != codec.latent_size:
            raise ConfigError(
                f"predictor sizes (s1={predictor.s1}, s2={predictor.s2}) do not match "
                f"codec latent size {codec.latent_size}"
            )
        if predictor.schedule_hash and predictor.schedule_hash != schedule.content_hash():
            raise ConfigError(
                "predictor was trained with a different noise schedule "
                f"(hash {predictor.schedule_hash} != {schedule.content_hash()})"
            )
    return PriorBundle(codec, predictor, schedule)


def _solver_config(cfg: dict) -> SolverConfig:
    return SolverConfig(
        p=cfg["solver.p"],
        mu0=cfg["solver.mu0"],
        gamma=cfg["solver.gamma"],
        eta=cfg["solver.eta"],
        k_max=cfg["solver.k_max"],
        rel_tol=cfg["solver.rel_tol"],
        inner_steps=cfg["solver.inner_steps"],
        seed=cfg["seed"],
    )


def _operator_fingerprint(cfg: dict, spatial: tuple[int, int]) -> dict:
    return {
        "task": cfg["task"],
        "sigma_a": cfg["degrade.sigma_a"],
        "psf_size": _resolved_psf_size(cfg, spatial) if cfg["task"] != "denoise" else 0,
        "d": cfg["degrade.d"],
    }


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_degrade(cfg: dict, out_dir: str | None) -> int:
    if not cfg["io.input"]:
        raise ConfigError("degrade requires io.input")
    if not cfg["io.degraded"]:
        raise ConfigError("degrade requires io.degraded")
    x = load_image(cfg["io.input"])
    op = build_operator(cfg, x.shape[:2])
    sigma_internal = cfg["degrade.sigma_eta"] / 255.0
    print(f"degrade: sigma_eta {cfg['degrade.sigma_eta']} (0-255 scale) -> {sigma_internal:.6f} internal")
    b = awgn_corrupt(op.apply(x), sigma_internal, cfg["seed"])

    degraded_path = _resolve_out(cfg["io.degraded"], out_dir)
    save_image(b, degraded_path, bit_depth=16)
    meta = {
        "operator": _operator_fingerprint(cfg, x.shape[:2]),
        "sigma_eta": cfg["degrade.sigma_eta"],
        "seed": cfg["seed"],
        "input_shape": list(x.shape),
        "degraded_shape": list(b.shape),
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    meta_path = _resolve_out(cfg["io.metadata"] or str(cfg["io.degraded"]) + ".json", out_dir)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if cfg["io.ground_truth"]:
        save_image(x, _resolve_out(cfg["io.ground_truth"], out_dir), bit_depth=16)
    print(f"degrade: wrote {degraded_path} and {meta_path}")
    return 0


def cmd_restore(cfg: dict, out_dir: str | None) -> int:
    if not cfg["io.degraded"]:
        raise ConfigError("restore requires io.degraded")
    if not cfg["io.restored"]:
        raise ConfigError("restore requires io.restored")
    b = load_image(cfg["io.degraded"])
    meta_path = Path(cfg["io.metadata"] or str(cfg["io.degraded"]) + ".json")
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as exc:
        raise IOError(f"cannot read degradation metadata {meta_path}: {exc}") from exc

    d = cfg["degrade.d"]
    recon_spatial = (b.shape[0] * d, b.shape[1] * d) if cfg["task"] == "sr" else b.shape[:2]
    expected = _operator_fingerprint(cfg, recon_spatial)
    if meta.get("operator") != expected:
        raise ConfigError(
            f"config/operator mismatch with metadata: config implies {expected}, "
            f"metadata records {meta.get('operator')}"
        )

    image_shape = recon_spatial if b.ndim == 2 else recon_spatial + (b.shape[2],)
    op = build_operator(cfg, recon_spatial)
    prior = build_prior(cfg, image_shape)
    x_star, trace = reld_solve(b, op, prior, _solver_config(cfg))

    restored_path = _resolve_out(cfg["io.restored"], out_dir)
    save_image(x_star, restored_path, bit_depth=16)
    trace_path = _resolve_out(cfg["io.trace"] or str(cfg["io.restored"]) + ".trace.csv", out_dir)
    trace.save_csv(trace_path)

    summary = f"restore: wrote {restored_path} ({len(trace)} iterations)"
    if cfg["io.ground_truth"]:
        try:
            gt = load_image(cfg["io.ground_truth"])
        except IOError:
            gt = None
        if gt is not None and gt.shape == x_star.shape:
            summary += f", PSNR {psnr(gt, clip01(x_star)):.2f} dB"
    print(summary)
    return 0


def _parse_grid(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise ConfigError(f"grid spec must be 'key=v1,v2,...' or 'key=lin:a:b:n', got {spec!r}")
    key, raw = (part.strip() for part in spec.split("=", 1))
    if key not in SCHEMA:
        raise ConfigError(f"unknown grid parameter {key!r}")
    parser, _ = SCHEMA[key]
    if parser not in (int, float):
        raise ConfigError(f"grid parameter {key!r} is not numeric")
    if raw.startswith("lin:"):
        try:
            a, bnd, n = raw[4:].split(":")
            values = np.linspace(float(a), float(bnd), int(n)).tolist()
        except ValueError as exc:
            raise ConfigError(f"bad linspace grid {raw!r}: {exc}") from exc
    else:
        values = [float(v) for v in raw.split(",") if v.strip()]
    if parser is int:
        return key, [int(round(v)) for v in values]
    return key, values


def _sweep_point(args) -> dict:
    cfg, overrides, b, gt = args
    cfg = dict(cfg)
    cfg.update(overrides)
    row = dict(overrides)
    start = time.perf_counter()
    try:
        recon_spatial = gt.shape[:2]
        image_shape = gt.shape
        op = build_operator(cfg, recon_spatial)
        prior = build_prior(cfg, image_shape)
        x_star, trace = reld_solve(b, op, prior, _solver_config(cfg))
        row["psnr"] = f"{psnr(gt, clip01(x_star)):.6f}"
        row["final_L"] = repr(trace.records[-1].objective)
        row["status"] = "ok"
    except Exception as exc:  # per-point failures recorded, sweep continues
        row["psnr"] = ""
        row["final_L"] = ""
        row["status"] = f"error: {exc}"
    row["runtime_s"] = f"{time.perf_counter() - start:.3f}"
    return row


def cmd_sweep(cfg: dict, grid_specs: list[str], workers: int, out_dir: str | None) -> int:
    if not cfg["io.input"]:
        raise ConfigError("sweep requires io.input (ground truth image)")
    out_path = _resolve_out(cfg["io.sweep"] or "sweep.csv", out_dir)
    grids = [_parse_grid(spec) for spec in grid_specs]
    keys = [k for k, _ in grids]

    header = keys + ["psnr", "final_L", "runtime_s", "status"]
    gt = load_image(cfg["io.input"])
    op = build_operator(cfg, gt.shape[:2])
    b = awgn_corrupt(op.apply(gt), cfg["degrade.sigma_eta"] / 255.0, cfg["seed"])

    if grids:
        points = [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in grids))]
    else:
        points = []
    tasks = [(cfg, overrides, b, gt) for overrides in points]

    if tasks and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(t) for t in tasks]

    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row.get(col, "")) for col in header))
    out_path.write_text("\n".join(lines) + "\n")
    print(f"sweep: wrote {out_path} ({len(rows)} rows)")
    return 0


def cmd_train_toy(cfg: dict, out_dir: str | None) -> int:
    if not cfg["train.out"]:
        raise ConfigError("train-toy requires train.out (weights output path)")
    shape: tuple[int, ...] = (cfg["train.height"], cfg["train.width"])
    if cfg["train.channels"] == 3:
        shape = shape + (3,)
    prior = build_prior({**cfg, "prior.predictor": "zero"}, shape)
    rng = np.random.default_rng(cfg["seed"])
    images = [
        make_phantom(shape[0], shape[1], cfg["train.channels"], seed=int(rng.integers(2**31)))
        for _ in range(cfg["train.samples"])
    ]
    dataset = make_denoising_dataset(images, prior.codec, cfg["train.sigma_max"], seed=cfg["seed"])
    net = train_predictor(
        dataset,
        prior.schedule,
        steps=cfg["train.steps"],
        seed=cfg["seed"],
        hidden=cfg["train.hidden"],
        batch_size=cfg["train.batch"],
        lr=cfg["train.lr"],
    )
    out_path = _resolve_out(cfg["train.out"], out_dir)
    net.save(out_path)
    print(
        f"train-toy: {cfg['train.samples']} samples, {cfg['train.steps']} steps, "
        f"loss {net.loss_trace[0]:.4f} -> {net.loss_trace[-1]:.4f}, wrote {out_path}"
    )
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(prog="reld", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("degrade", "restore", "sweep", "train-toy", "selftest"):
        p = sub.add_parser(name)
        if name != "selftest":
            p.add_argument("--config", required=True)
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--out-dir", default=None)
        if name == "sweep":
            p.add_argument("--grid", action="append", default=[],
                           help="parameter grid, e.g. solver.mu0=lin:0.05:2:40 or solver.p=1,5,10")
            p.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)

    try:
        if args.command == "selftest":
            return 0 if run_selftest() else 2
        cfg = load_config(args.config, seed_override=args.seed)
        if args.command == "degrade":
            return cmd_degrade(cfg, args.out_dir)
        if args.command == "restore":
            return cmd_restore(cfg, args.out_dir)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.grid, args.workers, args.out_dir)
        if args.command == "train-toy":
            return cmd_train_toy(cfg, args.out_dir)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SolverDivergedError, TrainingDivergedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (IOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
