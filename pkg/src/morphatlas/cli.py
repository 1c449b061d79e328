"""Command-line surface: build, register, warp, evaluate, synth.

Exit codes: 0 success (including budget-limited builds), 2 provider error,
3 diffeomorphism violation, 64 usage error, 66 missing input file,
1 any other package error.
"""

from __future__ import annotations

import argparse
import csv
import json
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .atlas import (
    AtlasConfig,
    build_atlas,
    build_manifest,
    write_energy_trace,
    write_manifest,
)
from .errors import (
    DiffeomorphismError,
    MorphAtlasError,
    ProviderError,
)
from .flow import IntegrationConfig
from .grid import ScalarImage, VectorField
from .io import (
    SynthConfig,
    load_cohort,
    read_volume,
    synthesize_cohort,
    volume_format_for,
    write_volume,
)
from .priors import (
    FilePriorProvider,
    OraclePriorProvider,
    SubprocessPriorProvider,
    validate_provider,
    write_prior_files,
)
from .registration import RegistrationConfig, ncc, oracle_register, shoot_velocity
from .spectral import MetricConfig

EX_USAGE = 64
EX_NOINPUT = 66


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EX_USAGE)


def _add_metric_flags(p: argparse.ArgumentParser):
    m = MetricConfig()
    p.add_argument("--alpha", type=float, default=m.alpha, help="smoothness weight")
    p.add_argument("--gamma", type=float, default=m.gamma, help="identity weight")
    p.add_argument("--power", type=int, default=m.power, help="operator exponent")
    p.add_argument("--norm-kind", choices=("ll", "lv"), default=m.norm_kind,
                   help="velocity-norm quadratic form")


def _add_integration_flags(p: argparse.ArgumentParser):
    i = IntegrationConfig()
    p.add_argument("--param", choices=("geodesic", "stationary"),
                   default=i.parameterization, help="velocity parameterization")
    p.add_argument("--steps", type=int, default=i.num_steps,
                   help="time steps for geodesic integration")
    p.add_argument("--scheme", choices=("euler", "rk4"), default=i.scheme)
    p.add_argument("--squarings", type=int, default=i.squarings,
                   help="scaling-and-squaring doublings")


def _add_registration_flags(p: argparse.ArgumentParser):
    r = RegistrationConfig()
    p.add_argument("--sigma", type=float, default=r.sigma, help="noise weight")
    p.add_argument("--reg-step", type=float, default=r.step_size,
                   help="oracle gradient step size")
    p.add_argument("--reg-iters", type=int, default=r.max_iters,
                   help="oracle iteration budget")
    p.add_argument("--reg-tol", type=float, default=r.tol,
                   help="oracle relative energy-change stop")


def _metric_from(args) -> MetricConfig:
    return MetricConfig(alpha=args.alpha, gamma=args.gamma, power=args.power,
                        norm_kind=args.norm_kind)


def _integration_from(args) -> IntegrationConfig:
    return IntegrationConfig(num_steps=args.steps, scheme=args.scheme,
                             parameterization=args.param, squarings=args.squarings)


def _registration_from(args) -> RegistrationConfig:
    return RegistrationConfig(
        sigma=args.sigma,
        step_size=args.reg_step,
        max_iters=args.reg_iters,
        tol=args.reg_tol,
        integration=_integration_from(args),
        metric=_metric_from(args),
    )


def _reg_config_dict(cfg: RegistrationConfig) -> dict:
    return {
        "sigma": cfg.sigma,
        "step_size": cfg.step_size,
        "max_iters": cfg.max_iters,
        "tol": cfg.tol,
        "integration": {
            "num_steps": cfg.integration.num_steps,
            "scheme": cfg.integration.scheme,
            "parameterization": cfg.integration.parameterization,
            "squarings": cfg.integration.squarings,
        },
        "metric": {
            "alpha": cfg.metric.alpha,
            "gamma": cfg.metric.gamma,
            "power": cfg.metric.power,
            "norm_kind": cfg.metric.norm_kind,
        },
    }


def _write_run_config(path, command: str, config: dict):
    payload = {"command": command, "version": __version__, "config": config}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require_file(path):
    if not Path(path).exists():
        raise FileNotFoundError(str(path))
    return Path(path)


def _make_provider(spec: str, reg_cfg: RegistrationConfig, work_root: Path):
    if spec == "oracle":
        return OraclePriorProvider(reg_cfg)
    if spec.startswith("files:"):
        directory = _require_file(spec[len("files:"):])
        return FilePriorProvider(directory)
    if spec.startswith("cmd:"):
        command = shlex.split(spec[len("cmd:"):])
        work_root.mkdir(parents=True, exist_ok=True)
        return SubprocessPriorProvider(
            command, work_root=work_root,
            parameterization=reg_cfg.integration.parameterization,
        )
    raise ValueError(
        f"provider must be 'oracle', 'files:<dir>' or 'cmd:<exe>', got {spec!r}"
    )


# ---------------------------------------------------------------------------
# subcommands

def _cmd_build(args) -> int:
    reg_cfg = _registration_from(args)
    cohort = load_cohort(_require_file(args.cohort))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provider = _make_provider(args.provider, reg_cfg, out / "work")

    report = validate_provider(provider, cohort.shape, cohort.ids)
    if not report.ok:
        lines = "; ".join(f"{c.subject_id}: {c.detail}" for c in report.failures())
        raise ProviderError(f"provider validation failed: {lines}")

    cfg = AtlasConfig(
        sigma=args.sigma,
        lam=args.lam,
        max_outer_iters=args.max_iters,
        tol=args.tol,
        integration=reg_cfg.integration,
        metric=reg_cfg.metric,
        worker_count=args.workers,
    )
    state = build_atlas(cohort, provider, cfg)

    write_volume(state.atlas, out / "atlas.rawf32")
    velocities = {sid: vel for sid, vel in zip(cohort.ids, state.velocities)}
    write_prior_files(
        out / "velocities", cohort.shape, velocities,
        parameterization=getattr(provider, "parameterization", None)
        or cfg.integration.parameterization,
    )
    write_energy_trace(out / "energy_trace.csv", state.energy_trace)
    manifest = build_manifest(state, cohort, cfg, provider.describe())
    manifest["registration"] = _reg_config_dict(reg_cfg)
    write_manifest(out / "build_manifest.json", manifest)
    totals = state.total_records()
    print(f"atlas built: {state.iterations_run} iterations, "
          f"stop={state.stop_reason}, final energy {totals[-1].total:.6g}")
    return 0


def _cmd_register(args) -> int:
    cfg = _registration_from(args)
    source = read_volume(_require_file(args.source))
    target = read_volume(_require_file(args.target))
    if not (isinstance(source, ScalarImage) and isinstance(target, ScalarImage)):
        raise MorphAtlasError("register expects scalar volumes")
    result = oracle_register(source, target, cfg)
    write_volume(result.velocity, args.out)
    _write_run_config(str(args.out) + ".config.json", "register", _reg_config_dict(cfg))
    print(f"registered in {result.iterations} iterations ({result.stop_reason}), "
          f"energy {result.energy.total:.6g}")
    return 0


def _cmd_warp(args) -> int:
    image = read_volume(_require_file(args.image))
    velocity = read_volume(_require_file(args.velocity))
    if not isinstance(image, ScalarImage) or not isinstance(velocity, VectorField):
        raise MorphAtlasError("warp expects a scalar image and a vector velocity")
    integration = _integration_from(args)
    op = _metric_from(args).build(velocity.shape)
    pair = shoot_velocity(op, velocity, integration)
    disp = pair.inverse if args.inverse else pair.forward
    from .grid import warp_image

    warped = warp_image(image, disp)
    write_volume(warped, args.out, format=volume_format_for(args.out))
    _write_run_config(
        str(args.out) + ".config.json", "warp",
        {"inverse": bool(args.inverse),
         "integration": _reg_config_dict(_registration_from(args))["integration"]},
    )
    print(f"warped volume written to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _registration_from(args)
    atlas = read_volume(_require_file(args.atlas))
    if not isinstance(atlas, ScalarImage):
        raise MorphAtlasError("evaluate expects a scalar atlas volume")
    cohort = load_cohort(_require_file(args.cohort))
    from .grid import warp_image

    op = cfg.metric.build(atlas.shape)
    rows = []
    for sid, subject in zip(cohort.ids, cohort.images):
        result = oracle_register(atlas, subject, cfg)
        pair = shoot_velocity(op, result.velocity, cfg.integration)
        warped = warp_image(atlas, pair.inverse)
        rows.append((sid, ncc(warped, subject)))
    mean_ncc = float(np.mean([r[1] for r in rows]))
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "ncc"])
        for sid, value in rows:
            writer.writerow([sid, f"{value:.17g}"])
        writer.writerow(["MEAN", f"{mean_ncc:.17g}"])
    _write_run_config(str(args.out) + ".config.json", "evaluate", _reg_config_dict(cfg))
    print(f"mean NCC over {len(rows)} subjects: {mean_ncc:.4f}")
    return 0


def _cmd_synth(args) -> int:
    raw = json.loads(_require_file(args.config).read_text())
    cfg = SynthConfig(
        seed=raw["seed"],
        n_subjects=raw.get("n_subjects", SynthConfig.__dataclass_fields__["n_subjects"].default),
        dims=tuple(raw.get("dims", (64, 64))),
        scale=raw.get("scale", 1.0),
        noise_sigma=raw.get("noise_sigma", 0.0),
        pattern=raw.get("pattern", "bullseye"),
    )
    out = Path(args.out)
    subjects_dir = out / "subjects"
    subjects_dir.mkdir(parents=True, exist_ok=True)
    result = synthesize_cohort(cfg)
    write_volume(result.base, out / "base.rawf32")
    for sid, img in zip(result.cohort.ids, result.cohort.images):
        write_volume(img, subjects_dir / f"{sid}.rawf32")
    truth = {sid: vel for sid, vel in zip(result.cohort.ids, result.true_velocities)}
    write_prior_files(out / "truth", result.cohort.shape, truth,
                      parameterization=cfg.integration.parameterization)
    _write_run_config(
        out / "synth_config.json", "synth",
        {"seed": cfg.seed, "n_subjects": cfg.n_subjects, "dims": list(cfg.dims),
         "scale": cfg.scale, "noise_sigma": cfg.noise_sigma, "pattern": cfg.pattern},
    )
    print(f"cohort of {cfg.n_subjects} subjects written to {subjects_dir}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morphatlas",
                     description="Diffeomorphic atlas building on periodic grids")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="estimate an atlas from a cohort")
    p.add_argument("--cohort", required=True, help="cohort directory or list file")
    p.add_argument("--provider", required=True,
                   help="oracle | files:<dir> | cmd:<exe>")
    p.add_argument("--lambda", dest="lam", type=float, default=AtlasConfig.__dataclass_fields__["lam"].default,
                   help="prior-fidelity weight")
    p.add_argument("--max-iters", type=int,
                   default=AtlasConfig.__dataclass_fields__["max_outer_iters"].default)
    p.add_argument("--tol", type=float, default=AtlasConfig.__dataclass_fields__["tol"].default,
                   help="relative total-energy change stop")
    p.add_argument("--workers", type=int, default=None,
                   help="worker pool size (MORPHATLAS_THREADS overrides)")
    p.add_argument("--out", required=True)
    _add_registration_flags(p)
    _add_integration_flags(p)
    _add_metric_flags(p)
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("register", help="oracle registration of two volumes")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    _add_registration_flags(p)
    _add_integration_flags(p)
    _add_metric_flags(p)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("warp", help="apply a velocity field to a volume")
    p.add_argument("--image", required=True)
    p.add_argument("--velocity", required=True)
    p.add_argument("--inverse", action="store_true",
                   help="apply the inverse map instead of the forward one")
    p.add_argument("--out", required=True)
    _add_integration_flags(p)
    _add_metric_flags(p)
    _add_registration_flags(p)
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("evaluate", help="per-subject NCC of a warped atlas")
    p.add_argument("--atlas", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    _add_registration_flags(p)
    _add_integration_flags(p)
    _add_metric_flags(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--config", required=True, help="JSON SynthConfig")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    return parser


def cli_main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"morphatlas: missing file: {exc}", file=sys.stderr)
        return EX_NOINPUT
    except ProviderError as exc:
        context = ""
        if exc.subject_id is not None:
            context = f" (subject {exc.subject_id}, iteration {exc.iteration})"
        print(f"morphatlas: provider error{context}: {exc}", file=sys.stderr)
        return 2
    except DiffeomorphismError as exc:
        print(f"morphatlas: diffeomorphism violation: {exc}", file=sys.stderr)
        return 3
    except (MorphAtlasError, ValueError) as exc:
        print(f"morphatlas: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli_main())
