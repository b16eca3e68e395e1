"""Command-line surface.

Commands: train, sample, guide, oracle, eval, gradcheck, embedscan, plot.
Config files are flat "key = value" lines; command-line flags override file
values and unknown keys are hard errors. Exit status: 0 success, 1 runtime
failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .batchio import read_csv, write_csv, write_run_sidecar
from .config import ConfigError, apply_schema, parse_config_file
from .evaluation import coverage, embed_scan, energy_distance, symmetric_kl_grid
from .gradcheck import run_all
from .net import FeatureMap, load_checkpoint, save_checkpoint
from .potentials import PotentialParseError, parse_potential
from .rng import stream
from .sampling import SamplerConfig, sample_ode, sample_sde
from .training import TrainConfig, train, write_report_csv
from .world import ConditionFeature, rejection_sample


def _resolve(args, schema: dict, defaults: dict, required: tuple = ()) -> dict:
    effective = dict(defaults)
    if getattr(args, "config", None):
        raw = parse_config_file(args.config)
        effective.update(apply_schema(raw, schema, args.config))
    for key in schema:
        val = getattr(args, key, None)
        if val is not None:
            effective[key] = val
    for key in required:
        if effective.get(key) is None:
            raise ConfigError(f"missing required setting '{key}' (flag --{key.replace('_', '-')})")
    return effective


def parse_feature(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"feature must be two comma-separated numbers, got '{text}'")
    try:
        vec = np.array([float(parts[0]), float(parts[1])])
    except ValueError as exc:
        raise ConfigError(f"bad feature '{text}': {exc}") from exc
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:
        raise ConfigError("feature vector must be nonzero")
    if abs(norm - 1.0) > 1e-6:
        print(f"warning: normalizing feature {text} (norm {norm:.6g})", file=sys.stderr)
        vec = vec / norm
    return vec


def _emit_report(report: dict, out: str | None, config_echo: dict) -> None:
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
        write_run_sidecar(out, config_echo)


_TRAIN_SCHEMA = {
    "epochs": int, "batch_size": int, "dataset_size": int, "learning_rate": float,
    "beta": float, "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "seed": int, "schedule": str,
}


def cmd_train(args) -> int:
    eff = _resolve(args, _TRAIN_SCHEMA, TrainConfig().to_dict())
    try:
        cfg = TrainConfig(**eff)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)

    def progress(epoch, ld, la):
        print(f"epoch {epoch}/{cfg.epochs} loss_diff={ld:.6f} loss_align={la:.6f}", file=sys.stderr)

    params, report = train(cfg, on_epoch=progress)
    ckpt = os.path.join(args.out, "model.ckpt")
    save_checkpoint(params, ckpt, extra_header={"config": cfg.to_dict()})
    write_report_csv(report, os.path.join(args.out, "losses.csv"))
    write_run_sidecar(ckpt, {"command": "train", **cfg.to_dict()})
    print(f"wall_seconds={report.wall_seconds:.1f}", file=sys.stderr)
    print(f"checkpoint: {ckpt}")
    return 0


_SAMPLE_SCHEMA = {"n": int, "steps": int, "eps": float, "mode": str, "seed": int, "ckpt": str}
_SAMPLE_DEFAULTS = {"n": 2000, "steps": 250, "eps": 1e-3, "mode": "sde", "seed": 0, "ckpt": None}


def cmd_sample(args) -> int:
    eff = _resolve(args, _SAMPLE_SCHEMA, _SAMPLE_DEFAULTS, required=("ckpt",))
    params = load_checkpoint(eff["ckpt"])
    try:
        cfg = SamplerConfig(steps=eff["steps"], t_end=eff["eps"], mode=eff["mode"], seed=eff["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.mode == "ode":
        batch = sample_ode(params, cfg, eff["n"])
    elif cfg.mode == "sde":
        batch = sample_sde(params, cfg, eff["n"])
    else:
        raise ConfigError("sample supports modes ode and sde; use the guide command for guidance")
    write_csv(batch, args.out)
    write_run_sidecar(args.out, {"command": "sample", **eff})
    return 0


_GUIDE_SCHEMA = {**_SAMPLE_SCHEMA, "lam": float, "feature": str, "potential": str,
                 "guidance_convention": str}
_GUIDE_DEFAULTS = {**_SAMPLE_DEFAULTS, "mode": "guided_sde", "lam": 2.0, "feature": None,
                   "potential": "ipa:full", "guidance_convention": "prop2"}


def cmd_guide(args) -> int:
    eff = _resolve(args, _GUIDE_SCHEMA, _GUIDE_DEFAULTS, required=("ckpt", "feature"))
    if eff["lam"] < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {eff['lam']}")
    target = FeatureMap(rows=parse_feature(eff["feature"])[None, :], normalized=True)
    spec = parse_potential(eff["potential"], target)
    params = load_checkpoint(eff["ckpt"])
    try:
        cfg = SamplerConfig(steps=eff["steps"], t_end=eff["eps"], mode="guided_sde",
                            guidance=(spec, eff["lam"]), convention=eff["guidance_convention"],
                            seed=eff["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    batch = sample_sde(params, cfg, eff["n"])
    write_csv(batch, args.out)
    echo = {k: v for k, v in eff.items() if k != "mode"}
    write_run_sidecar(args.out, {"command": "guide", "mode": "guided_sde", **echo})
    return 0


_ORACLE_SCHEMA = {"n": int, "seed": int, "lam": float, "feature": str}
_ORACLE_DEFAULTS = {"n": 2000, "seed": 0, "lam": 2.0, "feature": None}


def cmd_oracle(args) -> int:
    eff = _resolve(args, _ORACLE_SCHEMA, _ORACLE_DEFAULTS, required=("feature",))
    if eff["lam"] < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {eff['lam']}")
    cond = ConditionFeature(target=parse_feature(eff["feature"]), lam=eff["lam"])
    batch = rejection_sample(cond, eff["n"], eff["seed"])
    write_csv(batch, args.out)
    write_run_sidecar(args.out, {"command": "oracle", **eff})
    return 0


def cmd_eval(args) -> int:
    batch_a = read_csv(args.a)
    report: dict = {}
    if args.metric == "coverage":
        fin, f1, f2 = coverage(batch_a, margin=args.margin)
        report["coverage"] = {"in_support": fin, "cell1": f1, "cell2": f2}
    else:
        if not args.b:
            raise ConfigError(f"metric '{args.metric}' needs --b")
        batch_b = read_csv(args.b)
        if args.metric == "energy":
            report["energy_distance"] = energy_distance(batch_a, batch_b, seed=args.seed)
        else:
            report["skl"] = symmetric_kl_grid(batch_a, batch_b)
    _emit_report(report, args.out, {"command": "eval", "metric": args.metric,
                                    "a": args.a, "b": args.b, "margin": args.margin})
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(seed=args.seed, net_trials=args.net_trials,
                      loss_trials=args.loss_trials, potential_trials=args.potential_trials)
    report = {"suites": {name: r.to_dict() for name, r in results.items()},
              "pass": all(r.passed for r in results.values())}
    _emit_report(report, args.out, {"command": "gradcheck", "seed": args.seed})
    return 0 if report["pass"] else 1


def cmd_embedscan(args) -> int:
    if args.lam < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {args.lam}")
    params = load_checkpoint(args.ckpt)
    rng = stream(args.seed, "embed-pairs")
    pairs = []
    for _ in range(args.pairs):
        ang = rng.uniform(0.0, 2.0 * np.pi, size=2)
        pairs.append((np.array([np.cos(ang[0]), np.sin(ang[0])]),
                      np.array([np.cos(ang[1]), np.sin(ang[1])])))
    sampler = SamplerConfig(steps=args.steps, t_end=args.eps, mode="sde", seed=args.seed)
    rep = embed_scan(params, pairs, args.lam, args.n, sampler, seed=args.seed)
    _emit_report({"embed_scan": rep.to_dict()}, args.out,
                 {"command": "embedscan", "pairs": args.pairs, "lam": args.lam,
                  "n": args.n, "steps": args.steps, "seed": args.seed, "ckpt": args.ckpt})
    return 0


def cmd_plot(args) -> int:
    from .svgplot import scatter_svg

    base = read_csv(args.input).points
    overlay = read_csv(args.overlay).points if args.overlay else None
    if base.shape[0] == 0:
        print(f"warning: {args.input} holds no points; plotting axes only", file=sys.stderr)
    svg = scatter_svg(base, overlay)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write(svg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiltflow",
                                     description="2D flow matching with feature-guided sampling")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_out=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        if with_out:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("train", help="train a model; writes checkpoint and loss CSV")
    add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--dataset-size", dest="dataset_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.set_defaults(func=cmd_train)

    def add_sampler_flags(p):
        p.add_argument("--ckpt", default=None, help="checkpoint path")
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--eps", type=float, default=None, help="terminal time clip")

    p = sub.add_parser("sample", help="unguided sampling from a checkpoint")
    add_common(p)
    add_sampler_flags(p)
    p.add_argument("--mode", choices=("ode", "sde"), default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("guide", help="feature-guided stochastic sampling")
    add_common(p)
    add_sampler_flags(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="guidance scale")
    p.add_argument("--feature", default=None, help='target feature "a,b"')
    p.add_argument("--potential", default=None, help='potential spec, e.g. "ipa:full"')
    p.add_argument("--guidance-convention", dest="guidance_convention",
                   choices=("prop2", "eq7"), default=None)
    p.set_defaults(func=cmd_guide)

    p = sub.add_parser("oracle", help="exact rejection sampling from the tilted density")
    add_common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--feature", default=None, help='target feature "a,b"')
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval", help="two-sample statistics between CSVs")
    p.add_argument("--a", required=True, help="first sample CSV")
    p.add_argument("--b", default=None, help="second sample CSV")
    p.add_argument("--metric", choices=("energy", "skl", "coverage"), required=True)
    p.add_argument("--margin", type=float, default=0.0, help="support dilation for coverage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--net-trials", dest="net_trials", type=int, default=200)
    p.add_argument("--loss-trials", dest="loss_trials", type=int, default=100)
    p.add_argument("--potential-trials", dest="potential_trials", type=int, default=100)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("embedscan", help="feature-distance scan over condition pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p.add_argument("--n", type=int, default=400, help="samples per condition")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_embedscan)

    p = sub.add_parser("plot", help="SVG scatter of one or two sample CSVs")
    p.add_argument("--input", required=True, help="base CSV, drawn grey")
    p.add_argument("--overlay", default=None, help="overlay CSV, drawn red")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, PotentialParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures exit 1 by contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console() -> None:
    sys.exit(main())
