"""Command-line driver: train, compare, sweep-participation, overhead, eval.

Exit codes: 0 on success, 2 for configuration errors, 3 for runtime errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .datagen import generate_world, load_scenes
from .errors import ConfigError
from .experiments import (METHODS, atomic_write, compare, config_to_dict,
                          load_config, model_from_checkpoint, run_method, sweep_participation,
                          write_run)
from .federation import NetworkModel, overhead_report
from .numerics import make_streams
from .surrogate import encode_classnames
from .training import evaluate_prompts

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

PRESETS = {
    "prompt-generator": (1_000_000, 172_000_000),
    "yolov3": (1_000_000, 62_000_000),
}
REFERENCE_REDUCTION = 99.3


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _resolve(args):
    """Config file plus ``--set`` overrides plus the dedicated flags, in that order."""
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "method", None) is not None:
        overrides.append(f"method={args.method}")
    if getattr(args, "rounds", None) is not None:
        overrides.append(f"federation.rounds={args.rounds}")
    if getattr(args, "base_adaptation_steps", None) is not None:
        overrides.append(f"base_adaptation_steps={args.base_adaptation_steps}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"out={args.out}")
    cfg = load_config(args.config, overrides)
    k = getattr(args, "participation", None)
    if k is not None:
        n = cfg.federation.n_clients
        if not 1 <= k <= n:
            raise ConfigError(f"--participation {k} outside 1..{n}")
        cfg = cfg.replace(federation=dataclasses.replace(cfg.federation, participation_rate=k / n))
    return cfg


def _fmt_map(x) -> str:
    return f"{100 * x:6.2f}"


def cmd_train(args) -> int:
    cfg = _resolve(args)
    result = run_method(cfg)
    paths = write_run(result, cfg.out)
    print(f"method {result.method}: global mAP {_fmt_map(result.global_map)}")
    for cid, v in sorted(result.client_maps.items()):
        print(f"  client {cid}: mAP {_fmt_map(v)}")
    for name, p in paths.items():
        print(f"wrote {name}: {p}")
    return 0


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    report = compare(cfg, args.methods, args.seeds)
    atomic_write(Path(cfg.out) / "compare_report.json", json.dumps(report, indent=2) + "\n")
    clients = sorted(report["table"][args.methods[0]]["clients"], key=int)
    print("method        global " + " ".join(f"client{c:>2}" for c in clients))
    for m in args.methods:
        row = report["table"][m]
        print(f"{m:<12} {_fmt_map(row['global'])} "
              + " ".join(f"{_fmt_map(row['clients'][c]):>8}" for c in clients))
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    report = sweep_participation(cfg, args.counts, args.seeds, args.sweep_rounds)
    atomic_write(Path(cfg.out) / "sweep_report.json", json.dumps(report, indent=2) + "\n")
    print("round  " + " ".join(f"K={k:<5}" for k in args.counts))
    rounds = sorted(report["curves"][str(args.counts[0])], key=int)
    for r in rounds:
        print(f"{r:>5}  " + " ".join(f"{_fmt_map(report['curves'][str(k)][r]):>7}"
                                       for k in args.counts))
    return 0


def cmd_overhead(args) -> int:
    prompt, full = PRESETS[args.preset]
    prompt = args.prompt_params if args.prompt_params is not None else prompt
    full = args.full_params if args.full_params is not None else full
    net = NetworkModel(args.bandwidth_mbps * 1e6, args.latency)
    rep = overhead_report(prompt, full, args.bytes_per_param, net)
    print(f"prompt payload : {rep.mb_prompt:10.2f} MB ({rep.bytes_prompt} bytes)")
    print(f"full payload   : {rep.mb_full:10.2f} MB ({rep.bytes_full} bytes, "
          f"{rep.megabits_full:.0f} Mb)")
    print(f"reduction      : {rep.reduction_percent:10.3f} % "
          f"(reference figure {REFERENCE_REDUCTION}%, "
          f"difference {rep.reduction_percent - REFERENCE_REDUCTION:+.3f} pp)")
    print(f"upload @ {args.bandwidth_mbps:g} Mbps: prompt {rep.seconds_per_upload_prompt:.3f} s, "
          f"full {rep.seconds_per_upload_full:.2f} s")
    if args.out:
        body = dataclasses.asdict(rep) | {
            "param_count_prompt": prompt, "param_count_full": full,
            "bandwidth_bps": net.bandwidth_bps, "latency_s": net.latency_s,
            "reference_reduction_percent": REFERENCE_REDUCTION,
        }
        atomic_write(Path(args.out) / "overhead_report.json", json.dumps(body, indent=2) + "\n")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    streams = make_streams(cfg.resolved_seeds())
    world = generate_world(cfg.world, streams["world"])
    model, theta = model_from_checkpoint(Path(args.checkpoint).read_bytes())
    if model.d != world.d:
        raise ConfigError(f"checkpoint width {model.d} does not match world.d={world.d}")
    scenes = load_scenes(args.scenes, world.d)
    labels = sorted({int(l) for s in scenes for l in s.gt_labels})
    ids = args.classes if args.classes else labels
    for c in ids + labels:
        if not 0 <= c < len(world.class_names):
            raise ConfigError(f"class id {c} outside the world's {len(world.class_names)} classes")
    missing = set(labels) - set(ids)
    if missing:
        raise ConfigError(f"scene labels {sorted(missing)} are not among the evaluated classes")
    T = encode_classnames(world.backbone, [world.class_names[c] for c in ids])
    P, _ = model.prompts(theta, T)
    rep = evaluate_prompts(world.backbone, T, P, scenes, ids)
    print(f"{len(scenes)} scenes, classes {ids}: mAP {_fmt_map(rep.map)}")
    for c, ap in sorted(rep.per_class_ap.items()):
        print(f"  {world.class_names[c]:<12} AP {_fmt_map(ap)}  ({rep.n_gt[c]} objects)")
    if args.out:
        body = {"map": rep.map, "per_class_ap": {str(k): v for k, v in rep.per_class_ap.items()},
                "n_gt": {str(k): v for k, v in rep.n_gt.items()}, "classes": ids,
                "checkpoint": str(args.checkpoint), "scenes": str(args.scenes),
                "config": config_to_dict(cfg)}
        atomic_write(Path(args.out) / "eval_report.json", json.dumps(body, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprompt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a configuration key (repeatable)")
        p.add_argument("--seed", type=int, help="seed for every random stream")
        if out:
            p.add_argument("--out", help="output directory")
        p.add_argument("--base-adaptation-steps", type=int, dest="base_adaptation_steps")

    p = sub.add_parser("train", help="federated training of one method")
    common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--rounds", type=int)
    p.add_argument("--participation", type=int, help="clients selected per round")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="several methods on identical benchmarks")
    common(p)
    p.add_argument("--methods", type=lambda s: s.split(","), default=list(METHODS))
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--rounds", type=int)
    p.add_argument("--participation", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-participation", help="mAP against rounds for each client count")
    common(p)
    p.add_argument("--counts", type=_int_list, default=[1, 2, 3])
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--rounds", type=int, dest="sweep_rounds", default=100)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("overhead", help="payload sizes and upload times")
    p.add_argument("--preset", choices=sorted(PRESETS), default="prompt-generator")
    p.add_argument("--prompt-params", type=int)
    p.add_argument("--full-params", type=int)
    p.add_argument("--bytes-per-param", type=int, default=4)
    p.add_argument("--bandwidth-mbps", type=float, default=100.0)
    p.add_argument("--latency", type=float, default=0.0)
    p.add_argument("--out", help="directory for overhead_report.json")
    p.set_defaults(func=cmd_overhead)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene file")
    common(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--scenes", required=True, type=Path)
    p.add_argument("--classes", type=_int_list, help="class ids to score (default: scene labels)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
