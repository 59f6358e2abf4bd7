"""Experiment configuration, benchmark construction and end-to-end runs.

A configuration is a nested mapping with the sections ``world``,
``federation``, ``benchmark`` and ``network`` plus a few top-level keys.
Every key is checked against the dataclass it feeds; unknown keys raise
:class:`ConfigError` naming the dotted path.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .baselines import base_adaptation
from .datagen import SyntheticWorld, TaskSpec, WorldConfig, generate_world, make_tasks, oracle_prompts
from .errors import ConfigError
from .federation import (Client, FederationConfig, FederationResult, NetworkModel, RoundRecord,
                         run_federation)
from .numerics import STREAM_NAMES, RngStream, make_streams
from .promptgen import ClassEmbeddingBatch, deserialize_tensors, quantize, serialize_tensors
from .surrogate import FrozenBackbone, Scene, encode_classnames
from .training import GeneratorModel, StaticPromptModel, evaluate_prompts, make_model

METHODS = ("vllfl", "zero-prompt", "fedcoop", "oracle")
TRAINED = ("vllfl", "fedcoop")
CSV_HEADER = ("round", "client_id", "loss_total", "loss_l1", "loss_giou", "loss_cons", "map",
              "bytes_up", "bytes_down", "sim_time_s")


@dataclass(frozen=True)
class BenchmarkConfig:
    classes_per_client: int = 2
    scenes_per_client: int = 2000
    train_limit: int | None = 16
    adaptation_shots: int = 4
    adaptation_lr: float = 0.01

    def __post_init__(self):
        if self.classes_per_client < 1 or self.scenes_per_client < 10:
            raise ConfigError("benchmark needs classes_per_client >= 1 and scenes_per_client >= 10")
        if self.train_limit is not None and self.train_limit < 1:
            raise ConfigError("benchmark.train_limit must be >= 1 or null")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    network: NetworkModel = field(default_factory=NetworkModel)
    method: str = "vllfl"
    prompt_width: int = 4
    hidden: int | None = None
    base_adaptation_steps: int = 0
    eval_every: int = 10
    seed: int = 0
    seeds: dict = field(default_factory=dict)
    out: str = "runs/default"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {METHODS}, got {self.method!r}")
        if self.prompt_width < 1:
            raise ConfigError("prompt_width must be >= 1")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden must be >= 1 or null")
        if self.base_adaptation_steps < 0:
            raise ConfigError("base_adaptation_steps must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        for k in self.seeds:
            if k not in STREAM_NAMES:
                raise ConfigError(f"seeds.{k}: unknown stream (expected one of {STREAM_NAMES})")

    @property
    def d_h(self) -> int:
        return self.hidden if self.hidden is not None else self.world.d

    def resolved_seeds(self) -> dict[str, int]:
        return {name: int(self.seeds.get(name, self.seed)) for name in STREAM_NAMES}

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# -- configuration trees -----------------------------------------------------

_SECTIONS = {"world": WorldConfig, "federation": FederationConfig,
             "benchmark": BenchmarkConfig, "network": NetworkModel}


def _coerce(value, default, key: str):
    """Check a leaf value against the type of its default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def _build(cls, tree, prefix: str):
    if not isinstance(tree, dict):
        raise ConfigError(f"{prefix}: expected a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in tree.items():
        path = f"{prefix}.{key}"
        if key not in names:
            raise ConfigError(f"unknown configuration key {path!r}")
        default = getattr(defaults, key)
        if key == "class_names" and value is not None:
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"{path}: expected a list of names")
            value = tuple(value)
        elif default is None:
            if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise ConfigError(f"{path}: expected an integer or null, got {value!r}")
        else:
            value = _coerce(value, default, path)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{prefix}: {exc}") from exc


def config_from_dict(tree: dict | None) -> ExperimentConfig:
    tree = {} if tree is None else tree
    if not isinstance(tree, dict):
        raise ConfigError("configuration root must be a mapping")
    kwargs = {}
    defaults = ExperimentConfig()
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key, value in tree.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "seeds":
            if not isinstance(value, dict) or not all(
                    isinstance(v, int) and not isinstance(v, bool) for v in value.values()):
                raise ConfigError("seeds: expected a mapping of stream name to integer")
            kwargs[key] = dict(value)
        elif key in top:
            default = getattr(defaults, key)
            if default is None:
                if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                    raise ConfigError(f"{key}: expected an integer or null, got {value!r}")
                kwargs[key] = value
            else:
                kwargs[key] = _coerce(value, default, key)
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    return ExperimentConfig(**kwargs)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Everything that determines a run's results; the output location is left out."""
    tree = dataclasses.asdict(cfg)
    del tree["out"]
    if tree["world"]["class_names"] is not None:
        tree["world"]["class_names"] = list(tree["world"]["class_names"])
    tree["seeds"] = cfg.resolved_seeds()
    return tree


def apply_overrides(tree: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    tree = copy.deepcopy(tree)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return tree


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    tree = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(apply_overrides(tree, overrides))


# -- benchmark ---------------------------------------------------------------

@dataclass
class Benchmark:
    config: ExperimentConfig
    world: SyntheticWorld
    backbone: FrozenBackbone
    tasks: list[TaskSpec]
    streams: dict[str, RngStream]

    @property
    def global_ids(self) -> list[int]:
        return sorted({c for t in self.tasks for c in t.class_ids})

    @property
    def global_test(self) -> list[Scene]:
        return [s for t in self.tasks for s in t.test]

    def embed(self, class_ids) -> ClassEmbeddingBatch:
        return encode_classnames(self.backbone, [self.world.class_names[c] for c in class_ids])


def build_benchmark(cfg: ExperimentConfig) -> Benchmark:
    streams = make_streams(cfg.resolved_seeds())
    world = generate_world(cfg.world, streams["world"])
    b = cfg.benchmark
    tasks = make_tasks(world, cfg.federation.n_clients, b.classes_per_client, b.scenes_per_client,
                       b.train_limit, streams["scenes"])
    backbone = base_adaptation(world, cfg.base_adaptation_steps,
                               streams["scenes"].spawn("adaptation"), shots=b.adaptation_shots,
                               lr=b.adaptation_lr, weight_decay=cfg.federation.weight_decay)
    return Benchmark(cfg, world, backbone, tasks, streams)


# -- runs --------------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    config: ExperimentConfig
    global_map: float
    client_maps: dict[int, float]
    history: list[RoundRecord] = field(default_factory=list)
    checkpoint: bytes | None = None
    per_class_ap: dict[int, float] = field(default_factory=dict)


def _prompt_fn(method: str, bench: Benchmark, model=None, theta=None):
    m, d = bench.config.prompt_width, bench.world.d
    if method == "zero-prompt":
        return lambda ids, T: np.zeros((0, d))
    if method == "oracle":
        return lambda ids, T: oracle_prompts(bench.world, ids, m)
    return lambda ids, T: model.prompts(theta, T)[0]


def evaluate(bench: Benchmark, prompt_fn) -> tuple[float, dict[int, float], dict[int, float]]:
    """Global mAP over every class on the union of test splits, plus per-client mAP."""
    ids = bench.global_ids
    T = bench.embed(ids)
    rep = evaluate_prompts(bench.backbone, T, prompt_fn(ids, T), bench.global_test, ids)
    clients = {}
    for t in bench.tasks:
        Tc = bench.embed(t.class_ids)
        clients[t.client_id] = evaluate_prompts(bench.backbone, Tc, prompt_fn(t.class_ids, Tc),
                                                t.test, t.class_ids).map
    return rep.map, clients, rep.per_class_ap


def run_method(cfg: ExperimentConfig, bench: Benchmark | None = None,
               method: str | None = None) -> RunResult:
    """Evaluate a fixed baseline or train a prompt model by federation, then evaluate it."""
    method = method or cfg.method
    if method not in METHODS:
        raise ConfigError(f"method: expected one of {METHODS}, got {method!r}")
    cfg = cfg.replace(method=method)
    if bench is None:
        bench = build_benchmark(cfg)
    if method not in TRAINED:
        g, clients, per_class = evaluate(bench, _prompt_fn(method, bench))
        return RunResult(method, cfg, g, clients, per_class_ap=per_class)

    model = make_model(method, cfg.prompt_width, bench.world.d, cfg.d_h)
    # each method gets its own view of the streams so baselines stay comparable
    streams = make_streams(cfg.resolved_seeds())
    theta0 = model.init(streams["init"])
    clients = [Client(t.client_id, t.class_ids, bench.embed(t.class_ids), t.train)
               for t in bench.tasks]

    def hook(r, theta):
        g, per_client, _ = evaluate(bench, _prompt_fn(method, bench, model, theta))
        return g, per_client

    result: FederationResult = run_federation(cfg.federation, model, bench.backbone, clients,
                                              theta0, streams, cfg.network, hook, cfg.eval_every)
    g, per_client, per_class = evaluate(bench, _prompt_fn(method, bench, model,
                                                          quantize(result.theta)))
    return RunResult(method, cfg, g, per_client, result.history,
                     serialize_tensors(model.tensors(result.theta)), per_class)


def model_from_checkpoint(data: bytes, m: int | None = None):
    """Rebuild the prompt model and its flat parameters from VLPG bytes."""
    tensors = deserialize_tensors(data)
    names = [n for n, _ in tensors]
    if names == ["P"]:
        mm, d = tensors[0][1].shape
        model = StaticPromptModel(mm, d)
    else:
        arrays = dict(tensors)
        if "Q" not in arrays or "W1" not in arrays:
            raise ConfigError(f"checkpoint has unexpected tensors {names}")
        model = GeneratorModel(arrays["Q"].shape[0], arrays["Q"].shape[1], arrays["W1"].shape[1])
    return model, model.from_tensors(tensors)


# -- artifacts ---------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def metrics_rows(history: Sequence[RoundRecord], payload_size: int | None = None) -> list[list]:
    rows = []
    for rec in history:
        per_up = rec.bytes_up // max(len(rec.selected), 1)
        per_down = rec.bytes_down // max(len(rec.selected), 1)
        for cid in rec.selected:
            lb = rec.client_losses[cid]
            rows.append([rec.round, cid, lb.total, lb.l1, lb.giou, lb.cons,
                         rec.client_maps.get(cid), per_up, per_down, rec.sim_time])
        losses = list(rec.client_losses.values())
        mean = [float(np.mean([getattr(lb, k) for lb in losses])) for k in ("total", "l1", "giou", "cons")]
        rows.append([rec.round, "global", *mean, rec.global_map, rec.bytes_up, rec.bytes_down,
                     rec.sim_time])
    return rows


def metrics_csv(result: RunResult) -> str:
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(config_to_dict(result.config), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    rows = metrics_rows(result.history)
    if not rows:
        rows = [[0, "global", None, None, None, None, result.global_map, 0, 0, 0.0]]
    w.writerows([[_fmt(v) for v in row] for row in rows])
    return buf.getvalue()


def final_report(result: RunResult) -> dict:
    cfg = result.config
    return {
        "method": result.method,
        "global_map": result.global_map,
        "client_maps": {str(k): v for k, v in sorted(result.client_maps.items())},
        "per_class_ap": {str(k): v for k, v in sorted(result.per_class_ap.items())},
        "rounds": len(result.history),
        "bytes_up_total": sum(r.bytes_up for r in result.history),
        "bytes_down_total": sum(r.bytes_down for r in result.history),
        "sim_time_s_total": sum(r.sim_time for r in result.history),
        "config": config_to_dict(cfg),
        "seeds": cfg.resolved_seeds(),
    }


def atomic_write(path, data: bytes | str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_run(result: RunResult, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    paths = {"metrics": out / "metrics.csv", "report": out / "final_report.json"}
    atomic_write(paths["metrics"], metrics_csv(result))
    atomic_write(paths["report"], json.dumps(final_report(result), indent=2, sort_keys=True) + "\n")
    if result.checkpoint is not None:
        paths["checkpoint"] = out / "checkpoint.vlpg"
        atomic_write(paths["checkpoint"], result.checkpoint)
    return paths


# -- multi-run studies -------------------------------------------------------

def compare(cfg: ExperimentConfig, methods: Sequence[str], seeds: Sequence[int]) -> dict:
    """Every method on the same benchmark per seed; mean global and per-client mAP."""
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"methods: unknown method {m!r}")
    runs = {m: [] for m in methods}
    for seed in seeds:
        c = cfg.replace(seed=seed)
        bench = build_benchmark(c)
        for m in methods:
            runs[m].append(run_method(c, bench, m))
    table = {}
    for m, rs in runs.items():
        ids = sorted(rs[0].client_maps)
        table[m] = {
            "global": float(np.mean([r.global_map for r in rs])),
            "clients": {str(i): float(np.mean([r.client_maps[i] for r in rs])) for i in ids},
            "per_seed": [r.global_map for r in rs],
        }
    return {"seeds": list(seeds), "methods": list(methods), "table": table,
            "config": config_to_dict(cfg)}


def sweep_participation(cfg: ExperimentConfig, counts: Sequence[int], seeds: Sequence[int],
                        rounds: int = 100) -> dict:
    """One run per participation count per seed; mean global mAP at each evaluated round."""
    n = cfg.federation.n_clients
    for k in counts:
        if not 1 <= k <= n:
            raise ConfigError(f"participation count {k} outside 1..{n}")
    curves, finals = {}, {}
    for k in counts:
        fed = dataclasses.replace(cfg.federation, rounds=rounds, participation_rate=k / n)
        per_seed = []
        for seed in seeds:
            c = cfg.replace(seed=seed, federation=fed)
            res = run_method(c, build_benchmark(c))
            per_seed.append({rec.round: rec.global_map for rec in res.history
                             if rec.global_map is not None})
        rounds_seen = sorted(per_seed[0])
        curves[str(k)] = {str(r): float(np.mean([p[r] for p in per_seed])) for r in rounds_seen}
        finals[str(k)] = float(np.mean([p[rounds_seen[-1]] for p in per_seed])) if rounds_seen else 0.0
    return {"counts": list(counts), "seeds": list(seeds), "rounds": rounds, "curves": curves,
            "final": finals, "config": config_to_dict(cfg)}
