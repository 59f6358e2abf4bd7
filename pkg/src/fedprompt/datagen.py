"""Synthetic worlds, client tasks and scenes, plus JSON-lines scene files.

A world has one unit prototype per class. Class-name tokens embed as
``prototype + bias + noise`` where the bias is shared by every class and
points along the normalized prototype sum, so an unprompted detector sees
all classes pulled toward a common direction. Prompt rows equal to
``-(mean span length / m) * bias`` cancel it exactly (:func:`oracle_prompts`).

Noise scales (``sigma_tok``, ``sigma_img``) are expected vector norms: each
coordinate gets standard deviation ``sigma / sqrt(d)``. Proposal jitter
``sigma_box`` is relative to the box extent along each axis.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .numerics import RngStream
from .surrogate import FrozenBackbone, Scene

DEFAULT_NAMES = ("apple", "orange", "lemon", "pear", "peach", "plum",
                 "cherry", "grape", "mango", "kiwi", "lime", "fig")
BOX_RANGE = (0.15, 0.4)


@dataclass(frozen=True)
class WorldConfig:
    d: int = 64
    n_classes: int = 6
    beta: float = 2.0
    sigma_tok: float = 0.1
    sigma_img: float = 0.1
    sigma_box: float = 0.05
    class_names: tuple[str, ...] | None = None
    temperature: float = 10.0
    center: float = 0.8
    box_step: float = 0.2
    box_head_scale: float = 0.25

    def names(self) -> tuple[str, ...]:
        if self.class_names is not None:
            if len(self.class_names) != self.n_classes:
                raise ConfigError("class_names must list exactly n_classes names")
            return tuple(self.class_names)
        if self.n_classes <= len(DEFAULT_NAMES):
            return DEFAULT_NAMES[:self.n_classes]
        return tuple(f"class{i}" for i in range(self.n_classes))


@dataclass(frozen=True)
class SyntheticWorld:
    config: WorldConfig
    prototypes: np.ndarray
    bias: np.ndarray
    class_names: tuple[str, ...]
    backbone: FrozenBackbone

    @property
    def d(self) -> int:
        return self.config.d


def _unit(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def generate_world(config: WorldConfig, stream: RngStream) -> SyntheticWorld:
    d, C = config.d, config.n_classes
    if C < 2 or d < 8:
        raise ConfigError(f"world needs n_classes >= 2 and d >= 8, got {C}, {d}")
    names = config.names()
    protos = _unit(stream.normal(C * d).reshape(C, d))
    bias = config.beta * _unit(protos.sum(axis=0))
    table = {}
    for c, name in enumerate(names):
        for tok in name.split():
            if tok in table:
                raise ConfigError(f"token {tok!r} appears in more than one class name")
            noise = stream.normal(d) * (config.sigma_tok / np.sqrt(d))
            table[tok] = protos[c] + bias + noise
    box_head = config.box_head_scale * stream.normal(4 * d).reshape(4, d)
    hash_seed = int(stream.next_u64(1)[0])
    backbone = FrozenBackbone(d=d, token_table=table, box_head=box_head, hash_seed=hash_seed,
                              temperature=config.temperature, center=config.center,
                              box_step=config.box_step)
    return SyntheticWorld(config, protos, bias, names, backbone)


def _random_box(stream: RngStream) -> np.ndarray:
    lo, hi = BOX_RANGE
    u = stream.uniform(4)
    w, h = lo + (hi - lo) * u[0], lo + (hi - lo) * u[1]
    return np.array([w / 2 + (1 - w) * u[2], h / 2 + (1 - h) * u[3], w, h])


def _valid_box(b: np.ndarray, min_extent: float = 0.02) -> np.ndarray:
    w = min(max(b[2], min_extent), 1.0)
    h = min(max(b[3], min_extent), 1.0)
    return np.array([min(max(b[0], w / 2), 1 - w / 2), min(max(b[1], h / 2), 1 - h / 2), w, h])


def generate_scene(world: SyntheticWorld, class_ids, stream: RngStream) -> Scene:
    """1-4 labelled objects, each with one jittered proposal, plus 2-6 background regions."""
    cfg = world.config
    d = cfg.d
    class_ids = list(class_ids)
    feats, props, labels, gts = [], [], [], []
    for _ in range(stream.randint(1, 4)):
        c = class_ids[int(stream.integers(len(class_ids), 1)[0])]
        gt = _random_box(stream)
        u = world.prototypes[c] + stream.normal(d) * (cfg.sigma_img / np.sqrt(d))
        jitter = stream.normal(4) * cfg.sigma_box * np.array([gt[2], gt[3], gt[2], gt[3]])
        feats.append(_unit(u))
        props.append(_valid_box(gt + jitter))
        labels.append(c)
        gts.append(gt)
    for _ in range(stream.randint(2, 6)):
        feats.append(_unit(stream.normal(d)))
        props.append(_random_box(stream))
    order = stream.permutation(len(feats))
    return Scene(np.array(feats)[order], np.array(props)[order],
                 np.array(labels), np.array(gts))


def split_811(n: int, stream: RngStream) -> tuple[list[int], list[int], list[int]]:
    """Shuffle range(n) and cut it 8:1:1 (val and test rounded, train takes the rest)."""
    perm = stream.permutation(n)
    n_val = n_test = int(round(n / 10))
    n_train = n - n_val - n_test
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


@dataclass
class TaskSpec:
    client_id: int
    class_ids: list[int]
    class_names: list[str]
    train: list[Scene] = field(default_factory=list, repr=False)
    val: list[Scene] = field(default_factory=list, repr=False)
    test: list[Scene] = field(default_factory=list, repr=False)

    def columns(self, labels) -> np.ndarray:
        """Map world class ids to positions in this task's class list."""
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([lookup[int(l)] for l in labels], dtype=np.int64)


def partition_classes(n_classes: int, n_clients: int, per_client: int) -> list[list[int]]:
    """Disjoint consecutive class groups, wrapping if there are not enough classes."""
    return [[(i * per_client + j) % n_classes for j in range(per_client)]
            for i in range(n_clients)]


def make_tasks(world: SyntheticWorld, n_clients: int = 3, classes_per_client: int = 2,
               scenes_per_client: int = 2000, train_limit: int | None = 16,
               stream: RngStream | None = None) -> list[TaskSpec]:
    """One task per client, each split 8:1:1 over ``scenes_per_client`` scenes.

    Every scene is drawn from its own child stream keyed by (client, index),
    so only the scenes that are kept need to be generated; ``train_limit``
    caps the training split to a few-shot subset.
    """
    if stream is None:
        raise ConfigError("make_tasks needs the scenes stream")
    tasks = []
    for cid, classes in enumerate(partition_classes(world.config.n_classes, n_clients,
                                                    classes_per_client)):
        tr, va, te = split_811(scenes_per_client, stream.spawn("split", cid))
        if train_limit is not None:
            tr = tr[:train_limit]

        def build(indices):
            return [generate_scene(world, classes, stream.spawn("scene", cid, i)) for i in indices]

        tasks.append(TaskSpec(cid, list(classes), [world.class_names[c] for c in classes],
                              build(tr), build(va), build(te)))
    return tasks


def oracle_prompts(world: SyntheticWorld, class_ids, m: int) -> np.ndarray:
    """Prompt rows that cancel the shared text bias for these classes."""
    if m < 1:
        raise ConfigError("oracle prompts need m >= 1")
    lengths = [len(world.class_names[c].split()) for c in class_ids]
    mean_len = sum(lengths) / len(lengths)
    return np.tile(-(mean_len / m) * world.bias, (m, 1))


# -- scene files -------------------------------------------------------------

def _box(value, where: str) -> np.ndarray:
    if not (isinstance(value, list) and len(value) == 4
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        raise FormatError(f"{where}: box must be a list of 4 numbers")
    return np.array(value, dtype=np.float64)


def parse_scene(record: dict, d: int | None = None, where: str = "scene") -> Scene:
    if not isinstance(record, dict) or set(record) != {"regions", "gt"}:
        raise FormatError(f"{where}: expected exactly the keys 'regions' and 'gt'")
    regions, gt = record["regions"], record["gt"]
    if not isinstance(regions, list) or not isinstance(gt, list):
        raise FormatError(f"{where}: 'regions' and 'gt' must be lists")
    feats, props = [], []
    for i, r in enumerate(regions):
        if not isinstance(r, dict) or set(r) != {"feature", "box"}:
            raise FormatError(f"{where}: region {i} needs exactly 'feature' and 'box'")
        f = r["feature"]
        if not isinstance(f, list) or not f or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in f):
            raise FormatError(f"{where}: region {i} feature must be a list of numbers")
        if d is not None and len(f) != d:
            raise FormatError(f"{where}: region {i} feature has length {len(f)}, expected {d}")
        v = np.array(f, dtype=np.float64)
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm == 0:
            raise FormatError(f"{where}: region {i} feature is zero or non-finite")
        feats.append(v / norm)
        props.append(_box(r["box"], f"{where}: region {i}"))
    labels, boxes = [], []
    for i, g in enumerate(gt):
        if not isinstance(g, dict) or set(g) != {"label", "box"}:
            raise FormatError(f"{where}: gt {i} needs exactly 'label' and 'box'")
        if not isinstance(g["label"], int) or isinstance(g["label"], bool) or g["label"] < 0:
            raise FormatError(f"{where}: gt {i} label must be a non-negative integer")
        labels.append(g["label"])
        boxes.append(_box(g["box"], f"{where}: gt {i}"))
    if len({len(f) for f in feats}) > 1:
        raise FormatError(f"{where}: region features differ in length")
    width = len(feats[0]) if feats else (d or 0)
    try:
        return Scene(np.array(feats).reshape(len(feats), width), np.array(props).reshape(-1, 4),
                     np.array(labels, dtype=np.int64), np.array(boxes).reshape(-1, 4))
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def load_scenes(path, d: int | None = None) -> list[Scene]:
    """Read one scene per line; errors name the offending line number."""
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            scenes.append(parse_scene(record, d, where=f"line {lineno}"))
    return scenes


def scene_record(scene: Scene) -> dict:
    return {
        "regions": [{"feature": f.tolist(), "box": b.tolist()}
                    for f, b in zip(scene.features, scene.proposals)],
        "gt": [{"label": int(l), "box": b.tolist()} for l, b in zip(scene.gt_labels, scene.gt_boxes)],
    }


def write_scenes(path, scenes) -> None:
    Path(path).write_text("".join(json.dumps(scene_record(s)) + "\n" for s in scenes),
                          encoding="utf-8")
