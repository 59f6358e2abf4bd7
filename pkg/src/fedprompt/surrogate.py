"""Frozen stand-in for an open-vocabulary detector.

Text side: a fixed token table, prompt insertion before each class span and
mean pooling into one unit feature per class. Image side: a scene is a set of
region features with proposal boxes. The head scores every (region, class)
pair by cosine similarity and nudges the proposal box through a fixed linear
map. Nothing here is trainable; gradients flow only back to the text rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .losses import check_boxes
from .numerics import RngStream, as_matrix
from .promptgen import ClassEmbeddingBatch, Span

MIN_EXTENT = 1e-3
BOX_THRESHOLD = 0.3
TEXT_THRESHOLD = 0.25


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FrozenBackbone:
    d: int
    token_table: dict
    box_head: np.ndarray
    hash_seed: int
    temperature: float = 10.0
    center: float = 0.5
    box_step: float = 0.2
    token_shift: np.ndarray | None = None

    def __post_init__(self):
        table = {tok: _frozen(v) for tok, v in self.token_table.items()}
        object.__setattr__(self, "token_table", table)
        object.__setattr__(self, "box_head", _frozen(self.box_head))
        if self.box_head.shape != (4, self.d):
            raise ShapeError(f"box head must be (4, {self.d}), got {self.box_head.shape}")
        if self.token_shift is not None:
            object.__setattr__(self, "token_shift", _frozen(self.token_shift))

    def embed(self, token: str) -> np.ndarray:
        if token in self.token_table:
            v = self.token_table[token]
        else:
            # unseen words: hashed Gaussian with variance 1/d
            v = RngStream(self.hash_seed, "token:" + token).normal(self.d) / np.sqrt(self.d)
        if self.token_shift is not None:
            v = v + self.token_shift
        return v

    def with_shift(self, shift) -> "FrozenBackbone":
        return FrozenBackbone(self.d, self.token_table, self.box_head, self.hash_seed,
                              self.temperature, self.center, self.box_step,
                              None if shift is None else np.asarray(shift, dtype=np.float64))


@dataclass
class Scene:
    features: np.ndarray      # (regions, d), unit rows
    proposals: np.ndarray     # (regions, 4)
    gt_labels: np.ndarray     # (objects,) world class ids
    gt_boxes: np.ndarray      # (objects, 4)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be (regions, d), got {self.features.shape}")
        self.proposals = np.asarray(self.proposals, dtype=np.float64).reshape(-1, 4)
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64).reshape(-1)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        if self.features.shape[0] != self.proposals.shape[0]:
            raise ShapeError("one proposal box per region feature required")
        if self.gt_labels.shape[0] != self.gt_boxes.shape[0]:
            raise ShapeError("one label per ground-truth box required")
        if self.features.size and np.max(np.abs(np.linalg.norm(self.features, axis=1) - 1)) > 1e-9:
            raise DomainError("region features must be unit vectors")
        for boxes in (self.proposals, self.gt_boxes):
            if boxes.size:
                check_boxes(boxes)
                c = np.stack([boxes[:, 0] - boxes[:, 2] / 2, boxes[:, 1] - boxes[:, 3] / 2,
                              boxes[:, 0] + boxes[:, 2] / 2, boxes[:, 1] + boxes[:, 3] / 2], 1)
                if c.min() < -1e-9 or c.max() > 1 + 1e-9:
                    raise DomainError("box leaves the unit square")

    @property
    def n_regions(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Detection:
    box: np.ndarray
    class_name: str
    score: float
    similarity: float
    label: int = -1
    region: int = -1


def encode_classnames(backbone: FrozenBackbone, class_names: Sequence[str]) -> ClassEmbeddingBatch:
    if not class_names:
        raise ConfigError("need at least one class name")
    rows, spans = [], []
    for name in class_names:
        toks = name.split()
        if not toks:
            raise ConfigError(f"class name {name!r} has no tokens")
        spans.append(Span(name, len(rows), len(toks)))
        rows.extend(backbone.embed(t) for t in toks)
    return ClassEmbeddingBatch(np.array(rows), spans)


@dataclass
class PromptedSequence:
    """Text rows after prompt insertion.

    ``blocks[c] = (prompt_start, n_prompt, token_start, n_tokens)``; the prompt
    rows of a class immediately precede its tokens.
    """

    rows: np.ndarray
    names: list[str]
    blocks: list[tuple[int, int, int, int]]

    @property
    def m(self) -> int:
        return self.blocks[0][1] if self.blocks else 0


def assemble_prompted_embeddings(T: ClassEmbeddingBatch, P) -> PromptedSequence:
    P = np.asarray(P, dtype=np.float64)
    if P.size == 0:
        P = np.zeros((0, T.tokens.shape[1]))
    if P.ndim != 2 or P.shape[1] != T.tokens.shape[1]:
        raise ShapeError(f"prompt width {P.shape} does not match token width {T.tokens.shape[1]}")
    m = P.shape[0]
    parts, blocks, pos = [], [], 0
    for s in T.spans:
        parts.append(P)
        parts.append(T.tokens[s.start:s.start + s.length])
        blocks.append((pos, m, pos + m, s.length))
        pos += m + s.length
    return PromptedSequence(np.concatenate(parts, axis=0), T.class_names, blocks)


def prompt_grad(seq: PromptedSequence, d_rows: np.ndarray) -> np.ndarray:
    """Sum row gradients over every inserted copy of the prompt block."""
    m = seq.m
    out = np.zeros((m, seq.rows.shape[1]))
    for p0, n_p, _, _ in seq.blocks:
        out += d_rows[p0:p0 + n_p]
    return out


@dataclass
class FeatureTrace:
    means: np.ndarray
    norms: np.ndarray


def class_features(seq: PromptedSequence):
    """Unit-normalized mean of each class's prompt and token rows."""
    means = np.array([seq.rows[p0:t0 + n_t].mean(axis=0) for p0, _, t0, n_t in seq.blocks])
    norms = np.linalg.norm(means, axis=1)
    if np.any(norms < 1e-12):
        raise DomainError("pooled class feature is the zero vector")
    return means / norms[:, None], FeatureTrace(means, norms)


def class_features_backward(seq: PromptedSequence, feats: np.ndarray, trace: FeatureTrace,
                            d_feats) -> np.ndarray:
    d_feats = as_matrix(d_feats)
    radial = (feats * d_feats).sum(axis=1, keepdims=True)
    d_means = (d_feats - feats * radial) / trace.norms[:, None]
    d_rows = np.zeros_like(seq.rows)
    for (p0, n_p, t0, n_t), dm in zip(seq.blocks, d_means):
        d_rows[p0:t0 + n_t] += dm / (n_p + n_t)
    return d_rows


# -- detection head --------------------------------------------------------

def _clamp_boxes(raw):
    w = np.clip(raw[..., 2], MIN_EXTENT, 1.0)
    h = np.clip(raw[..., 3], MIN_EXTENT, 1.0)
    cx = np.clip(raw[..., 0], w / 2, 1 - w / 2)
    cy = np.clip(raw[..., 1], h / 2, 1 - h / 2)
    return np.stack([cx, cy, w, h], axis=-1)


def _clamp_backward(raw, d_out):
    w = np.clip(raw[..., 2], MIN_EXTENT, 1.0)
    h = np.clip(raw[..., 3], MIN_EXTENT, 1.0)
    d = np.zeros_like(d_out)
    for ci, ei in ((0, 2), (1, 3)):
        ext = w if ei == 2 else h
        c = raw[..., ci]
        inside = (c >= ext / 2) & (c <= 1 - ext / 2)
        low = c < ext / 2
        d[..., ci] = d_out[..., ci] * inside
        # clipped center follows the extent: cx' = w/2 or 1 - w/2
        d_ext = d_out[..., ei] + d_out[..., ci] * np.where(inside, 0.0, np.where(low, 0.5, -0.5))
        d[..., ei] = d_ext * ((raw[..., ei] >= MIN_EXTENT) & (raw[..., ei] <= 1.0))
    return d


@dataclass
class DenseTrace:
    similarity: np.ndarray
    box_pre: np.ndarray
    raw_boxes: np.ndarray


def detect_forward_for_training(backbone: FrozenBackbone, scene: Scene, class_feats):
    """Unthresholded logits (regions x classes) and class-conditional boxes."""
    F = as_matrix(class_feats, "class_feats")
    U = scene.features
    if U.shape[0] and U.shape[1] != F.shape[1]:
        raise ShapeError(f"region width {U.shape[1]} != class feature width {F.shape[1]}")
    n_r, n_c = U.shape[0], F.shape[0]
    if n_r == 0:
        empty = np.zeros((0, n_c))
        return empty, np.zeros((0, n_c, 4)), DenseTrace(empty, np.zeros((0, n_c, 4)),
                                                        np.zeros((0, n_c, 4)))
    sim = U @ F.T
    logits = backbone.temperature * (sim - backbone.center)
    box_pre = np.einsum("ki,ri,ci->rck", backbone.box_head, U, F)
    raw = scene.proposals[:, None, :] + backbone.box_step * np.tanh(box_pre)
    return logits, _clamp_boxes(raw), DenseTrace(sim, box_pre, raw)


def detect_backward(backbone: FrozenBackbone, scene: Scene, trace: DenseTrace,
                    d_logits, d_boxes) -> np.ndarray:
    """Gradient with respect to the class features."""
    U = scene.features
    d_raw = _clamp_backward(trace.raw_boxes, np.asarray(d_boxes, dtype=np.float64))
    d_pre = d_raw * backbone.box_step * (1.0 - np.tanh(trace.box_pre) ** 2)
    d_F = backbone.temperature * (np.asarray(d_logits).T @ U)
    d_F += np.einsum("rck,ki,ri->ci", d_pre, backbone.box_head, U)
    return d_F


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def detect(backbone: FrozenBackbone, scene: Scene, class_feats, class_names=None, labels=None,
           box_threshold: float = BOX_THRESHOLD, text_threshold: float = TEXT_THRESHOLD):
    """Thresholded detections, at most one (the best-scoring class) per region."""
    F = as_matrix(class_feats, "class_feats")
    n_c = F.shape[0]
    class_names = list(class_names) if class_names is not None else [str(i) for i in range(n_c)]
    labels = list(labels) if labels is not None else list(range(n_c))
    logits, boxes, tr = detect_forward_for_training(backbone, scene, F)
    scores = _sigmoid(logits)
    out = []
    for r in range(logits.shape[0]):
        c = int(np.argmax(logits[r]))  # first maximum, i.e. lowest class index on ties
        s, sim = float(scores[r, c]), float(tr.similarity[r, c])
        if s >= box_threshold and sim >= text_threshold:
            out.append(Detection(boxes[r, c].copy(), class_names[c], s, sim, labels[c], r))
    return out
