"""Prompt models and the per-batch loss/gradient through the frozen detector."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .losses import LossBreakdown, total_loss
from .metrics import EvalReport, evaluate_map
from .numerics import RngStream
from .promptgen import (INIT_SCALE, TENSOR_NAMES, ClassEmbeddingBatch, PromptGeneratorParams,
                        backprop, generate_prompts, init_params)
from .surrogate import (FrozenBackbone, PromptedSequence, Scene, assemble_prompted_embeddings,
                        class_features, class_features_backward, detect,
                        detect_backward, detect_forward_for_training, prompt_grad)


class GeneratorModel:
    """Context-conditioned prompts from the cross-attention generator."""

    kind = "vllfl"

    def __init__(self, m: int, d: int, d_h: int):
        self.m, self.d, self.d_h = m, d, d_h
        self._template = init_params(m, d, d_h, RngStream(0, "shape"))

    @property
    def size(self) -> int:
        return self._template.size

    def init(self, stream: RngStream) -> np.ndarray:
        return init_params(self.m, self.d, self.d_h, stream).flatten()

    def params(self, flat) -> PromptGeneratorParams:
        return self._template.unflatten(flat)

    def prompts(self, flat, T: ClassEmbeddingBatch):
        params = self.params(flat)
        P, trace = generate_prompts(params, T)
        return P, (params, trace)

    def backward(self, ctx, T: ClassEmbeddingBatch, dP) -> np.ndarray:
        params, trace = ctx
        return backprop(params, trace, T, dP).flatten()

    def tensors(self, flat):
        return self.params(flat).tensors()

    def from_tensors(self, tensors) -> np.ndarray:
        names = tuple(n for n, _ in tensors)
        if names != TENSOR_NAMES:
            raise FormatError(f"expected tensors {TENSOR_NAMES}, got {names}")
        return PromptGeneratorParams(**dict(tensors)).flatten()


class StaticPromptModel:
    """A directly learned prompt matrix that ignores the class embeddings."""

    kind = "fedcoop"

    def __init__(self, m: int, d: int):
        self.m, self.d = m, d

    @property
    def size(self) -> int:
        return self.m * self.d

    def init(self, stream: RngStream) -> np.ndarray:
        return INIT_SCALE * stream.normal(self.size)

    def prompts(self, flat, T):
        return np.asarray(flat, dtype=np.float64).reshape(self.m, self.d), None

    def backward(self, ctx, T, dP) -> np.ndarray:
        return np.asarray(dP, dtype=np.float64).ravel().copy()

    def tensors(self, flat):
        return [("P", np.asarray(flat, dtype=np.float64).reshape(self.m, self.d))]

    def from_tensors(self, tensors) -> np.ndarray:
        if len(tensors) != 1 or tensors[0][0] != "P" or tensors[0][1].shape != (self.m, self.d):
            raise FormatError("expected one tensor 'P' of shape (m, d)")
        return tensors[0][1].ravel().copy()


def make_model(method: str, m: int, d: int, d_h: int):
    if method == "vllfl":
        return GeneratorModel(m, d, d_h)
    if method == "fedcoop":
        return StaticPromptModel(m, d)
    raise ConfigError(f"method {method!r} has no trainable prompt model")


def columns_for(class_ids: Sequence[int], labels) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(class_ids)}
    return np.array([lookup[int(l)] for l in labels], dtype=np.int64)


def sequence_loss(backbone: FrozenBackbone, T: ClassEmbeddingBatch, P, scenes: Sequence[Scene],
                  class_ids: Sequence[int]) -> tuple[LossBreakdown, np.ndarray, PromptedSequence]:
    """Mean scene loss and its gradient with respect to every prompted text row.

    Scenes are accumulated in the order given, which keeps the result
    bit-identical between runs.
    """
    seq = assemble_prompted_embeddings(T, P)
    feats, ftrace = class_features(seq)
    d_feats = np.zeros_like(feats)
    parts = []
    for scene in scenes:
        logits, boxes, trace = detect_forward_for_training(backbone, scene, feats)
        lb, d_logits, d_boxes = total_loss(logits, boxes, columns_for(class_ids, scene.gt_labels),
                                           scene.gt_boxes)
        d_feats += detect_backward(backbone, scene, trace, d_logits, d_boxes)
        parts.append(lb)
    n = max(len(scenes), 1)
    d_rows = class_features_backward(seq, feats, ftrace, d_feats / n)
    return LossBreakdown.mean(parts), d_rows, seq


def loss_and_grad(model, flat, backbone: FrozenBackbone, T: ClassEmbeddingBatch,
                  scenes: Sequence[Scene], class_ids: Sequence[int]):
    P, ctx = model.prompts(flat, T)
    loss, d_rows, seq = sequence_loss(backbone, T, P, scenes, class_ids)
    return loss, model.backward(ctx, T, prompt_grad(seq, d_rows))


def evaluate_prompts(backbone: FrozenBackbone, T: ClassEmbeddingBatch, P, scenes: Sequence[Scene],
                     class_ids: Sequence[int]) -> EvalReport:
    """Thresholded detection on every scene followed by mAP at IoU 0.5."""
    feats, _ = class_features(assemble_prompted_embeddings(T, P))
    dets = [detect(backbone, s, feats, T.class_names, class_ids) for s in scenes]
    return evaluate_map(dets, scenes)
