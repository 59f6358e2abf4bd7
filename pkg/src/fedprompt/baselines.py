"""Reference points around the federated generator.

* static prompts trained like CoOp (one learned matrix, no conditioning),
* few-shot adaptation of the frozen base through a single shared token offset.
"""
from __future__ import annotations

import numpy as np

from .datagen import SyntheticWorld, generate_scene
from .errors import ConfigError
from .numerics import AdamWState, RngStream, adamw_step
from .surrogate import FrozenBackbone, encode_classnames
from .training import StaticPromptModel, loss_and_grad, sequence_loss


def fedcoop_baseline_step(prompts, opt: AdamWState, backbone: FrozenBackbone, T, scenes,
                          class_ids):
    """One AdamW step on a directly learned (m, d) prompt matrix."""
    prompts = np.asarray(prompts, dtype=np.float64)
    model = StaticPromptModel(*prompts.shape)
    loss, grad = loss_and_grad(model, prompts.ravel(), backbone, T, scenes, class_ids)
    flat, opt = adamw_step(opt, prompts.ravel(), grad)
    return flat.reshape(prompts.shape), opt, loss


def adaptation_scenes(world: SyntheticWorld, stream: RngStream, shots: int = 4):
    """``shots`` single-class scenes for every class in the world."""
    return [generate_scene(world, [c], stream.spawn("adapt", c, k))
            for c in range(world.config.n_classes) for k in range(shots)]


def base_adaptation(world: SyntheticWorld, steps: int, stream: RngStream, shots: int = 4,
                    lr: float = 0.05, weight_decay: float = 1e-4,
                    backbone: FrozenBackbone | None = None) -> FrozenBackbone:
    """Fit one offset vector added to every token embedding, then freeze it again.

    Full-batch AdamW on the detection loss over ``shots`` scenes per class,
    with no prompts inserted. ``steps == 0`` returns the backbone unchanged.
    """
    if steps < 0:
        raise ConfigError("adaptation steps must be >= 0")
    backbone = backbone or world.backbone
    if steps == 0:
        return backbone
    ids = list(range(world.config.n_classes))
    names = [world.class_names[c] for c in ids]
    scenes = adaptation_scenes(world, stream, shots)
    shift = np.zeros(world.d)
    opt = AdamWState.zeros(world.d, lr=lr, weight_decay=weight_decay)
    empty = np.zeros((0, world.d))
    for _ in range(steps):
        T = encode_classnames(backbone.with_shift(shift), names)
        _, d_rows, _ = sequence_loss(backbone, T, empty, scenes, ids)
        shift, opt = adamw_step(opt, shift, d_rows.sum(axis=0))
    return backbone.with_shift(shift)
