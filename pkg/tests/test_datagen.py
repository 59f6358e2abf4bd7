import json

import numpy as np
import pytest

from fedprompt.baselines import adaptation_scenes, base_adaptation, fedcoop_baseline_step
from fedprompt.datagen import (WorldConfig, generate_scene, generate_world, load_scenes,
                               make_tasks, oracle_prompts, partition_classes, split_811,
                               write_scenes)
from fedprompt.errors import ConfigError, FormatError
from fedprompt.losses import check_boxes
from fedprompt.numerics import AdamWState, RngStream, finite_diff_grad
from fedprompt.surrogate import assemble_prompted_embeddings, class_features, encode_classnames
from fedprompt.training import StaticPromptModel, loss_and_grad


def world(seed=0, **kw):
    return generate_world(WorldConfig(**kw), RngStream(seed, "world"))


def pooled(w, ids, P):
    T = encode_classnames(w.backbone, [w.class_names[c] for c in ids])
    return class_features(assemble_prompted_embeddings(T, P))[0]


def test_world_invariants():
    w = world()
    assert np.allclose(np.linalg.norm(w.prototypes, axis=1), 1, atol=1e-12)
    assert np.linalg.norm(w.bias) == pytest.approx(2.0, abs=1e-12)
    a, b = world(5), world(5)
    assert np.array_equal(a.prototypes, b.prototypes)
    assert a.backbone.token_table.keys() == b.backbone.token_table.keys()
    for k in a.backbone.token_table:
        assert np.array_equal(a.backbone.token_table[k], b.backbone.token_table[k])


def test_world_rejects_degenerate_dims():
    with pytest.raises(ConfigError):
        world(n_classes=1)
    with pytest.raises(ConfigError):
        world(d=4)


def test_unbiased_world():
    w = world(beta=0.0, sigma_tok=0.0)
    assert not oracle_prompts(w, [0, 1], 4).any()
    for c, name in enumerate(w.class_names):
        assert np.allclose(w.backbone.token_table[name], w.prototypes[c])


def test_prototypes_nearly_orthogonal():
    for seed in range(100):
        G = world(seed).prototypes @ world(seed).prototypes.T
        assert np.max(np.abs(G - np.eye(6))) < 0.5


def test_oracle_prompts_restore_prototype_direction():
    zero = []
    for seed in range(100):
        w = world(seed)
        ids = list(range(6))
        f = pooled(w, ids, oracle_prompts(w, ids, 4))
        assert np.min(np.sum(f * w.prototypes, axis=1)) >= 0.95
        zero.append(np.sum(pooled(w, ids, np.zeros((0, 64))) * w.prototypes, axis=1))
    # the bias leans toward every prototype, so single classes can sit above this mean
    assert np.mean(zero) <= 0.75


def test_oracle_prompt_shape_and_value():
    w = world()
    P = oracle_prompts(w, [0, 1], 4)
    assert P.shape == (4, 64)
    assert np.allclose(P, -w.bias / 4)
    with pytest.raises(ConfigError):
        oracle_prompts(w, [0], 0)


def test_noiseless_scene():
    w = world(sigma_img=0.0, sigma_box=0.0)
    s = generate_scene(w, [2, 3], RngStream(1, "scenes"))
    for label, box in zip(s.gt_labels, s.gt_boxes):
        hits = [r for r in range(s.n_regions) if np.allclose(s.features[r], w.prototypes[label])]
        assert any(np.array_equal(s.proposals[r], box) for r in hits)


def test_scene_fuzz():
    w = world()
    stream = RngStream(9, "scenes")
    for i in range(10_000):
        ids = [i % 6, (i + 1) % 6]
        s = generate_scene(w, ids, stream.spawn(i))
        assert 1 <= len(s.gt_labels) <= 4
        assert 3 <= s.n_regions <= 10
        assert set(s.gt_labels.tolist()) <= set(ids)
        check_boxes(s.proposals)
        check_boxes(s.gt_boxes)


def test_split_proportions():
    for n in (10, 99, 2000):
        tr, va, te = split_811(n, RngStream(n, "scenes"))
        assert len(va) == len(te) == round(n / 10)
        assert sorted(tr + va + te) == list(range(n))


def test_tasks_are_heterogeneous_and_disjoint():
    assert partition_classes(6, 3, 2) == [[0, 1], [2, 3], [4, 5]]
    w = world()
    tasks = make_tasks(w, 3, 2, 200, 16, RngStream(0, "scenes"))
    assert [len(t.train) for t in tasks] == [16] * 3
    assert [len(t.test) for t in tasks] == [20] * 3
    for t in tasks:
        for s in t.train + t.val + t.test:
            assert set(s.gt_labels.tolist()) <= set(t.class_ids)
    with pytest.raises(ConfigError):
        make_tasks(w, stream=None)


def test_scene_file_round_trip(tmp_path):
    w = world()
    scenes = [generate_scene(w, [0, 1], RngStream(2, "scenes").spawn(i)) for i in range(5)]
    path = tmp_path / "scenes.jsonl"
    write_scenes(path, scenes)
    back = load_scenes(path, 64)
    for a, b in zip(scenes, back):
        assert np.allclose(a.features, b.features, atol=1e-15)
        assert np.array_equal(a.gt_labels, b.gt_labels)
        assert np.array_equal(a.proposals, b.proposals)


@pytest.mark.parametrize("line, message", [
    ("not json", "line 2: invalid JSON"),
    (json.dumps({"regions": []}), "line 2"),
    (json.dumps({"regions": [{"feature": [1, 0], "box": [0.5, 0.5, 0.1, 0.1]}], "gt": []}),
     "line 2: region 0 feature has length 2"),
    (json.dumps({"regions": [], "gt": [{"label": -1, "box": [0.5, 0.5, 0.1, 0.1]}]}),
     "line 2: gt 0 label"),
    (json.dumps({"regions": [], "gt": [{"label": 0, "box": [0.5, 0.5, 0.1]}]}), "line 2"),
    (json.dumps({"regions": [], "gt": [{"label": 0, "box": [0.95, 0.5, 0.2, 0.1]}]}), "line 2"),
])
def test_scene_file_errors_name_the_line(tmp_path, line, message):
    good = json.dumps({"regions": [], "gt": []})
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n" + line + "\n", encoding="utf-8")
    with pytest.raises(FormatError, match=message):
        load_scenes(path, 3)


def test_base_adaptation_zero_steps_is_identity():
    w = world()
    assert base_adaptation(w, 0, RngStream(0, "scenes")) is w.backbone
    with pytest.raises(ConfigError):
        base_adaptation(w, -1, RngStream(0, "scenes"))


def test_base_adaptation_moves_toward_minus_bias():
    w = world(d=32)
    cosines = []
    for steps in (5, 20, 80):
        shift = base_adaptation(w, steps, RngStream(0, "scenes"), lr=0.01).token_shift
        cosines.append(float(-shift @ w.bias / np.linalg.norm(shift) / np.linalg.norm(w.bias)))
    assert cosines[0] < cosines[1] < cosines[2]
    assert cosines[2] > 0.9


def test_adaptation_scenes_are_single_class():
    w = world()
    scenes = adaptation_scenes(w, RngStream(1, "scenes"), shots=4)
    assert len(scenes) == 24
    for k, s in enumerate(scenes):
        assert set(s.gt_labels.tolist()) == {k // 4}


def test_fedcoop_parameters_and_gradient():
    w = world(d=8, n_classes=2)
    model = StaticPromptModel(3, 8)
    assert model.size == 3 * 8
    ids = [0, 1]
    T = encode_classnames(w.backbone, list(w.class_names))
    scenes = [generate_scene(w, ids, RngStream(0, "scenes").spawn(i)) for i in range(3)]
    P = RngStream(1, "init").normal(24) * 0.3
    _, grad = loss_and_grad(model, P, w.backbone, T, scenes, ids)
    numeric = finite_diff_grad(lambda x: loss_and_grad(model, x, w.backbone, T, scenes, ids)[0].total, P)
    assert np.linalg.norm(grad - numeric) / np.linalg.norm(numeric) < 1e-4
    new, opt, _ = fedcoop_baseline_step(P.reshape(3, 8), AdamWState.zeros(24, lr=0.01),
                                        w.backbone, T, scenes, ids)
    assert new.shape == (3, 8) and opt.step == 1
