import numpy as np
import pytest

from fedprompt.errors import ConfigError, DomainError, ShapeError
from fedprompt.numerics import RngStream, finite_diff_grad
from fedprompt.surrogate import (FrozenBackbone, Scene, assemble_prompted_embeddings,
                                 class_features, class_features_backward, detect,
                                 detect_backward, detect_forward_for_training,
                                 encode_classnames, prompt_grad)


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def backbone(rng, d=6, **kw):
    table = {t: rng.normal(size=d) for t in ("red", "apple", "orange", "lemon")}
    return FrozenBackbone(d=d, token_table=table, box_head=rng.normal(size=(4, d)), hash_seed=7, **kw)


def random_scene(rng, d, n_regions=5, n_gt=2):
    feats = unit(rng.normal(size=(n_regions, d)))
    props = np.column_stack([rng.uniform(0.3, 0.7, (n_regions, 2)), rng.uniform(0.1, 0.3, (n_regions, 2))])
    gts = np.column_stack([rng.uniform(0.3, 0.7, (n_gt, 2)), rng.uniform(0.1, 0.3, (n_gt, 2))])
    return Scene(feats, props, rng.integers(0, 2, n_gt), gts)


def test_encode_tokenization(rng):
    bb = backbone(rng)
    T = encode_classnames(bb, ["red apple"])
    assert T.tokens.shape == (2, 6) and len(T.spans) == 1 and T.spans[0].length == 2
    T3 = encode_classnames(bb, ["apple", "orange", "lemon"])
    assert len(T3.spans) == 3
    for row, tok in zip(T3.tokens, ("apple", "orange", "lemon")):
        assert np.array_equal(row, bb.token_table[tok])
    assert np.array_equal(encode_classnames(bb, ["apple"]).tokens, encode_classnames(bb, ["apple"]).tokens)


def test_encode_errors_and_unknown_tokens(rng):
    bb = backbone(rng)
    with pytest.raises(ConfigError):
        encode_classnames(bb, [])
    with pytest.raises(ConfigError):
        encode_classnames(bb, ["  "])
    a = bb.embed("kumquat")
    assert np.array_equal(a, bb.embed("kumquat"))
    assert a.shape == (6,)


def test_backbone_is_immutable(rng):
    bb = backbone(rng)
    with pytest.raises(ValueError):
        bb.box_head[0, 0] = 1.0
    with pytest.raises(ValueError):
        bb.token_table["apple"][0] = 1.0


def test_assemble_shapes_and_rows(rng):
    bb = backbone(rng)
    T = encode_classnames(bb, ["red apple", "orange", "lemon"])
    P = rng.normal(size=(4, 6))
    seq = assemble_prompted_embeddings(T, P)
    assert seq.rows.shape == (4 * 3 + 4, 6)
    for (p0, n_p, t0, n_t), span in zip(seq.blocks, T.spans):
        assert np.array_equal(seq.rows[p0:p0 + n_p], P)
        assert np.array_equal(seq.rows[t0:t0 + n_t], T.tokens[span.start:span.start + span.length])
    empty = assemble_prompted_embeddings(T, np.zeros((0, 6)))
    assert np.array_equal(empty.rows, T.tokens)
    with pytest.raises(ShapeError):
        assemble_prompted_embeddings(T, np.zeros((2, 5)))


def test_five_tokens_three_classes_width_four(rng):
    bb = backbone(rng)
    T = encode_classnames(bb, ["red apple", "orange lemon", "kiwi"])
    assert assemble_prompted_embeddings(T, np.ones((4, 6))).rows.shape == (17, 6)


def test_class_feature_examples(rng):
    bb = backbone(rng)
    T = encode_classnames(bb, ["apple"])
    f, _ = class_features(assemble_prompted_embeddings(T, np.zeros((0, 6))))
    assert np.allclose(f[0], unit(bb.token_table["apple"]))
    v = rng.normal(size=6)
    seq = assemble_prompted_embeddings(encode_classnames(FrozenBackbone(
        6, {"a": v, "b": v}, np.zeros((4, 6)), 0), ["a b"]), np.tile(v, (3, 1)))
    assert np.allclose(class_features(seq)[0][0], unit(v))


def test_zero_pooled_feature_is_an_error(rng):
    v = rng.normal(size=6)
    bb = FrozenBackbone(6, {"a": v}, np.zeros((4, 6)), 0)
    with pytest.raises(DomainError):
        class_features(assemble_prompted_embeddings(encode_classnames(bb, ["a"]), -v[None]))


def test_feature_gradient_wrt_prompts(rng):
    bb = backbone(rng)
    T = encode_classnames(bb, ["red apple", "lemon"])
    G = rng.normal(size=(2, 6))

    def loss(P):
        return float(np.sum(class_features(assemble_prompted_embeddings(T, P))[0] * G))

    P = rng.normal(size=(3, 6))
    seq = assemble_prompted_embeddings(T, P)
    f, tr = class_features(seq)
    analytic = prompt_grad(seq, class_features_backward(seq, f, tr, G))
    assert np.max(np.abs(analytic - finite_diff_grad(loss, P))) < 1e-8


def test_score_for_perfect_alignment(rng):
    d = 6
    t = unit(rng.normal(size=d))
    bb = FrozenBackbone(d, {}, np.zeros((4, d)), 0)
    scene = Scene(t[None], [[0.5, 0.5, 0.2, 0.2]], [], np.zeros((0, 4)))
    dets = detect(bb, scene, t[None])
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(1 / (1 + np.exp(-5)), abs=1e-12)
    assert dets[0].score == pytest.approx(0.9933, abs=1e-4)
    assert np.array_equal(dets[0].box, [0.5, 0.5, 0.2, 0.2])


def test_orthogonal_region_is_filtered(rng):
    bb = FrozenBackbone(2, {}, np.zeros((4, 2)), 0, center=-1.0)
    scene = Scene([[1.0, 0.0]], [[0.5, 0.5, 0.2, 0.2]], [], np.zeros((0, 4)))
    assert detect(bb, scene, [[0.0, 1.0]]) == []


def test_detect_contract(rng):
    bb = backbone(rng, center=0.0)
    for _ in range(30):
        scene = random_scene(rng, 6, n_regions=6)
        F = unit(rng.normal(size=(3, 6)))
        logits, boxes, tr = detect_forward_for_training(bb, scene, F)
        dets = detect(bb, scene, F)
        assert len({d.region for d in dets}) == len(dets)
        for det in dets:
            assert det.score >= 0.3 and det.similarity >= 0.25
            assert det.label == int(np.argmax(logits[det.region]))
            assert np.array_equal(det.box, boxes[det.region, det.label])
        lo = boxes[..., :2] - boxes[..., 2:] / 2
        hi = boxes[..., :2] + boxes[..., 2:] / 2
        assert lo.min() >= -1e-12 and hi.max() <= 1 + 1e-12 and boxes[..., 2:].min() >= 1e-3


def test_dense_backward_matches_finite_differences(rng):
    bb = backbone(rng, center=0.2)
    scene = random_scene(rng, 6)
    F = unit(rng.normal(size=(3, 6)))
    Gl, Gb = rng.normal(size=(5, 3)), rng.normal(size=(5, 3, 4))
    _, _, tr = detect_forward_for_training(bb, scene, F)
    analytic = detect_backward(bb, scene, tr, Gl, Gb)

    def f(x):
        lg, bx, _ = detect_forward_for_training(bb, scene, x)
        return float(np.sum(lg * Gl) + np.sum(bx * Gb))

    assert np.max(np.abs(analytic - finite_diff_grad(f, F))) < 1e-6


def test_zero_regions(rng):
    bb = backbone(rng)
    scene = Scene(np.zeros((0, 6)), np.zeros((0, 4)), [], np.zeros((0, 4)))
    logits, boxes, _ = detect_forward_for_training(bb, scene, unit(rng.normal(size=(2, 6))))
    assert logits.shape == (0, 2) and boxes.shape == (0, 2, 4)
    assert detect(bb, scene, unit(rng.normal(size=(2, 6)))) == []


def test_scene_validation():
    with pytest.raises(DomainError):
        Scene([[1.0, 0.0]], [[0.95, 0.5, 0.2, 0.2]], [], np.zeros((0, 4)))
    with pytest.raises(DomainError):
        Scene([[2.0, 0.0]], [[0.5, 0.5, 0.2, 0.2]], [], np.zeros((0, 4)))
    with pytest.raises(ShapeError):
        Scene([[1.0, 0.0]], np.zeros((0, 4)), [], np.zeros((0, 4)))


def test_token_shift(rng):
    bb = backbone(rng)
    s = rng.normal(size=6)
    assert np.allclose(bb.with_shift(s).embed("apple"), bb.token_table["apple"] + s)
    assert bb.token_shift is None
