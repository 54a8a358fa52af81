import numpy as np
import pytest

from latentmath.diffarray import ShapeMismatch, Tensor
from latentmath.diffarray import functional as F
from latentmath.diffarray.gradcheck import max_relative_error
from latentmath.heads import (
    Paradigm,
    ProjectionHead,
    TranslationHead,
    ZeroVector,
    cosine_matrix,
    propagate,
    score,
    score_value,
)
from latentmath.ops import OPERATIONS, OperationKind

D = 8
RNG = np.random.default_rng(0)


def test_projection_zero_and_identity():
    head = ProjectionHead(D, 6)
    head.params["w"].data[:] = 0
    e_x = Tensor(RNG.normal(size=(3, D)))
    t = Tensor(np.eye(6, dtype=np.float32)[:3])
    assert not head.predict(e_x, t).data.any()
    head.params["w"].data[6:, :] = np.eye(D)
    np.testing.assert_allclose(head.predict(e_x, t).data, e_x.data)


def test_projection_matches_dense_oracle():
    head = ProjectionHead(D, D, seed=4)
    head.params["b"].data[:] = RNG.normal(size=D)
    for _ in range(20):
        e_x, t = RNG.normal(size=D), RNG.normal(size=D)
        got = head.predict(Tensor(e_x[None]), Tensor(t[None])).data[0]
        w, b = head.params["w"].data.astype(np.float64), head.params["b"].data
        want = np.array([sum(np.concatenate([t, e_x])[k] * w[k, j] for k in range(2 * D)) for j in range(D)]) + b
        np.testing.assert_allclose(got, want, atol=1e-5, rtol=1e-5)


def test_projection_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ProjectionHead(D, 6).predict(Tensor(np.ones((1, D))), Tensor(np.ones((1, D))))


def test_translation_identity_and_resolved():
    head = TranslationHead(D)
    e_x = Tensor(RNG.normal(size=(6, D)).astype(np.float32))
    np.testing.assert_array_equal(head.shifted(e_x, OPERATIONS).data, e_x.data)
    zero = Tensor(np.zeros((6, D), np.float32))
    np.testing.assert_array_equal(head.resolved(e_x, OPERATIONS, zero).data, e_x.data)
    head.params["diag"].data[:] = RNG.normal(size=(6, D))
    t = Tensor(RNG.normal(size=(6, D)).astype(np.float32))
    shifted = head.shifted(e_x, OPERATIONS).data
    np.testing.assert_allclose(shifted, head.params["diag"].data * e_x.data, atol=1e-6)
    np.testing.assert_allclose(head.resolved(e_x, OPERATIONS, t).data, shifted - t.data, atol=1e-6)


def test_translation_shared_diag():
    head = TranslationHead(D, shared_diag=True)
    assert head.params["diag"].shape == (1, D)
    head.params["diag"].data[:] = 2
    out = head.shifted(Tensor(np.ones((2, D), np.float32)), [OperationKind.ADDITION, OperationKind.INTEGRATION])
    assert (out.data == 2).all()


def test_score_examples():
    p = Paradigm("projection-dense", D, seed=1)
    e_x = RNG.normal(size=D).astype(np.float32)
    pred = p.anchor(Tensor(e_x[None]), [OperationKind.ADDITION]).data[0].astype(np.float64)
    assert score(p, e_x, OperationKind.ADDITION, pred) == pytest.approx(0.0, abs=1e-6)
    ortho = RNG.normal(size=D)
    ortho -= ortho @ pred / (pred @ pred) * pred
    assert score(p, e_x, OperationKind.ADDITION, ortho) == pytest.approx(-1.0, abs=1e-6)
    with pytest.raises(ZeroVector):
        score(p, e_x, OperationKind.ADDITION, np.zeros(D))


def test_score_ranking_matches_cosine():
    for name in ("projection-dense", "translation"):
        p = Paradigm(name, D, seed=2)
        if name == "translation":
            p.head.params["diag"].data[:] = RNG.normal(size=(6, D))
        for _ in range(1000 // 50):
            e_x = RNG.normal(size=D).astype(np.float32)
            cands = RNG.normal(size=(50, D))
            t = OperationKind(int(RNG.integers(6)))
            scores = np.array([score(p, e_x, t, c) for c in cands])
            anchor = p.anchor(Tensor(e_x[None]), [t]).data[0]
            shift = p.target_shift([t])
            targets = cands + (shift.data[0] if shift is not None else 0)
            cos = cosine_matrix(anchor.astype(np.float64), targets)
            assert list(np.argsort(-scores, kind="stable")) == list(np.argsort(-cos, kind="stable"))
            assert (scores <= 0).all()


def test_scale_invariance_of_ranking():
    p = Paradigm("projection-onehot", D, seed=5)
    e_x = RNG.normal(size=D).astype(np.float32)
    cands = RNG.normal(size=(24, D))
    base = [score(p, e_x, OperationKind.SUBTRACTION, c) for c in cands]
    scaled = [score(p, e_x, OperationKind.SUBTRACTION, 7.5 * c) for c in cands]
    assert np.argsort(base, kind="stable").tolist() == np.argsort(scaled, kind="stable").tolist()


def test_shifted_resolved_consistency():
    p = Paradigm("translation", D, seed=6)
    p.head.params["diag"].data[:] = RNG.normal(size=(6, D))
    e_x = Tensor(RNG.normal(size=(6, D)).astype(np.float32))
    e_y = RNG.normal(size=(6, D))
    t = p.op_encoder.encode(OPERATIONS).data
    shifted = p.anchor(e_x, OPERATIONS).data
    resolved = p.next_premise(e_x, OPERATIONS).data
    for i in range(6):
        a = cosine_matrix(shifted[i].astype(np.float64), (e_y[i] + t[i])[None])[0]
        b = cosine_matrix((resolved[i] + t[i]).astype(np.float64), (e_y[i] + t[i])[None])[0]
        assert a == pytest.approx(b, abs=1e-6)


def test_score_value_bounds():
    cos = np.linspace(-1, 1, 101)
    v = score_value(cos)
    assert (v <= 0).all() and v[-1] == 0 and (np.diff(v) > 0).all()


def test_propagate():
    for name in ("projection-dense", "translation"):
        p = Paradigm(name, D, seed=7)
        e0 = RNG.normal(size=D).astype(np.float32)
        assert len(propagate(p, e0, [])) == 1
        one = propagate(p, e0, [OperationKind.DIFFERENTIATION])[1]
        np.testing.assert_allclose(one, p.next_premise(Tensor(e0[None]), [OperationKind.DIFFERENTIATION]).data[0])
        chain = propagate(p, e0, list(OPERATIONS))
        assert len(chain) == 7 and all(v.shape == (D,) for v in chain)


@pytest.mark.parametrize("name", ["projection-onehot", "projection-dense", "translation"])
def test_head_gradients_match_finite_differences(name):
    ops = [OperationKind(i % 6) for i in range(4)]
    for seed in range(10):
        rng = np.random.default_rng(seed)
        p = Paradigm(name, 4, seed=seed)
        params = p.parameters()
        arrays = [rng.normal(size=t.shape) for t in params]
        e_x, e_y = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))

        def loss(*leaves):
            for t, leaf in zip(params, leaves):
                t.data, t.requires_grad = leaf.data, leaf.requires_grad
            # rebind so the tape sees the leaves themselves
            if name == "translation":
                p.head.params["diag"] = leaves[-1]
                p.op_encoder.table = leaves[0]
            else:
                p.head.params["w"], p.head.params["b"] = leaves[-2], leaves[-1]
                if name == "projection-dense":
                    p.op_encoder.table = leaves[0]
            anchor = p.anchor(Tensor(e_x, dtype=np.float64), ops)
            target = Tensor(e_y, dtype=np.float64)
            shift = p.target_shift(ops)
            if shift is not None:
                target = F.add(target, shift)
            return F.sum(score_tensor(anchor, target))

        assert max_relative_error(loss, arrays) <= 1e-4


def score_tensor(anchor, target):
    one_minus = F.sub(1.0, F.cosine_similarity(anchor, target))
    return F.neg(F.mul(one_minus, one_minus))
