import random

import numpy as np
import pytest

from helpers import random_canonical, random_raw
from latentmath.diffarray import backward
from latentmath.diffarray import functional as F
from latentmath.encoders import (
    FAMILIES,
    EmptyInput,
    EncoderConfig,
    OperationEncoder,
    TokenVocabulary,
    build_operation_tree,
    build_vocabulary,
    encode_expression,
    encode_operation,
    make_encoder,
    tokenize_latex,
)
from latentmath.encoders.optree import OperationTree
from latentmath.expr import Symbol, cos, log, serialize_latex, simplify
from latentmath.ops import OPERATIONS, OperationKind

u, x, y, o = (Symbol(n) for n in "uxyo")
CORPUS = [random_canonical(random.Random(i), depth=3) for i in range(60)] + [u + cos(log(-x + o))]


def small_config(family):
    # keep the transformer shallow so the suite stays quick; defaults are checked separately
    return EncoderConfig(family=family, dim=16, layers=2 if family == "transformer" else None, heads=4)


@pytest.fixture(scope="module", params=FAMILIES)
def encoder(request):
    fam = request.param
    return make_encoder(small_config(fam), build_vocabulary(fam, CORPUS), seed=0)


def test_tokenize_examples():
    assert tokenize_latex(r"u + \cos{(\log{(- x + o)})}") == [
        "u", "+", "\\cos", "{", "(", "\\log", "{", "(", "-", "x", "+", "o", ")", "}", ")", "}",
    ]  # fmt: skip
    assert tokenize_latex("") == []
    assert tokenize_latex("x") == ["x"]
    assert tokenize_latex(r"\frac{12}{x^{3}}") == ["\\frac", "{", "12", "}", "{", "x", "^", "{", "3", "}", "}"]
    assert tokenize_latex(r"\alpha + é") == ["<unk>", "+", "<unk>"]


def test_vocabulary_round_trip(tmp_path):
    vocab = TokenVocabulary.build([r"u + \cos{(x)}", "2 y"])
    assert vocab.tokens[:2] == ["<pad>", "<unk>"]
    assert vocab.encode("q") == [1]
    vocab.save(tmp_path / "vocab.txt")
    again = TokenVocabulary.load(tmp_path / "vocab.txt")
    assert again.tokens == vocab.tokens
    assert (tmp_path / "vocab.txt").read_text().splitlines()[vocab.index["u"]] == "u"


def test_operation_tree_examples():
    t = build_operation_tree(x + y)
    assert t.labels == ("Sum", "x", "y") and set(t.edges) == {(0, 1), (0, 2)}
    t = build_operation_tree(u + cos(log(-x + o)))
    assert len(t) == 9 and len(t.edges) == 8
    assert sorted(t.labels) == sorted(["Sum", "u", "cos", "log", "Sum", "Product", "-1", "x", "o"])
    assert build_operation_tree(x) == OperationTree(("x",), ())


def test_operation_tree_is_preorder_and_connected():
    rng = random.Random(0)
    for _ in range(200):
        t = build_operation_tree(random_canonical(rng, depth=4))
        parents = {c: p for p, c in t.edges}
        assert len(parents) == len(t) - 1 and 0 not in parents
        assert all(p < c for c, p in parents.items())


def test_shape_contract(encoder):
    out = encoder.encode(CORPUS[:7])
    assert out.shape == (7, 16)
    assert encode_expression(encoder, x).shape == (16,)


def test_deterministic(encoder):
    a = encoder.encode(CORPUS[:5]).data
    b = encoder.encode(CORPUS[:5]).data
    assert a.tobytes() == b.tobytes()
    fam = encoder.cfg.family
    other = make_encoder(small_config(fam), build_vocabulary(fam, CORPUS), seed=0)
    assert other.encode(CORPUS[:5]).data.tobytes() == a.tobytes()


def test_empty_input(encoder):
    with pytest.raises(EmptyInput):
        encoder.encode_features([[]])
    with pytest.raises(EmptyInput):
        encoder.encode([])


def test_pad_insensitivity(encoder):
    if encoder.kind != "sequence":
        pytest.skip("sequence encoders only")
    feats = [encoder.featurize(e) for e in CORPUS[:10]]
    base = encoder.encode_features(feats).data
    for extra in (1, 3, 9):
        padded = encoder.encode_features([list(f) + [0] * extra for f in feats]).data
        np.testing.assert_allclose(padded, base, atol=1e-6)
    # batching with a longer neighbour pads implicitly
    alone = encoder.encode_features(feats[:1]).data
    np.testing.assert_allclose(base[:1], alone, atol=1e-6)


def test_graph_child_order_invariance(encoder):
    if encoder.kind != "graph":
        pytest.skip("graph encoders only")
    rng = random.Random(4)
    for _ in range(50):
        e = random_canonical(rng, depth=3)
        tree = build_operation_tree(e)
        base = encoder.encode_features([tree]).data
        # relabel nodes by a random permutation and shuffle the edge list
        n = len(tree)
        perm = [0] + rng.sample(range(1, n), n - 1)
        labels = [None] * n
        for old, new in enumerate(perm):
            labels[new] = tree.labels[old]
        edges = [(perm[a], perm[b]) for a, b in tree.edges]
        rng.shuffle(edges)
        moved = encoder.encode_features([OperationTree(tuple(labels), tuple(edges))]).data
        np.testing.assert_allclose(moved, base, atol=1e-6)


def test_graph_commutative_reordering():
    # a non-canonical tree with children in another order embeds identically
    from latentmath.expr import Sum

    enc = make_encoder(small_config("gcn"), build_vocabulary("gcn", CORPUS), seed=1)
    rng = random.Random(8)
    for _ in range(50):
        e = random_raw(rng, depth=3)
        if not isinstance(e, Sum):
            continue
        flipped = Sum(tuple(reversed(e.args)))
        a = enc.encode_features([build_operation_tree(e)]).data
        b = enc.encode_features([build_operation_tree(flipped)]).data
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_every_parameter_gets_gradient(encoder):
    out = encoder.encode(CORPUS)
    w = np.random.default_rng(0).normal(size=out.shape).astype(np.float32)
    backward(F.sum(F.mul(out, w)))
    dead = [k for k, p in encoder.params.items() if p.grad is None or not np.any(p.grad)]
    assert not dead
    for p in encoder.parameters():
        p.grad = None


def test_full_scale_defaults():
    assert EncoderConfig("gcn").layers == 6 and EncoderConfig("graphsage").layers == 6
    assert EncoderConfig("lstm").layers == 2
    assert EncoderConfig("transformer").layers == 6
    assert EncoderConfig("cnn").filters == ((3, 100), (4, 100), (5, 100))
    for d, h in ((300, 6), (512, 8), (768, 6), (768, 8)):
        EncoderConfig("transformer", dim=d, heads=h)
    with pytest.raises(ValueError):
        EncoderConfig("transformer", dim=300, heads=8)


def test_cnn_handles_sequences_shorter_than_filters():
    enc = make_encoder(EncoderConfig("cnn", dim=8), build_vocabulary("cnn", CORPUS))
    assert enc.encode([x]).shape == (1, 8)


def test_operation_encoder():
    onehot = OperationEncoder("one-hot", 16)
    np.testing.assert_array_equal(encode_operation(onehot, OperationKind.ADDITION), [1, 0, 0, 0, 0, 0])
    rows = {tuple(encode_operation(onehot, t)) for t in OPERATIONS}
    assert len(rows) == 6
    dense = OperationEncoder("dense", 16, seed=3)
    a = encode_operation(dense, OperationKind.INTEGRATION)
    assert a.shape == (16,) and np.array_equal(a, encode_operation(dense, OperationKind.INTEGRATION))
    assert not onehot.parameters() and len(dense.parameters()) == 1


def test_featurize_uses_canonical_latex():
    enc = make_encoder(small_config("lstm"), build_vocabulary("lstm", CORPUS))
    e = simplify(x + y)
    assert enc.featurize(e) == enc.vocab.encode(serialize_latex(e))
