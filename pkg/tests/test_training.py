import math

import numpy as np
import pytest

from latentmath.diffarray import Tensor, backward
from latentmath.diffarray.optim import Adam
from latentmath.encoders import EncoderConfig
from latentmath.evaluation import random_baseline
from latentmath.training import (
    BatchTooSmall,
    ConfigError,
    ModelBundle,
    TrainConfig,
    build_model,
    detect_collapse,
    format_config,
    mnr_from_embeddings,
    mnr_loss,
    parse_config_text,
    select_training_triples,
    train,
    train_config_from,
    typed_config,
)

BAG = EncoderConfig("bag", dim=16)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def ce_oracle(anchor, targets, shift, tau):
    # per-row softmax cross-entropy against the diagonal, in plain numpy
    B = len(anchor)
    total = 0.0
    for i in range(B):
        row = []
        for j in range(B):
            y = targets[j] + (shift[i] if shift is not None else 0)
            row.append(tau * anchor[i] @ y / (np.linalg.norm(anchor[i]) * np.linalg.norm(y)))
        row = np.array(row)
        total += -row[i] + math.log(np.exp(row - row.max()).sum()) + row.max()
    return total / B


def test_mnr_forced_example():
    e = np.eye(2)
    loss = mnr_from_embeddings(T(e), T(e), None, tau=1.0).item()
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_mnr_identical_is_log_b():
    for B in (2, 5, 16):
        v = np.ones((B, 4))
        assert mnr_from_embeddings(T(v), T(v), None, 20.0).item() == pytest.approx(math.log(B), abs=1e-9)


def test_mnr_matches_cross_entropy_oracle():
    rng = np.random.default_rng(0)
    for trial in range(50):
        B, d = rng.integers(2, 9), rng.integers(2, 7)
        a, y = rng.normal(size=(B, d)), rng.normal(size=(B, d))
        shift = rng.normal(size=(B, d)) if trial % 2 else None
        got = mnr_from_embeddings(T(a), T(y), None if shift is None else T(shift), 20.0).item()
        assert got == pytest.approx(ce_oracle(a, y, shift, 20.0), abs=1e-6)


def test_mnr_batch_too_small():
    with pytest.raises(BatchTooSmall):
        mnr_from_embeddings(T(np.ones((1, 3))), T(np.ones((1, 3))), None, 20.0)


def test_mnr_permutation_equivariant_and_bounded():
    rng = np.random.default_rng(1)
    a, y, s = rng.normal(size=(8, 5)), rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    perm = rng.permutation(8)
    base = mnr_from_embeddings(T(a), T(y), T(s), 20.0).item()
    moved = mnr_from_embeddings(T(a[perm]), T(y[perm]), T(s[perm]), 20.0).item()
    assert moved == pytest.approx(base, abs=1e-6)
    assert math.isfinite(base) and base >= -20 + math.log(8) - 20


def test_one_step_decreases_batch_loss(tiny):
    cfg = TrainConfig(paradigm="translation", encoder=BAG, learning_rate=1e-3)
    triples = select_training_triples(tiny.corpus, cfg)[:16]
    model = build_model(cfg, triples)
    args = ([t.premise for t in triples], [t.operation for t in triples], [t.conclusion for t in triples])
    opt = Adam(model.parameters(), lr=1e-3)
    before = mnr_loss(model, *args)
    backward(before)
    opt.step()
    after = mnr_loss(model, *args).item()
    assert after < before.item()


def test_detect_collapse():
    rng = np.random.default_rng(2)
    assert detect_collapse(np.tile(rng.normal(size=16), (40, 1)))
    assert detect_collapse(np.zeros((40, 8)) + 1e-6 * rng.normal(size=(40, 8)) + 3.0)
    for _ in range(100):
        assert not detect_collapse(rng.normal(size=(64, 16)))
    assert not detect_collapse(np.eye(32))
    with pytest.raises(ValueError):
        detect_collapse(np.ones((5, 3)))


def test_zero_epochs_returns_initial_bundle(tiny):
    bundle = train(TrainConfig(epochs=0, encoder=BAG), tiny.corpus, tiny.dev)
    assert bundle.history == [] and bundle.epoch == 0


@pytest.fixture(scope="module")
def short_run(tiny, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainConfig(epochs=2, batch_size=16, encoder=BAG, paradigm="projection-dense", seed=4)
    return cfg, out, train(cfg, tiny.corpus, tiny.dev, out_dir=out)


def test_metric_log_has_one_row_per_epoch(short_run):
    cfg, out, bundle = short_run
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,dev_cross_map,dev_intra_map,avg_map"
    assert len(lines) == 1 + cfg.epochs
    assert [r["epoch"] for r in bundle.history] == [1, 2]
    best = max(bundle.history, key=lambda r: r["avg_map"])
    assert bundle.best_epoch == best["epoch"]


def test_checkpoint_round_trip(short_run, tmp_path):
    _, out, bundle = short_run
    bundle.save(tmp_path / "b.ckpt")
    again = ModelBundle.load(tmp_path / "b.ckpt")
    assert again.config == bundle.config and again.history == bundle.history
    for k, v in bundle.model.state_dict().items():
        assert np.array_equal(v, again.model.state_dict()[k])
    best = ModelBundle.load(out / "best.ckpt")
    for k, v in bundle.model.state_dict().items():
        assert np.array_equal(v, best.model.state_dict()[k])


def test_same_seed_same_metrics(short_run, tiny):
    cfg, out, bundle = short_run
    again = train(cfg, tiny.corpus, tiny.dev)
    assert again.history == bundle.history


def test_resume_continues_epoch_numbering(tiny, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=16, encoder=BAG, seed=5)
    train(cfg, tiny.corpus, tiny.dev, out_dir=tmp_path)
    resumed = ModelBundle.load(tmp_path / "last.ckpt")
    cfg3 = TrainConfig(epochs=3, batch_size=16, encoder=BAG, seed=5)
    resumed.model.config = cfg3
    bundle = train(cfg3, tiny.corpus, tiny.dev, out_dir=tmp_path, resume=resumed)
    assert [r["epoch"] for r in bundle.history] == [1, 2, 3]
    # uninterrupted run reaches the same state
    straight = train(cfg3, tiny.corpus, tiny.dev)
    assert straight.history == bundle.history


def test_training_subsets(tiny):
    cfg = TrainConfig(train_num_vars=2, max_train_premises=5, encoder=BAG)
    triples = select_training_triples(tiny.corpus, cfg)
    assert {t.num_premise_vars for t in triples} == {2}
    assert len({t.premise for t in triples}) <= 5


def test_config_round_trip_and_diagnostics():
    cfg = TrainConfig(epochs=3, paradigm="projection-onehot", encoder=EncoderConfig("cnn", dim=32))
    again = train_config_from(typed_config(parse_config_text(format_config(cfg))))
    assert again == cfg
    with pytest.raises(ConfigError) as info:
        typed_config(parse_config_text("epochs = 3\nbatch_size = many\n"))
    assert info.value.line == 2 and info.value.key == "batch_size"
    with pytest.raises(ConfigError) as info:
        parse_config_text("epochs = 3\njust words\n")
    assert info.value.line == 2
    with pytest.raises(ConfigError) as info:
        typed_config(parse_config_text("# comment\nwarmup = 10\n"))
    assert info.value.line == 2 and info.value.key == "warmup"
    with pytest.raises(ConfigError):
        train_config_from({"batch_size": 1})
    # switching family restores that family's default depth
    gcn = train_config_from({"encoder.family": "gcn"}, base=TrainConfig())
    assert gcn.encoder.layers == 6


@pytest.mark.slow
def test_toy_run_beats_random_on_intra(tiny_dir, tmp_path):
    from latentmath.datagen import GenerationConfig, generate_dataset, load_dataset

    generate_dataset(GenerationConfig(seed=11, num_train=500, num_dev=100, num_test=10, dev_instances=300, multistep_premises=0), tmp_path)
    ds = load_dataset(tmp_path)
    cfg = TrainConfig(epochs=10, encoder=EncoderConfig("lstm", dim=64), paradigm="translation")
    bundle = train(cfg, ds.corpus, ds.dev)
    best = max(r["dev_intra_map"] for r in bundle.history)
    assert best >= random_baseline().map + 20
