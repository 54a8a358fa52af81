"""End-to-end acceptance checks, one test per criterion.

Each test records PASS or FAIL together with the measured numbers; the
session summary prints one line per criterion. The training criteria share
desk-scale runs through session fixtures.
"""

import filecmp
import hashlib
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

import test_diffarray as diffarray_suite
import test_evaluation as evaluation_suite
import test_ops as ops_suite
from latentmath import evaluation as ev
from latentmath.cli import main
from latentmath.datagen import DATASET_FILES, load_dataset
from latentmath.encoders import EncoderConfig
from latentmath.expr import Symbol, cos, log, serialize_functional, serialize_latex
from latentmath.ops import OperationKind, enumerate_conclusions, integrate
from latentmath.training import ModelBundle, TrainConfig, build_model, select_training_triples

RESULTS: dict[int, tuple[str, str, str]] = {}
SEEDS = (0, 1, 2)
MULTISTEP_RANDOM = 100 / 5  # one positive among five candidates


@contextmanager
def criterion(n, title, detail):
    """Record the outcome; ``detail`` is a dict the body fills with measurements."""
    try:
        yield
    except BaseException:
        RESULTS[n] = ("FAIL", title, _fmt(detail))
        raise
    RESULTS[n] = ("PASS", title, _fmt(detail))


def _fmt(detail):
    return ", ".join(f"{k}={v:.2f}" if isinstance(v, float) else f"{k}={v}" for k, v in detail.items())


# ---------------------------------------------------------------------------
# Shared desk-scale artefacts
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk") / "data"
    assert main(["generate", "--preset", "desk", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def desk(desk_data):
    return load_dataset(desk_data)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory, desk_data):
    """Trains lazily: ``get(paradigm, seed)`` returns (bundle, training seconds)."""
    root = tmp_path_factory.mktemp("desk-runs")
    cache = {}

    def get(paradigm, seed):
        if (paradigm, seed) not in cache:
            cfg = root / f"{paradigm}.cfg"
            cfg.write_text(f"paradigm = {paradigm}\n")
            out = root / f"{paradigm}-{seed}"
            start = time.perf_counter()
            code = main(["train", "--preset", "desk", "--config", str(cfg), "--seed", str(seed),
                         "--data", str(desk_data), "--out", str(out)])  # fmt: skip
            elapsed = time.perf_counter() - start
            assert code == 0
            cache[paradigm, seed] = (ModelBundle.load(out / "best.ckpt"), elapsed)
        return cache[paradigm, seed]

    return get


def untrained(desk, family, paradigm):
    cfg = TrainConfig(paradigm=paradigm, encoder=EncoderConfig(family, dim=64), seed=0)
    return build_model(cfg, select_training_triples(desk.corpus, cfg))


class InformationFree:
    """Embeds every expression as an independent Gaussian vector keyed by its text."""

    def __init__(self, paradigm_model, dim=64):
        self.paradigm = paradigm_model.paradigm
        self.dim = dim

    def embed(self, exprs):
        out = []
        for e in exprs:
            digest = hashlib.sha256(serialize_functional(e).encode()).digest()
            out.append(np.random.default_rng(int.from_bytes(digest[:8], "little")).normal(size=self.dim))
        return np.asarray(out, np.float32)


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------


def test_criterion_01_symbolic_soundness():
    detail = {}
    with criterion(1, "symbolic soundness", detail):
        start = time.perf_counter()
        ops_suite.test_derivative_soundness_random()
        ops_suite.test_integration_inverse()
        detail["seconds"] = time.perf_counter() - start
        assert detail["seconds"] < 60


def test_criterion_02_worked_examples():
    detail = {}
    with criterion(2, "worked-example fidelity", detail):
        u, z, o, x = (Symbol(n) for n in "uzox")
        premise = u + cos(log(-z + o))
        y_add = [serialize_latex(e) for e in enumerate_conclusions(premise, OperationKind.ADDITION, ["z", "u"]).results]
        y_diff = [serialize_latex(e) for e in enumerate_conclusions(premise, OperationKind.DIFFERENTIATION, ["z", "u"]).results]
        assert y_add == [r"z + u + \cos{(\log{(- z + o)})}", r"2 u + \cos{(\log{(- z + o)})}"]
        assert y_diff == [r"\frac{\sin{(\log{(- z + o)})}}{- z + o}", "1"]
        integral = integrate(u + cos(log(-x + o)), "r")
        assert serialize_latex(integral) == r"u r + r \cos{(\log{(- x + o)})}"
        detail["examples"] = len(y_add) + len(y_diff) + 1


def test_criterion_03_autodiff():
    detail = {}
    with criterion(3, "autodiff finite-difference checks", detail):
        start = time.perf_counter()
        for name in diffarray_suite.PRIMITIVES:
            diffarray_suite.test_gradients_match_finite_differences(name)
        detail["primitives"] = len(diffarray_suite.PRIMITIVES)
        detail["seconds"] = time.perf_counter() - start
        assert detail["seconds"] < 120


def test_criterion_04_metric_oracles():
    detail = {}
    with criterion(4, "metric oracles", detail):
        evaluation_suite.test_ap_examples()
        evaluation_suite.test_ap_and_hits_match_brute_force()
        evaluation_suite.test_hit_at_k_truth_table()
        evaluation_suite.test_random_baseline_matches_exact_expectation()
        detail["random_map"] = ev.random_baseline().map


@pytest.mark.slow
def test_criterion_05_cross_op_zero(desk, desk_runs):
    detail = {}
    with criterion(5, "cross-op separation before the head is zero", detail):
        worst = 0.0
        models = [untrained(desk, fam, par) for fam, par in (("lstm", "translation"), ("gcn", "projection-dense"))]
        models.append(desk_runs("translation", 0)[0].model)
        for model in models:
            for split in (desk.dev, desk.test):
                worst = max(worst, abs(ev.latent_separation(model, split)["cross-op"].before))
        detail["max_abs_before"] = f"{worst:.1e}"
        assert worst <= 1e-10


def test_criterion_06_random_calibration(desk):
    detail = {}
    with criterion(6, "untrained models sit at the random baseline", detail):
        base = ev.random_baseline().map
        # harness calibration: an encoder with no information about expressions
        blind = InformationFree(untrained(desk, "bag", "translation"))
        blind_ret = ev.eval_retrieval(blind, desk.dev)
        blind_ms = ev.eval_multistep(blind, desk.chains)
        detail["blind_cross"] = blind_ret["cross-op"].map
        detail["blind_intra"] = blind_ret["intra-op"].map
        detail["blind_multistep_worst"] = max(abs(r["hit1"] - MULTISTEP_RANDOM) for r in blind_ms)
        gaps = {}
        for fam, par in (("lstm", "translation"), ("lstm", "projection-dense"), ("gcn", "translation")):
            rep = ev.eval_retrieval(untrained(desk, fam, par), desk.dev)
            for mode, r in rep.items():
                gaps[f"{fam}/{par}/{mode}"] = r.map - base
        worst_key = max(gaps, key=lambda k: abs(gaps[k]))
        detail["worst_untrained"] = f"{worst_key}:{gaps[worst_key]:+.2f}"
        assert abs(detail["blind_cross"] - base) <= 3 and abs(detail["blind_intra"] - base) <= 3
        assert detail["blind_multistep_worst"] <= 3
        assert all(abs(g) <= 3 for g in gaps.values()), {k: round(g, 2) for k, g in gaps.items()}


@pytest.mark.slow
def test_criterion_07_learning_signal(desk_runs):
    detail = {}
    with criterion(7, "desk run beats random by 20 MAP on both modes", detail):
        bundle, seconds = desk_runs("translation", 0)
        best = next(r for r in bundle.history if r["epoch"] == bundle.best_epoch)
        base = ev.random_baseline().map
        detail.update(cross=best["dev_cross_map"], intra=best["dev_intra_map"], random=base, minutes=seconds / 60)
        assert best["dev_cross_map"] >= base + 20
        assert best["dev_intra_map"] >= base + 20
        assert seconds < 30 * 60


@pytest.mark.slow
def test_criterion_08_paradigm_trend(desk, desk_runs):
    detail = {}
    with criterion(8, "translation beats dense projection on cross-op", detail):
        wins = 0
        for seed in SEEDS:
            tr = ev.eval_retrieval(desk_runs("translation", seed)[0].model, desk.test)["cross-op"].map
            pr = ev.eval_retrieval(desk_runs("projection-dense", seed)[0].model, desk.test)["cross-op"].map
            detail[f"seed{seed}"] = f"{tr:.2f}/{pr:.2f}"
            wins += tr > pr
        detail["wins"] = wins
        assert wins >= 2


@pytest.mark.slow
def test_criterion_09_multistep_shape(desk, desk_runs):
    detail = {}
    with criterion(9, "multi-step Hit@1 degrades gracefully", detail):
        rows = ev.eval_multistep(desk_runs("translation", 0)[0].model, desk.chains)
        hits = [r["hit1"] for r in rows]
        detail["hit1"] = "/".join(f"{h:.1f}" for h in hits)
        assert len(hits) == 6
        for k in range(1, len(hits)):
            assert hits[k] <= min(hits[:k]) + 5
        assert hits[2] >= MULTISTEP_RANDOM + 10


TINY_CONFIG = """\
data.num_train = 40
data.num_dev = 30
data.num_test = 30
data.dev_instances = 30
data.test_instances = 30
data.multistep_premises = 12
epochs = 2
batch_size = 16
encoder.family = gcn
encoder.dim = 16
"""


def _run_all(root: Path, cfg: Path):
    data, run, evals, an = root / "data", root / "run", root / "eval", root / "analyze"
    assert main(["generate", "--config", str(cfg), "--seed", "5", "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg), "--seed", "5", "--data", str(data), "--out", str(run)]) == 0
    common = ["--config", str(cfg), "--seed", "5", "--data", str(data), "--checkpoint", str(run / "best.ckpt")]
    assert main(["eval", *common, "--protocol", "all", "--out", str(evals)]) == 0
    assert main(["analyze", *common, "--out", str(an)]) == 0
    files = [data / n for n in DATASET_FILES.values()]
    files += [run / "metrics.csv", run / "config.txt", run / "vocab.txt"]
    files += sorted(evals.glob("*.csv")) + sorted(an.glob("*.csv"))
    return [f.relative_to(root) for f in files]


def test_criterion_10_determinism(tmp_path):
    detail = {}
    with criterion(10, "repeated commands give byte-identical outputs", detail):
        cfg = tmp_path / "tiny.cfg"
        cfg.write_text(TINY_CONFIG)
        first = _run_all(tmp_path / "a", cfg)
        second = _run_all(tmp_path / "b", cfg)
        assert first == second
        same = [filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False) for f in first]
        detail["files"] = len(first)
        detail["identical"] = sum(same)
        assert all(same)
        hashes = {json.loads((tmp_path / "a" / d / "manifest.json").read_text())["config_hash"] for d in ("run", "eval")}
        assert len(hashes) == 1
