"""Contrastive training with in-batch negatives, model bundles and run configs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import DerivationTriple, EvalInstance
from .diffarray import Tensor, backward, clear_tape, no_grad
from .diffarray import functional as F
from .diffarray.checkpoint import load_tensors, save_tensors
from .diffarray.optim import Adam, clip_grad_norm
from .encoders import EncoderConfig, TokenVocabulary, build_vocabulary, make_encoder
from .encoders.models import ExpressionEncoder
from .evaluation import eval_retrieval
from .expr import Expr
from .heads import PARADIGMS, Paradigm
from .ops import OperationKind

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "dev_cross_map", "dev_intra_map", "avg_map")


class BatchTooSmall(ValueError):
    pass


class CollapseDetected(RuntimeError):
    pass


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key + ': ' if key else ''}{message}")
        self.line, self.key = line, key


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-4
    tau: float = 20.0
    seed: int = 0
    paradigm: str = "translation"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    clip_norm: float = 1.0
    shared_diag: bool = False
    # premises drawn from the training split; 0 keeps all
    max_train_premises: int = 0
    # restrict training premises to this many variables; 0 keeps all
    train_num_vars: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for in-batch negatives")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"unknown paradigm {self.paradigm!r}")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("epochs must be >= 0 and learning_rate > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["filters"] = [list(f) for f in self.encoder.filters]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        enc = dict(d.pop("encoder", {}))
        if "filters" in enc:
            enc["filters"] = tuple(tuple(f) for f in enc["filters"])
        return cls(encoder=EncoderConfig(**enc), **d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class Model:
    """Expression encoder plus paradigm (operation encoder and head)."""

    def __init__(self, config: TrainConfig, vocab: TokenVocabulary):
        self.config = config
        self.vocab = vocab
        self.encoder: ExpressionEncoder = make_encoder(config.encoder, vocab, seed=config.seed)
        self.paradigm = Paradigm(config.paradigm, config.encoder.dim, seed=config.seed, shared_diag=config.shared_diag)

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + self.paradigm.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        out.update({f"paradigm.{k}": v for k, v in self.paradigm.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.encoder.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("encoder.")})
        self.paradigm.load_state_dict({k[9:]: v for k, v in state.items() if k.startswith("paradigm.")})

    def embed(self, exprs: Sequence[Expr], batch: int = 256) -> np.ndarray:
        exprs = list(exprs)
        out = np.zeros((len(exprs), self.encoder.dim), np.float32)
        # length-sorted batches waste less work on padding
        order = sorted(range(len(exprs)), key=lambda i: len(self.encoder.featurize(exprs[i])))
        with no_grad():
            for s in range(0, len(order), batch):
                idx = order[s : s + batch]
                out[idx] = self.encoder.encode([exprs[i] for i in idx]).data
        return out


@dataclass
class ModelBundle:
    model: Model
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    optimizer_state: dict[str, np.ndarray] | None = None

    @property
    def config(self) -> TrainConfig:
        return self.model.config

    def save(self, path: str | os.PathLike) -> None:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        for k, v in (self.optimizer_state or {}).items():
            tensors[f"optim.{k}"] = v
        meta = {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "epoch": self.epoch,
            "best_epoch": self.best_epoch,
            "history": self.history,
            "vocabulary": self.model.vocab.tokens,
        }
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelBundle":
        tensors, meta = load_tensors(path)
        cfg = TrainConfig.from_dict(meta["config"])
        vocab = TokenVocabulary(meta["vocabulary"][2:])
        model = Model(cfg, vocab)
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        optim = {k[6:]: v for k, v in tensors.items() if k.startswith("optim.")} or None
        return cls(model, meta["epoch"], meta["history"], meta.get("best_epoch", 0), optim)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def mnr_from_embeddings(anchor: Tensor, targets: Tensor, shift: Tensor | None, tau: float) -> Tensor:
    """(1/B) sum_i [-S_ii + logsumexp_j S_ij] with S_ij = tau * cos(anchor_i, targets_j + shift_i)."""
    B, d = anchor.shape
    if B < 2:
        raise BatchTooSmall(f"MNR loss needs at least 2 pairs, got {B}")
    if shift is None:
        sims = F.matmul(F.l2_normalize(anchor), F.transpose(F.l2_normalize(targets), (1, 0)))
    else:
        shifted = F.add(F.reshape(targets, (1, B, d)), F.reshape(shift, (B, 1, d)))
        sims = F.cosine_similarity(F.reshape(anchor, (B, 1, d)), shifted)
    S = F.scale(sims, tau)
    diag = F.index(S, (np.arange(B), np.arange(B)))
    return F.scale(F.sum(F.sub(F.logsumexp(S, axis=1), diag)), 1.0 / B)


def mnr_loss(model: Model, premises: Sequence[Expr], ops: Sequence[OperationKind], conclusions: Sequence[Expr]) -> Tensor:
    uniq = list(dict.fromkeys(list(premises) + list(conclusions)))
    pos = {e: i for i, e in enumerate(uniq)}
    emb = model.encoder.encode(uniq)
    e_x = F.index(emb, np.array([pos[e] for e in premises]))
    e_y = F.index(emb, np.array([pos[e] for e in conclusions]))
    anchor = model.paradigm.anchor(e_x, ops)
    return mnr_from_embeddings(anchor, e_y, model.paradigm.target_shift(ops), model.config.tau)


# ---------------------------------------------------------------------------
# Collapse
# ---------------------------------------------------------------------------


def detect_collapse(embeddings: np.ndarray) -> bool:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or len(emb) < 32:
        raise ValueError("collapse detection needs a batch of at least 32 embeddings")
    if (emb.var(axis=0) < 1e-8).all():
        return True
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    unit = emb / np.maximum(norms, 1e-12)
    sims = unit @ unit.T
    n = len(emb)
    mean_off = (sims.sum() - np.trace(sims)) / (n * (n - 1))
    return bool(mean_off > 0.99)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def select_training_triples(corpus: Sequence[DerivationTriple], cfg: TrainConfig) -> list[DerivationTriple]:
    train = [tr for tr in corpus if tr.split == "train"]
    if cfg.train_num_vars:
        train = [tr for tr in train if tr.num_premise_vars == cfg.train_num_vars]
    if cfg.max_train_premises:
        keep = set(list(dict.fromkeys(tr.premise for tr in train))[: cfg.max_train_premises])
        train = [tr for tr in train if tr.premise in keep]
    return train


def build_model(cfg: TrainConfig, triples: Sequence[DerivationTriple]) -> Model:
    exprs = list(dict.fromkeys(e for tr in triples for e in (tr.premise, tr.conclusion)))
    return Model(cfg, build_vocabulary(cfg.encoder.family, exprs))


def write_log(path: str | os.PathLike, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in LOG_COLUMNS[1:]])


def evaluate_dev(model: Model, dev: Sequence[EvalInstance]) -> tuple[float, float]:
    reports = eval_retrieval(model, dev)
    return reports["cross-op"].map, reports["intra-op"].map


def train(
    cfg: TrainConfig,
    corpus: Sequence[DerivationTriple],
    dev: Sequence[EvalInstance],
    out_dir: str | os.PathLike | None = None,
    resume: ModelBundle | None = None,
    progress: Callable[[dict], None] | None = None,
) -> ModelBundle:
    """Train and return the bundle holding the best dev-MAP weights.

    With ``out_dir``, writes ``last.ckpt`` after every epoch, ``best.ckpt``
    whenever the dev average MAP improves, and ``metrics.csv``.
    """
    triples = select_training_triples(corpus, cfg)
    if not triples:
        raise ValueError("no training triples")
    if resume is not None:
        model = resume.model
        history = list(resume.history)
        start = resume.epoch
        best_epoch = resume.best_epoch
    else:
        model = build_model(cfg, triples)
        history, start, best_epoch = [], 0, 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate)
    if resume is not None and resume.optimizer_state:
        opt.load_state_arrays(resume.optimizer_state)

    best_avg = max((r["avg_map"] for r in history), default=-np.inf)
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    if resume is not None and out is not None and (out / "best.ckpt").exists():
        best_state = ModelBundle.load(out / "best.ckpt").model.state_dict()

    probe = list(dict.fromkeys(tr.premise for tr in triples))[:64]
    for epoch in range(start + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(triples))
        losses = []
        for s in range(0, len(order) - 1, cfg.batch_size):
            batch = [triples[i] for i in order[s : s + cfg.batch_size]]
            if len(batch) < 2:
                continue
            opt.zero_grad()
            loss = mnr_loss(model, [b.premise for b in batch], [b.operation for b in batch], [b.conclusion for b in batch])
            if not np.isfinite(loss.item()):
                clear_tape()
                raise CollapseDetected(f"epoch {epoch}: non-finite loss")
            backward(loss)
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            losses.append(loss.item())
        if len(probe) >= 32 and detect_collapse(model.embed(probe)):
            raise CollapseDetected(f"epoch {epoch}: premise embeddings collapsed")
        cross, intra = evaluate_dev(model, dev) if dev else (float("nan"), float("nan"))
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "dev_cross_map": cross,
            "dev_intra_map": intra,
            "avg_map": (cross + intra) / 2,
        }
        history.append(row)
        improved = not np.isnan(row["avg_map"]) and row["avg_map"] > best_avg
        if improved or not dev:
            best_avg = row["avg_map"]
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        logger.info("epoch %d loss %.4f cross %.2f intra %.2f (%.0fs)", epoch, row["loss"], cross, intra, time.perf_counter() - t0)
        if progress:
            progress(row)
        if out is not None:
            bundle = ModelBundle(model, epoch, history, best_epoch, opt.state_arrays())
            bundle.save(out / "last.ckpt")
            if epoch == best_epoch:
                ModelBundle(model, epoch, history, best_epoch).save(out / "best.ckpt")
            write_log(out / "metrics.csv", history)

    model.load_state_dict(best_state)
    final = ModelBundle(model, max(start, cfg.epochs), history, best_epoch)
    if out is not None:
        final.save(out / "best.ckpt")
        write_log(out / "metrics.csv", history)
    return final


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    lines: dict[str, int] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", n)
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", n)
        if key in out:
            raise ConfigError(f"duplicate key (first on line {lines[key]})", n, key)
        out[key], lines[key] = value, n
    out["__lines__"] = json.dumps(lines)
    return out


def _convert(raw: str, typ, key: str, line: int | None):
    try:
        if typ is bool:
            return _BOOL[raw.lower()]
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ == "filters":
            return tuple(tuple(int(x) for x in part.split("x")) for part in raw.split(","))
        if typ == "tuple":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except (KeyError, ValueError):
        raise ConfigError(f"cannot parse {raw!r}", line, key) from None


TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "tau": float,
    "seed": int,
    "paradigm": str,
    "clip_norm": float,
    "shared_diag": bool,
    "max_train_premises": int,
    "train_num_vars": int,
    "encoder.family": str,
    "encoder.dim": int,
    "encoder.layers": int,
    "encoder.heads": int,
    "encoder.filters": "filters",
    "encoder.ff_mult": int,
}

DATA_KEYS = {
    "data.seed": int,
    "data.num_train": int,
    "data.num_dev": int,
    "data.num_test": int,
    "data.min_vars": int,
    "data.max_vars": int,
    "data.construction_steps": int,
    "data.operator_pool": "tuple",
    "data.vocabulary": "tuple",
    "data.p_r": float,
    "data.p_e": float,
    "data.v_size": int,
    "data.dev_instances": int,
    "data.test_instances": int,
    "data.multistep_premises": int,
    "data.max_steps": int,
    "data.max_nodes": int,
}


def typed_config(raw: dict[str, str]) -> dict:
    lines = json.loads(raw.get("__lines__", "{}"))
    out = {}
    for key, value in raw.items():
        if key == "__lines__":
            continue
        typ = TRAIN_KEYS.get(key) or DATA_KEYS.get(key)
        if typ is None:
            raise ConfigError("unknown key", lines.get(key), key)
        out[key] = _convert(value, typ, key, lines.get(key))
    return out


def train_config_from(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    d = base.to_dict()
    if "encoder.family" in values and "encoder.layers" not in values:
        d["encoder"]["layers"] = None  # family default
    for key, value in values.items():
        if key.startswith("encoder."):
            d["encoder"][key[8:]] = value
        elif key in TRAIN_KEYS:
            d[key] = value
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for f in fields(TrainConfig):
        if f.name == "encoder":
            for k, v in d["encoder"].items():
                if k == "filters":
                    v = ",".join(f"{w}x{c}" for w, c in v)
                lines.append(f"encoder.{k} = {v}")
        else:
            v = d[f.name]
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
