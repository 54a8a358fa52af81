"""Command line: generate | train | eval | analyze."""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from dataclasses import fields
from datetime import datetime, timezone
from pathlib import Path

from . import evaluation as ev
from .datagen import DATASET_FILES, GenerationConfig, generate_dataset, load_dataset
from .diffarray import ShapeMismatch
from .diffarray.checkpoint import CheckpointError
from .expr import count_nodes
from .presets import PRESETS
from .training import (
    CollapseDetected,
    ConfigError,
    ModelBundle,
    config_hash,
    format_config,
    parse_config_text,
    train,
    train_config_from,
    typed_config,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_COLLAPSE, EXIT_SHAPE = 0, 2, 3, 4, 5
PROTOCOLS = ("retrieval", "multistep", "lengthgen", "separation", "export2d")

log = logging.getLogger("latentmath")


class OutDirNotEmpty(OSError):
    pass


def load_values(args) -> dict:
    values = typed_config(parse_config_text(PRESETS[args.preset]))
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        values.update(typed_config(parse_config_text(text)))
    if args.seed is not None:
        values["seed"] = args.seed
        values["data.seed"] = args.seed
    return values


def generation_config(values: dict) -> GenerationConfig:
    known = {f.name for f in fields(GenerationConfig)}
    kw = {k[5:]: v for k, v in values.items() if k.startswith("data.") and k[5:] in known}
    try:
        return GenerationConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def prepare_out(path: str, force: bool, allow_existing: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise OutDirNotEmpty(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out: Path, command: str, chash: str, seed: int, inputs: dict, outputs: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "config_hash": chash,
        "seed": seed,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "started": started,
        "finished": _now(),
        "git_describe": git_describe(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = _now()
    values = load_values(args)
    cfg = generation_config(values)
    out = prepare_out(args.out, args.force)
    meta = generate_dataset(cfg, out)
    chash = config_hash(meta["config"])
    write_manifest(out, "generate", chash, cfg.seed, {"config": args.config, "preset": args.preset}, list(DATASET_FILES.values()), started)
    print(json.dumps(meta["counts"], sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    values = load_values(args)
    cfg = train_config_from(values)
    out = prepare_out(args.out, args.force, allow_existing=args.resume)
    resume = None
    if args.resume:
        last = out / "last.ckpt"
        if not last.exists():
            raise FileNotFoundError(f"nothing to resume: {last} is missing")
        resume = ModelBundle.load(last)
        # only the epoch budget may change between the original run and a resume
        if {**resume.config.to_dict(), "epochs": 0} != {**cfg.to_dict(), "epochs": 0}:
            raise ConfigError("resume config differs from the checkpoint's config")
    ds = load_dataset(Path(args.data))
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    bundle = train(cfg, ds.corpus, ds.dev, out_dir=out, resume=resume, progress=lambda r: print(json.dumps(r)))
    bundle.model.vocab.save(out / "vocab.txt")
    write_manifest(
        out, "train", cfg.hash(), cfg.seed, {"data": str(args.data), "config": args.config, "preset": args.preset},
        ["best.ckpt", "last.ckpt", "metrics.csv", "config.txt", "vocab.txt"], started,
    )  # fmt: skip
    return EXIT_OK


def _check_compatible(bundle: ModelBundle, args) -> None:
    if not args.config:
        return
    wanted = train_config_from(load_values(args))
    have = bundle.config
    if wanted.encoder.dim != have.encoder.dim:
        raise ShapeMismatch("checkpoint embedding dim", (have.encoder.dim,), (wanted.encoder.dim,))
    if wanted.encoder.family != have.encoder.family or wanted.paradigm != have.paradigm:
        raise ShapeMismatch(
            f"checkpoint is {have.encoder.family}/{have.paradigm}, config asks {wanted.encoder.family}/{wanted.paradigm}"
        )


def _tag(bundle: ModelBundle) -> dict:
    return {"paradigm": bundle.config.paradigm, "encoder": bundle.config.encoder.family}


def run_protocol(protocol: str, bundle: ModelBundle, ds, split: str, out: Path) -> str:
    model, chash = bundle.model, bundle.config.hash()
    instances = ds.dev if split == "dev" else ds.test
    if protocol == "retrieval":
        rows = [dict(r.row(), split=split, **_tag(bundle)) for r in ev.eval_retrieval(model, instances).values()]
        base = ev.random_baseline()
        rows.append(dict(base.row(), n=0, split=split, paradigm="random", encoder="-"))
        name = "retrieval.csv"
    elif protocol == "multistep":
        rows = [dict(r, **_tag(bundle)) for r in ev.eval_multistep(model, ds.chains)]
        name = "multistep.csv"
    elif protocol == "lengthgen":
        rows = [dict(r.row(), split=split, **_tag(bundle)) for r in ev.eval_length_generalisation(model, instances)]
        name = "lengthgen.csv"
    elif protocol == "separation":
        rows = [dict(mode=r.mode, before=r.before, after=r.after, n=r.n, split=split, **_tag(bundle)) for r in ev.latent_separation(model, instances).values()]
        name = "separation.csv"
    elif protocol == "export2d":
        sample = sorted(instances, key=lambda i: i.instance_id)[:12]
        rows = ev.export_2d(model, sample)
        name = "export2d.csv"
    else:
        raise ConfigError(f"unknown protocol {protocol!r}")
    ev.write_csv(out / name, rows, chash)
    return name


def cmd_eval(args) -> int:
    started = _now()
    bundle = ModelBundle.load(args.checkpoint)
    _check_compatible(bundle, args)
    ds = load_dataset(Path(args.data))
    out = prepare_out(args.out, args.force)
    protocols = PROTOCOLS if args.protocol == "all" else (args.protocol,)
    written = [run_protocol(p, bundle, ds, args.split, out) for p in protocols]
    write_manifest(
        out, f"eval {args.protocol}", bundle.config.hash(), bundle.config.seed,
        {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split}, written, started,
    )  # fmt: skip
    for name in written:
        print(out / name)
    return EXIT_OK


def corpus_stats(ds) -> list[dict]:
    rows = []
    for split in ("train", "dev", "test"):
        triples = ds.split(split)
        by_vars: dict[int, list] = {}
        for tr in triples:
            by_vars.setdefault(tr.num_premise_vars, []).append(tr)
        for k in sorted(by_vars):
            group = by_vars[k]
            rows.append({
                "split": split,
                "num_vars": k,
                "premises": len({tr.premise for tr in group}),
                "triples": len(group),
                "mean_conclusion_nodes": sum(count_nodes(tr.conclusion) for tr in group) / len(group),
            })  # fmt: skip
    return rows


def cmd_analyze(args) -> int:
    started = _now()
    bundle = ModelBundle.load(args.checkpoint)
    _check_compatible(bundle, args)
    ds = load_dataset(Path(args.data))
    out = prepare_out(args.out, args.force)
    written = [run_protocol(p, bundle, ds, args.split, out) for p in ("separation", "export2d")]
    ev.write_csv(out / "corpus_stats.csv", corpus_stats(ds), bundle.config.hash())
    written.append("corpus_stats.csv")
    write_manifest(
        out, "analyze", bundle.config.hash(), bundle.config.seed,
        {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split}, written, started,
    )  # fmt: skip
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentmath", description="Multi-operational expression embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat key = value config file, applied over the preset")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--seed", type=int, help="overrides seed and data.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory written by generate")

    p = sub.add_parser("generate", help="build the synthetic dataset")
    common(p, data=False)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train an encoder + head")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    p.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "run an evaluation protocol"), ("analyze", cmd_analyze, "latent separation, 2-D export and corpus statistics")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("dev", "test"), default="test")
        if name == "eval":
            p.add_argument("--protocol", choices=PROTOCOLS + ("all",), default="retrieval")
        p.set_defaults(fn=fn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CollapseDetected as exc:
        print(f"representational collapse: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    except ShapeMismatch as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (OSError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
