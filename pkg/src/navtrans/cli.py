"""navtrans command line: generate-corpus, train, evaluate, translate,
validate-plan, ablate.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence


from . import __version__
from .corpus import SPLITS, CorpusConfig, CorpusError, build_corpus, load_corpus, save_corpus
from .graph import GraphError, NoSuchEdge, parse_graph, validate_plan
from .grammar import tokenize
from .metrics import KS, MetricsReport, format_table
from .training import NumericalError, TrainConfig, evaluate, load_checkpoint, train

log = logging.getLogger("navtrans")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


@dataclasses.dataclass
class AblateConfig:
    seeds: int = 3
    variants: list[int] = dataclasses.field(default_factory=lambda: [1, 4])


# ---------------------------------------------------------------- config


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_list(text: str, kind) -> list:
    return [kind(x) for x in text.split(",") if x.strip()]


def add_config_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    """One optional flag per dataclass field, named after the field."""
    for f in dataclasses.fields(cls):
        if f.name in skip or _flag(f.name) in parser._option_string_actions:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            kind = lambda s: s.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kind = int
        elif isinstance(default, float):
            kind = float
        elif isinstance(default, (list, tuple)):
            inner = type(default[0]) if default else str
            kind = lambda s, inner=inner: _parse_list(s, inner)
        else:
            kind = str
        parser.add_argument(_flag(f.name), dest=f"{cls.__name__}.{f.name}", type=kind, default=None)


def _overrides(args: argparse.Namespace, cls) -> dict:
    prefix = cls.__name__ + "."
    return {k[len(prefix) :]: v for k, v in vars(args).items() if k.startswith(prefix) and v is not None}


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: line {err.lineno}: {err.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    unknown = set(doc) - {"corpus", "train", "ablate"}
    if unknown:
        raise UsageError(f"{path}: unknown sections {sorted(unknown)}")
    return doc


def resolve(cls, doc: dict, section: str, args: argparse.Namespace, **forced):
    merged = dict(doc.get(section, {}))
    merged.update(_overrides(args, cls))
    merged.update({k: v for k, v in forced.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(merged) - names
    if unknown:
        raise UsageError(f"unknown {section} config fields: {sorted(unknown)}")
    try:
        return cls(**merged)
    except TypeError as err:
        raise UsageError(f"bad {section} config: {err}") from None


def canonical_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()


def dir_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed, outputs: Sequence[str], corpus_dir: Path | None = None) -> None:
    manifest = {
        "command": command,
        "code_version": __version__,
        "config": config,
        "config_hash": canonical_hash(config),
        "corpus_hash": dir_hash(corpus_dir) if corpus_dir is not None else None,
        "seed": seed,
        "outputs": sorted(outputs),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_corpus_dir(path: str) -> tuple[Path, Any]:
    root = Path(path)
    if not (root / "corpus.jsonl").is_file():
        raise UsageError(f"no corpus found at {root}")
    return root, load_corpus(root)


# ---------------------------------------------------------------- commands


def cmd_generate_corpus(args) -> int:
    doc = read_config(args.config)
    cfg = resolve(CorpusConfig, doc, "corpus", args)
    out = Path(args.out)
    corpus = build_corpus(cfg)
    save_corpus(corpus, out)
    write_manifest(out, "generate-corpus", cfg.to_dict(), cfg.seed, ["corpus.jsonl", "graphs/", "corpus_config.json"])
    counts = {k: len(v) for k, v in corpus.splits.items()}
    print(json.dumps({"out": str(out), "maps": len(corpus.graphs), "samples": counts}))
    return EXIT_OK


def _train_config(args, doc) -> TrainConfig:
    cfg = resolve(
        TrainConfig, doc, "train", args, seed=args.seed, heads=args.heads, epochs=args.epochs, batch_size=args.batch_size
    )
    try:
        cfg.validate()
    except ValueError as err:
        raise UsageError(str(err)) from None
    return cfg


def cmd_train(args) -> int:
    doc = read_config(args.config)
    cfg = _train_config(args, doc)
    corpus_arg = args.corpus or cfg.corpus_path
    if corpus_arg is None:
        raise UsageError("train needs --corpus")
    root, corpus = _load_corpus_dir(corpus_arg)
    cfg.corpus_path = str(root)
    out = Path(args.out)
    result = train(cfg, corpus, out)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, ["checkpoint.nvts", "epochs.jsonl", "train_config.json"], root)
    last = result.log[-1]
    print(json.dumps({"checkpoint": str(result.checkpoint), "epochs": len(result.log), "train_loss": last["train_loss"]}))
    return EXIT_OK


def report_payload(split: str, report: MetricsReport) -> dict:
    return {"split": split, **report.to_dict()}


def cmd_evaluate(args) -> int:
    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}; choose from {', '.join(SPLITS)}")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    root, corpus = _load_corpus_dir(args.corpus)
    model, meta = load_checkpoint(ckpt)
    samples = corpus.splits[args.split]
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    max_len = meta["config"].get("max_decode_len", 16)
    report, records = evaluate(model, corpus.graphs, samples, max_len)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report_payload(args.split, report), indent=2) + "\n")
    (out / "report.txt").write_text(format_table([(args.split, report)]))
    with open(out / "records.jsonl", "w") as fh:
        for s, rec in zip(samples, records):
            row = {"graph_id": s.graph_id, "start": s.start, "goal": s.goal, **rec.to_dict()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    write_manifest(
        out,
        "evaluate",
        {"checkpoint": str(ckpt), "split": args.split, "train": meta["config"]},
        meta["config"].get("seed"),
        ["report.json", "report.txt", "records.jsonl"],
        root,
    )
    sys.stdout.write(format_table([(args.split, report)]))
    return EXIT_OK


def cmd_translate(args) -> int:
    words = tokenize(args.instruction or "")
    if not words:
        raise UsageError("instruction is empty")
    graph_path = Path(args.graph)
    if not graph_path.is_file():
        raise UsageError(f"graph file {graph_path} not found")
    graph = parse_graph(graph_path.read_text())
    if args.start not in graph.node_index:
        raise UsageError(f"unknown start node {args.start!r}")
    model, meta = load_checkpoint(args.checkpoint)
    from .corpus import Sample

    sample = Sample(tuple(words), "_", args.start, args.start, ())
    batch = model.make_batch([sample], {"_": graph}, with_targets=False)
    res = model.predict(batch, meta["config"].get("max_decode_len", 16))
    plan = model.plan_names(res.plans[0])
    out = {"plan": plan, "truncated": res.truncated[0]}
    try:
        out["reached"] = validate_plan(graph, args.start, plan)
        out["valid"] = True
    except NoSuchEdge as err:
        out.update(valid=False, failed_step=err.step, error=str(err))
    print(" ".join(plan))
    print(json.dumps(out))
    return EXIT_OK


def cmd_validate_plan(args) -> int:
    graph_path = Path(args.graph)
    if not graph_path.is_file():
        raise UsageError(f"graph file {graph_path} not found")
    graph = parse_graph(graph_path.read_text())
    plan = [b for b in args.plan.replace(",", " ").split() if b]
    try:
        end = validate_plan(graph, args.start, plan)
    except NoSuchEdge as err:
        print(json.dumps({"valid": False, "failed_step": err.step, "error": str(err)}))
        return EXIT_INPUT
    print(json.dumps({"valid": True, "reached": end}))
    return EXIT_OK


# ---------------------------------------------------------------- ablation


def _mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    k = len(reports)
    return MetricsReport(
        f1=sum(r.f1 for r in reports) / k,
        m_at={m: sum(r.m_at[m] for r in reports) / k for m in KS},
        ed=sum(r.ed for r in reports) / k,
        n=sum(r.n for r in reports),
    )


def run_ablation(cfg: TrainConfig, corpus, abl: AblateConfig, out: Path | None = None) -> dict:
    """Train every head-count variant over ``abl.seeds`` seeds and score both
    test splits.  Seeds are ``cfg.seed, cfg.seed + 1, ...``."""
    runs = []
    for heads in abl.variants:
        for k in range(abl.seeds):
            run_cfg = dataclasses.replace(cfg, heads=heads, seed=cfg.seed + k)
            run_cfg.validate()
            run_dir = out / f"heads{heads}_seed{run_cfg.seed}" if out is not None else None
            result = train(run_cfg, corpus, run_dir)
            scores = {}
            for split in ("test_repeated", "test_new"):
                if corpus.splits[split]:
                    rep, _ = evaluate(result.model, corpus.graphs, corpus.splits[split], run_cfg.max_decode_len)
                    scores[split] = rep
            runs.append({"heads": heads, "seed": run_cfg.seed, "scores": scores, "final_loss": result.log[-1]["train_loss"]})
            log.info("ablation heads=%d seed=%d done", heads, run_cfg.seed)

    rows = []
    for heads in abl.variants:
        for split in ("test_repeated", "test_new"):
            reps = [r["scores"][split] for r in runs if r["heads"] == heads and split in r["scores"]]
            if reps:
                rows.append({"heads": heads, "split": split, "mean": _mean_report(reps), "runs": reps})
    def m0(heads):
        return next((r["mean"].m_at[0] for r in rows if r["heads"] == heads and r["split"] == "test_new"), None)

    single, multi = min(abl.variants), max(abl.variants)
    delta = None if m0(single) is None or m0(multi) is None else m0(multi) - m0(single)
    return {
        "runs": runs,
        "rows": rows,
        "single_heads": single,
        "multi_heads": multi,
        "test_new_m0_single": m0(single),
        "test_new_m0_multi": m0(multi),
        "test_new_m0_delta": delta,
        "expected_direction_holds": None if delta is None else delta >= 0,
    }


def ablation_payload(result: dict) -> dict:
    return {
        "rows": [
            {"heads": r["heads"], "split": r["split"], **r["mean"].to_dict(), "per_seed": [x.to_dict() for x in r["runs"]]}
            for r in result["rows"]
        ],
        "runs": [
            {"heads": r["heads"], "seed": r["seed"], "final_loss": r["final_loss"],
             "scores": {k: v.to_dict() for k, v in r["scores"].items()}}
            for r in result["runs"]
        ],
        "test_new_m0": {
            "single": result["test_new_m0_single"],
            "multi": result["test_new_m0_multi"],
            "delta_multi_minus_single": result["test_new_m0_delta"],
        },
        "expected_direction_holds": result["expected_direction_holds"],
    }


def ablation_table(result: dict) -> str:
    text = format_table([(f"heads={r['heads']} {r['split']}", r["mean"]) for r in result["rows"]], label="variant")
    d = result["test_new_m0_delta"]
    if d is not None:
        text += (
            f"\nTest-New M@0: heads={result['multi_heads']} {result['test_new_m0_multi']:.2f} vs "
            f"heads={result['single_heads']} {result['test_new_m0_single']:.2f} (delta {d:+.2f})\n"
        )
        if d < 0:
            text += "WARNING: multi-head did not beat single-head on Test-New in this run\n"
    return text


def cmd_ablate(args) -> int:
    doc = read_config(args.config)
    cfg = _train_config(args, doc)
    abl = resolve(AblateConfig, doc, "ablate", args)
    if not abl.variants or abl.seeds < 1:
        raise UsageError("ablate needs at least one variant and one seed")
    corpus_arg = args.corpus or cfg.corpus_path
    if corpus_arg is None:
        raise UsageError("ablate needs --corpus")
    root, corpus = _load_corpus_dir(corpus_arg)
    cfg.corpus_path = str(root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_ablation(cfg, corpus, abl, out)
    (out / "ablation.json").write_text(json.dumps(ablation_payload(result), indent=2, sort_keys=True) + "\n")
    table = ablation_table(result)
    (out / "ablation.txt").write_text(table)
    config = {"train": cfg.to_dict(), "ablate": dataclasses.asdict(abl)}
    write_manifest(out, "ablate", config, cfg.seed, ["ablation.json", "ablation.txt"], root)
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="navtrans", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-corpus", help="build synthetic maps and instruction splits")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    add_config_flags(g, CorpusConfig)
    g.set_defaults(func=cmd_generate_corpus)

    def train_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--corpus")
        sp.add_argument("--out", required=True)
        for name, kind in (("--seed", int), ("--heads", int), ("--epochs", int), ("--batch-size", int)):
            sp.add_argument(name, type=kind)
        add_config_flags(sp, TrainConfig, skip=("seed", "heads", "epochs", "batch_size"))

    t = sub.add_parser("train", help="train a translator")
    train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    tr = sub.add_parser("translate", help="translate one instruction on a graph")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--graph", required=True)
    tr.add_argument("--start", required=True)
    tr.add_argument("--instruction", required=True)
    tr.set_defaults(func=cmd_translate)

    v = sub.add_parser("validate-plan", help="execute a plan on a graph")
    v.add_argument("--graph", required=True)
    v.add_argument("--start", required=True)
    v.add_argument("--plan", required=True, help="behaviors separated by spaces or commas")
    v.set_defaults(func=cmd_validate_plan)

    a = sub.add_parser("ablate", help="single-head vs multi-head comparison")
    train_flags(a)
    add_config_flags(a, AblateConfig)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"navtrans: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CorpusError, GraphError, ValueError, KeyError, FileNotFoundError) as err:
        print(f"navtrans: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
