"""Command-line entry point.

Subcommands::

    langadapt generate    --config spec.yaml --seed 0 --out data/
    langadapt baseline    --source a.csv [b.csv ...] [--folds K --test-speakers N]
    langadapt cross       --source a.csv [b.csv ...] --target t.csv
    langadapt multi       --source a.csv b.csv c.csv [d.csv] [--target d.csv]
    langadapt adapt-trace --source a.csv --target t.csv
    langadapt replay      out/manifest.json --out replay/

Experiment commands write ``report.csv`` (long format, one row per fold
plus a pooled row per condition), ``comparison.csv`` (one row per
source/target pair, one column per condition), ``report.txt`` and
``manifest.json``.  The manifest holds the fully resolved configuration,
the derived seeds and the sha256 of every input and output, which is
enough for ``replay`` to rebuild the report byte for byte.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .corpus import Corpus, load_corpus, write_corpus
from .errors import DataError, LangAdaptError, NumericalError, SpecError, UsageError
from .evaluation import (
    ALL_CONDITIONS,
    EvalReport,
    ExperimentConfig,
    adaptation_trace,
    derive_rng,
    derive_seed,
    parse_conditions,
    run_baseline,
    run_cross_lingual,
    run_multilingual,
)
from .synthetic import generate_synthetic_corpus, load_synthetic_specs

REPORT_COLUMNS = [
    "experiment", "source", "target", "condition", "fold", "uar",
    "recall_negative", "recall_positive", "tn", "fp", "fn", "tp", "n_test_utterances", "fold_scheme",
]


class ReplayMismatchError(NumericalError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- small helpers -------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_text(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode("utf-8")
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def load_experiment_config(path) -> dict:
    """Read a YAML experiment config; unknown keys are reported with their line."""
    path = Path(path)
    if not path.is_file():
        raise SpecError("no such config file", path)
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SpecError(f"invalid YAML: {getattr(exc, 'problem', exc)}", path,
                        mark.line + 1 if mark else None) from None
    if not isinstance(data, dict):
        raise SpecError("config must be a mapping", path, 1)
    known = set(ExperimentConfig().to_dict())
    for key_node, _ in (node.value if node is not None else []):
        if key_node.value not in known:
            raise SpecError(f"unknown config key {key_node.value!r}", path, key_node.start_mark.line + 1)
    try:
        ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise SpecError(f"bad config: {exc}", path) from None
    return data


def resolve_config(args) -> dict:
    """Defaults < config file < flags; returns the fully resolved dict."""
    d = load_experiment_config(args.config) if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.epochs is not None:
        d["autoencoder"] = {**(d.get("autoencoder") or {}), "epochs": args.epochs}
        d["adapt"] = {**(d.get("adapt") or {}), "epochs": args.epochs}
    if args.latent_dim is not None:
        d["latent_dim"] = args.latent_dim
    if getattr(args, "folds", None) is not None:
        d["folds"] = args.folds
    if getattr(args, "test_speakers", None) is not None:
        d["test_speakers"] = args.test_speakers
    try:
        return ExperimentConfig.from_dict(d).to_dict()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid settings: {exc}") from None


def _input_record(path, corpus: Corpus) -> dict:
    return {"path": str(Path(path).resolve()), "sha256": sha256_file(path),
            "corpus_id": corpus.id, "fingerprint": corpus.fingerprint()}


def _load_all(paths) -> list[tuple[str, Corpus]]:
    return [(p, load_corpus(p)) for p in paths]


# -- report serialisation -------------------------------------------------------------------------

def report_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        head = [r.experiment, r.source, r.target, r.condition.value]
        for k, u in enumerate(r.fold_uars):
            w.writerow(head + [k, _fmt(float(u))] + [""] * 6 + ["", r.fold_scheme])
        rec = r.per_class_recall
        (tn, fp), (fn, tp) = r.confusion
        w.writerow(head + ["pooled", _fmt(r.mean_uar), _fmt(rec["negative"]), _fmt(rec["positive"]),
                           tn, fp, fn, tp, r.n_test_utterances, r.fold_scheme])
    return buf.getvalue()


def _pairs(reports: list[EvalReport]):
    rows: dict[tuple, dict] = {}
    for r in reports:
        rows.setdefault((r.experiment, r.source, r.target), {})[r.condition.value] = r.mean_uar
    return rows


def comparison_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [c.value for c in ALL_CONDITIONS]
    w.writerow(["experiment", "source", "target"] + names)
    for key, vals in _pairs(reports).items():
        w.writerow(list(key) + [_fmt(vals.get(n)) for n in names])
    return buf.getvalue()


def report_table(reports: list[EvalReport]) -> str:
    """UAR (%) with one row per source/target pair, in the layout of the published tables."""
    names = [c.value for c in ALL_CONDITIONS]
    rows = [["experiment", "source", "target"] + names]
    for key, vals in _pairs(reports).items():
        rows.append(list(key) + [f"{100 * vals[n]:.1f}" if n in vals else "-" for n in names])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(wd) if i < 3 else c.rjust(wd) for i, (c, wd) in enumerate(zip(r, widths))).rstrip()
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _derived_seeds(seed: int) -> dict:
    return {name: derive_seed(seed, name) for name in ("ae-init", "ae-train", "adapt", "folds", "svm")}


def _finish(out: Path, manifest: dict, files: dict[str, str], primary: str) -> dict:
    """Write output files, then the manifest naming their hashes."""
    out.mkdir(parents=True, exist_ok=True)
    manifest["outputs"] = {name: _write_text(out / name, text) for name, text in sorted(files.items())}
    manifest["primary_output"] = primary
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _manifest(command: str, cfg: dict, condition: str | None, inputs: dict) -> dict:
    return {"tool": "langadapt", "version": __version__, "command": command, "condition": condition,
            "seed": cfg["seed"], "derived_seeds": _derived_seeds(cfg["seed"]), "config": cfg, "inputs": inputs}


def _history_files(reports: list[EvalReport]) -> dict[str, str]:
    files = {}
    for r in reports:
        h = r.diagnostics.get("adaptation")
        if h is not None:
            files[f"adapt_{_safe(r.source)}__{_safe(r.target)}.csv"] = h.to_csv()
    return files


def _experiment_outputs(reports: list[EvalReport]) -> dict[str, str]:
    return {"report.csv": report_csv(reports), "comparison.csv": comparison_csv(reports),
            "report.txt": report_table(reports), **_history_files(reports)}


# -- experiment runners (shared by the subcommands and replay) ---------------------------------------

def _run_baseline(cfg: dict, condition: str, sources) -> list[EvalReport]:
    reports = []
    for _, corpus in sources:
        for cond in parse_conditions(condition):
            reports.append(run_baseline(corpus, ExperimentConfig.from_dict(cfg), cond))
    return reports


def _run_cross(cfg: dict, condition: str, sources, target) -> list[EvalReport]:
    reports = []
    for _, corpus in sources:
        reports += run_cross_lingual(corpus, target[1], condition, ExperimentConfig.from_dict(cfg))
    return reports


def _run_multi(cfg: dict, condition: str, sources, target) -> list[EvalReport]:
    corpora = [c for _, c in sources] + ([target[1]] if target else [])
    ids = [c.id for c in corpora]
    if len(set(ids)) != len(ids):
        raise DataError(f"corpus ids must be distinct for a multilingual run, got {ids}")
    if len(corpora) < 2:
        raise UsageError("multi needs at least two corpora")
    held_out = [target[1].id] if target else ids
    reports = []
    for h in held_out:
        reports += run_multilingual(corpora, h, condition, ExperimentConfig.from_dict(cfg))
    return reports


def _execute(command: str, cfg: dict, condition, sources, target) -> tuple[dict[str, str], str]:
    if command == "baseline":
        return _experiment_outputs(_run_baseline(cfg, condition, sources)), "report.csv"
    if command == "cross":
        return _experiment_outputs(_run_cross(cfg, condition, sources, target)), "report.csv"
    if command == "multi":
        return _experiment_outputs(_run_multi(cfg, condition, sources, target)), "report.csv"
    if command == "adapt-trace":
        history = adaptation_trace(sources[0][1], target[1], ExperimentConfig.from_dict(cfg))
        return {"adapt_history.csv": history.to_csv()}, "adapt_history.csv"
    raise UsageError(f"unknown command {command!r}")


# -- subcommands --------------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    specs = load_synthetic_specs(args.config)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    files = {}
    for spec in specs:
        corpus = generate_synthetic_corpus(spec, derive_rng(seed, "generate", spec.corpus_id))
        name = f"{_safe(corpus.id)}.csv"
        out.mkdir(parents=True, exist_ok=True)
        write_corpus(corpus, out / name)
        files[name] = {"sha256": sha256_file(out / name), "utterances": len(corpus),
                       "segments": corpus.n_segments(), "speakers": len(corpus.speakers())}
        print(f"{out / name}: {len(corpus)} utterances, {corpus.n_segments()} segments")
    manifest = {"tool": "langadapt", "version": __version__, "command": "generate", "seed": seed,
                "inputs": {"spec": {"path": str(Path(args.config).resolve()), "sha256": sha256_file(args.config)}},
                "outputs": {k: v["sha256"] for k, v in files.items()}, "corpora": files}
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_experiment(args) -> int:
    command = args.command
    cfg = resolve_config(args)
    sources = _load_all(args.source)
    target = None
    if args.target is not None:
        target = (args.target, load_corpus(args.target))
    if command in ("cross", "adapt-trace") and target is None:
        raise UsageError(f"{command} needs --target")
    if command == "adapt-trace" and len(sources) != 1:
        raise UsageError("adapt-trace takes exactly one --source")
    if command == "baseline" and target is not None:
        raise UsageError("baseline evaluates within each --source corpus; --target is not used")
    condition = getattr(args, "condition", None)
    inputs = {"source": [_input_record(p, c) for p, c in sources],
              "target": _input_record(*target) if target else None}
    manifest = _manifest(command, cfg, condition, inputs)
    files, primary = _execute(command, cfg, condition, sources, target)
    _finish(Path(args.out), manifest, files, primary)
    if "report.txt" in files:
        sys.stdout.write(files["report.txt"])
    print(f"wrote {Path(args.out) / primary}")
    return 0


def cmd_replay(args) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        raise DataError(f"no such manifest: {path}")
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
        command, cfg, condition, inputs = m["command"], m["config"], m.get("condition"), m["inputs"]
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: not a run manifest ({exc})") from None
    if command == "generate":
        raise UsageError("generate manifests are reproduced by re-running generate with the same spec and seed")

    def reload(rec):
        p = Path(rec["path"])
        if not p.is_file():
            raise DataError(f"input named in the manifest is missing: {p}")
        if sha256_file(p) != rec["sha256"]:
            raise DataError(f"input changed since the manifest was written: {p}")
        return str(p), load_corpus(p)

    sources = [reload(r) for r in inputs["source"]]
    target = reload(inputs["target"]) if inputs.get("target") else None
    fresh = _manifest(command, cfg, condition, inputs)
    files, primary = _execute(command, cfg, condition, sources, target)
    fresh = _finish(Path(args.out), fresh, files, primary)
    want = m.get("outputs", {}).get(primary)
    got = fresh["outputs"][primary]
    if want != got:
        raise ReplayMismatchError(f"replayed {primary} differs from the manifest (sha256 {got} != {want})")
    print(f"replayed {command}: {Path(args.out) / primary} matches sha256 {got}")
    return 0


# -- parser ---------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="langadapt", description="Adversarial cross-lingual emotion classification experiments.")
    p.add_argument("--version", action="version", version=f"langadapt {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("generate", help="write synthetic feature files from a YAML spec")
    g.add_argument("--config", required=True, help="synthetic corpus spec (YAML)")
    g.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    g.add_argument("--out", default="data", help="output directory (default: data)")
    g.set_defaults(func=cmd_generate)

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default: config value, else 0)")
    common.add_argument("--config", default=None, help="experiment config (YAML); flags override it")
    common.add_argument("--source", nargs="+", required=True, help="source feature file(s)")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--epochs", type=int, default=None,
                        help="epochs for both autoencoder training and adaptation (default 50)")
    common.add_argument("--latent-dim", type=int, default=None, help="latent code width (default 512)")

    def condition_flag(parser, default):
        # added per parser: parents share action objects, so one default would leak into all
        parser.add_argument("--condition", choices=["raw", "latent", "fused", "all"], default=default,
                            help=f"feature condition (default: {default})")

    b = sub.add_parser("baseline", parents=[common], help="within-corpus speaker-independent baseline")
    condition_flag(b, "raw")
    b.add_argument("--target", default=None, help=argparse.SUPPRESS)
    b.add_argument("--folds", type=int, default=None, help="speaker-grouped folds (default: leave one speaker out)")
    b.add_argument("--test-speakers", type=int, default=None,
                   help="with --folds: test speakers per fold, drawn as resamples (e.g. 8 for a 30/8 split)")
    b.set_defaults(func=_cmd_experiment)

    c = sub.add_parser("cross", parents=[common], help="train on each source, test on the target")
    condition_flag(c, "all")
    c.add_argument("--target", required=True, help="target feature file (labels used for scoring only)")
    c.set_defaults(func=_cmd_experiment)

    m = sub.add_parser("multi", parents=[common], help="one-language-out multilingual training")
    condition_flag(m, "all")
    m.add_argument("--target", default=None,
                   help="held-out corpus file; without it every corpus is held out in turn")
    m.set_defaults(func=_cmd_experiment)

    t = sub.add_parser("adapt-trace", parents=[common], help="write the adaptation history of one pair")
    t.add_argument("--target", required=True, help="target feature file (labels are never read)")
    t.set_defaults(func=_cmd_experiment)

    r = sub.add_parser("replay", help="re-run an experiment from its manifest")
    r.add_argument("manifest", help="manifest.json written by an earlier run")
    r.add_argument("--out", default="replay", help="output directory (default: replay)")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except LangAdaptError as exc:
        print(f"langadapt: {exc.category} error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"langadapt: data error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
