"""Command-line entry point: ``mceiu <subcommand> [flags]``.

Every subcommand resolves its configuration (defaults < ``--config`` file <
flags), writes ``manifest.json`` into ``--out`` and only then does its work.
Exit status: 0 on success, 1 on data or contract errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import ast
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import nn
from . import tensor as T
from .ablation import MODULE_ABLATIONS, ablation_suite
from .corpus.io import (
    EMOTIONS,
    INTENTS,
    MODALITIES,
    Corpus,
    format_timestamp,
    load_corpus,
    parse_annotations_csv,
    parse_modalities,
    parse_subtitle_file,
    write_splits,
)
from .corpus.synth import SynthConfig, synth_corpus
from .corpus.tools import (
    NoMajority,
    conversations_from_records,
    correlation_csv,
    correlation_heatmap,
    correlation_matrix,
    dataset_stats,
    fleiss_kappa,
    kappa_csv,
    majority_vote,
    parse_triples_csv,
    rating_counts,
    split_corpus,
)
from .errors import DataError, MCEIUError
from .gradcheck import AuditSettings, audit_csv, run_audit
from .metrics import confusion_text, metrics_csv
from .model import EI2Config, load_model, save_model
from .training import TrainConfig, config_dict, effective_model_config, evaluate, pretrain, train

log = logging.getLogger("mceiu")

SECTIONS = {"model": EI2Config, "train": TrainConfig, "synth": SynthConfig}
TASK_FLAGS = {"joint": "joint", "emotion": "emotion_only", "intent": "intent_only"}
DIM_FIELDS = {"textual": "text_dim", "acoustic": "audio_dim", "visual": "visual_dim"}


class UsageError(Exception):
    pass


# --- configuration ------------------------------------------------------------


def _value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if "," in text:
            return tuple(_value(part) for part in text.split(","))
        return text


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    return v


def parse_config_text(text: str) -> dict[str, dict]:
    """``key = value`` lines; keys are ``section.field`` or a bare field name."""
    out: dict[str, dict] = {name: {} for name in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        parsed = _tupled(_value(value))
        section, _, name = key.rpartition(".")
        targets = [section] if section else [s for s, cls in SECTIONS.items() if name in {f.name for f in fields(cls)}]
        if not targets or any(s not in SECTIONS or name not in {f.name for f in fields(SECTIONS[s])} for s in targets):
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        for s in targets:
            out[s][name] = parsed
    return out


@dataclass
class Resolved:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def build(self, section: str):
        try:
            return SECTIONS[section](**getattr(self, section))
        except TypeError as exc:
            raise DataError(f"bad {section} configuration: {exc}") from None


def resolve_config(args) -> Resolved:
    res = Resolved()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"config file {path} not found")
        for section, values in parse_config_text(path.read_text(encoding="utf-8")).items():
            getattr(res, section).update(values)
    if args.seed is not None:
        res.train["seed"] = args.seed
        res.synth["seed"] = args.seed
    if getattr(args, "modalities", None):
        mods = parse_modalities(args.modalities)
        res.model["modalities"] = mods
        res.synth["modalities"] = mods
    if getattr(args, "task", None):
        res.train["task_mode"] = TASK_FLAGS[args.task]
    for name in getattr(args, "ablate", None) or []:
        _, model_changes, train_changes = MODULE_ABLATIONS[name]
        res.model.update(model_changes)
        res.train.update(train_changes)
    return res


def infer_dims(res: Resolved, corpus: Corpus) -> None:
    """Input dims default to what the corpus holds unless set explicitly."""
    for conv in corpus.conversations:
        for utt in conv.utterances:
            for m, name in DIM_FIELDS.items():
                x = utt.features.get(m)
                if x is not None and name not in res.model:
                    res.model[name] = int(x.shape[1])
            return


# --- manifest -----------------------------------------------------------------


@dataclass
class RunManifest:
    subcommand: str
    argv: list
    config: dict
    seeds: list
    inputs: dict
    out: str
    version: str = __version__
    started: str = ""
    precision: str = "f64"
    dry_run: bool = False

    def write(self, out: Path) -> Path:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")
        return path


def _materialized(res: Resolved, sections) -> dict:
    return {s: config_dict(res.build(s)) for s in sections}


def _start(args, argv, sections, res: Resolved, inputs: dict) -> Path:
    out = Path(args.out or f"mceiu-out/{args.command}")
    seed = res.train.get("seed", res.synth.get("seed", 0))
    n_runs = res.build("train").n_runs if "train" in sections else 1
    manifest = RunManifest(
        subcommand=args.command,
        argv=list(argv),
        config=_materialized(res, sections),
        seeds=[seed + k for k in range(n_runs)] if args.command == "ablate" else [seed],
        inputs={k: str(v) for k, v in inputs.items() if v is not None},
        out=str(out),
        started=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        precision=T.get_precision(),
        dry_run=bool(args.dry_run),
    )
    manifest.write(out)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _corpus(args) -> Corpus:
    if not args.corpus:
        raise UsageError("--corpus is required")
    return load_corpus(args.corpus, parse_modalities(args.modalities) if getattr(args, "modalities", None) else MODALITIES)


def _records_source(args):
    if getattr(args, "csv", None):
        records = parse_annotations_csv(Path(args.csv).read_bytes())
        return conversations_from_records(records), None
    corpus = _corpus(args)
    return corpus.conversations, corpus


# --- subcommands --------------------------------------------------------------


def cmd_synth(args, argv):
    res = resolve_config(args)
    cfg = res.build("synth").validate()
    out = _start(args, argv, ["synth"], res, {})
    if args.dry_run:
        return 0
    sc = synth_corpus(cfg)
    sc.write(out)
    print(f"wrote {len(sc.conversations)} conversations / {len(sc.records)} utterances to {out}")
    return 0


def _model_setup(args, argv, sections=("model", "train")):
    res = resolve_config(args)
    corpus = _corpus(args)
    infer_dims(res, corpus)
    inputs = {"corpus": args.corpus, "pretrained": getattr(args, "pretrained", None)}
    out = _start(args, argv, list(sections), res, inputs)
    return res, corpus, out


def cmd_pretrain(args, argv):
    res, corpus, out = _model_setup(args, argv)
    if args.dry_run:
        return 0
    encoders, report = pretrain(corpus, res.build("train"), res.build("model"))
    nn.save_params(out / "pretrained.eiup", encoders)
    _write(out / "pretrain_loss.csv", report.curve_csv())
    print(f"pretrained {len(encoders)} encoder tensors; final loss {report.epochs[-1].total:.6f}" if report.epochs else "no epochs run")
    return 0


def cmd_train(args, argv):
    res, corpus, out = _model_setup(args, argv)
    if args.dry_run:
        return 0
    tcfg, mcfg = res.build("train"), res.build("model")
    pretrained = None
    if args.pretrained:
        pretrained = nn.load_params(args.pretrained)
    elif tcfg.pretrained_init:
        pretrained, pre_report = pretrain(corpus, tcfg, mcfg)
        _write(out / "pretrain_loss.csv", pre_report.curve_csv())
    state, report = train(corpus, tcfg, mcfg, pretrained)
    eff = effective_model_config(mcfg, tcfg)
    save_model(out / "model.eiup", state, eff)
    _write(out / "train_loss.csv", report.curve_csv())
    if report.valid_scores:
        _write(out / "valid_scores.csv", "epoch,waf_sum\n" + "".join(f"{k},{v!r}\n" for k, v in enumerate(report.valid_scores)))
    print(f"trained {tcfg.epochs_train} epochs; best epoch {report.best_epoch}; checkpoint {out / 'model.eiup'}")
    if "test" in corpus.splits:
        _report_metrics(out, evaluate(state, eff, corpus.split("test"), tcfg.eval_batch_size), tcfg)
    return 0


def _report_metrics(out: Path, metrics, tcfg: TrainConfig | None = None):
    tasks = tcfg.tasks if tcfg else tuple(metrics)
    metrics = {t: metrics[t] for t in tasks}
    _write(out / "metrics.csv", metrics_csv(metrics))
    _write(out / "confusion.txt", "\n".join(confusion_text(r) for r in metrics.values()))
    for t, r in metrics.items():
        print(f"{t} WAF {100 * r.waf:.2f} over {r.n} utterances")


def cmd_eval(args, argv):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    res = resolve_config(args)
    state, mcfg = load_model(args.checkpoint)
    corpus = load_corpus(args.corpus, mcfg.modalities) if args.corpus else None
    if corpus is None:
        raise UsageError("--corpus is required")
    out = _start(args, argv, ["train"], res, {"corpus": args.corpus, "checkpoint": args.checkpoint})
    convs = corpus.split(args.split)
    if args.dry_run:
        return 0
    _report_metrics(out, evaluate(state, mcfg, convs, res.build("train").eval_batch_size), res.build("train"))
    return 0


def cmd_ablate(args, argv):
    res, corpus, out = _model_setup(args, argv)
    if args.dry_run:
        return 0

    def progress(r):
        log.info("finished %s", r.spec.name)

    report = ablation_suite(corpus, res.build("model"), res.build("train"), jobs=args.jobs, on_result=progress)
    _write(out / "ablation.csv", report.to_csv())
    _write(out / "ablation.txt", report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_gradcheck(args, argv):
    res = resolve_config(args)
    out = _start(args, argv, [], res, {})
    if args.dry_run:
        return 0
    settings = AuditSettings(eps=args.eps)
    seed = args.seed or 0
    rows = run_audit(range(seed, seed + args.points), settings,
                     on_row=lambda r: print(f"{r.name:<12} seed {r.seed}  max rel error {r.error:.3e}  "
                                            f"{'PASS' if r.passed else 'FAIL'}", flush=True))
    _write(out / "gradcheck.csv", audit_csv(rows))
    worst = max(r.error for r in rows)
    print(f"worst relative error {worst:.3e} over {sum(r.coords for r in rows)} coordinates")
    if not all(r.passed for r in rows):
        print("gradient audit FAILED", file=sys.stderr)
        return 1
    return 0


def _vocab(name):
    return {"emotion": EMOTIONS, "intent": INTENTS, None: None}[name]


def _triples(args):
    if not args.csv:
        raise UsageError("--csv is required")
    return parse_triples_csv(Path(args.csv).read_bytes(), _vocab(args.vocab))


def cmd_vote(args, argv):
    res = resolve_config(args)
    out = _start(args, argv, [], res, {"csv": args.csv})
    triples, vocab = _triples(args)
    if args.dry_run:
        return 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Dia_No", "Utt_No", "Label", "Status"])
    counts = {"majority": 0, "expert": 0, "unresolved": 0}
    for t in triples:
        label = majority_vote(t.labels, vocab, t.expert)
        if label is NoMajority:
            status, label = "unresolved", ""
        elif majority_vote(t.labels, vocab) is NoMajority:
            status = "expert"
        else:
            status = "majority"
        counts[status] += 1
        w.writerow([t.dia_no, t.utt_no, label, status])
    _write(out / "final_labels.csv", buf.getvalue())
    print(", ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


def cmd_kappa(args, argv):
    res = resolve_config(args)
    out = _start(args, argv, [], res, {"csv": args.csv})
    triples, vocab = _triples(args)
    if args.dry_run:
        return 0
    if not triples:
        raise DataError("no annotation triples in the input")
    result = fleiss_kappa(rating_counts(triples, vocab))
    _write(out / "kappa.csv", kappa_csv({Path(args.csv).stem: result}))
    flag = " (degenerate: all ratings in one category)" if result.degenerate else ""
    print(f"κ = {result.kappa!r}{flag}")
    print(f"observed agreement {result.observed:.6f}, chance agreement {result.expected:.6f}, "
          f"{result.n_items} items x {result.n_raters} raters")
    return 0


def cmd_split(args, argv):
    res = resolve_config(args)
    corpus = _corpus(args)
    out = _start(args, argv, [], res, {"corpus": args.corpus})
    if args.dry_run:
        return 0
    result = split_corpus(corpus.conversations, seed=args.seed or 0)
    write_splits(out / "splits.json", result.as_ids())
    print(f"train {len(result.train)}, valid {len(result.valid)}, test {len(result.test)}; "
          f"label distance emotion {result.distances['emotion']:.4f}, intent {result.distances['intent']:.4f}")
    return 0


def cmd_corr(args, argv):
    res = resolve_config(args)
    convs, _ = _records_source(args)
    out = _start(args, argv, [], res, {"corpus": args.corpus, "csv": args.csv})
    if args.dry_run:
        return 0
    m = correlation_matrix(r for c in convs for r in c.records)
    _write(out / "correlation.csv", correlation_csv(m))
    _write(out / "correlation.txt", correlation_heatmap(m))
    print(correlation_heatmap(m), end="")
    return 0


def cmd_stats(args, argv):
    res = resolve_config(args)
    convs, _ = _records_source(args)
    out = _start(args, argv, [], res, {"corpus": args.corpus, "csv": args.csv})
    if args.dry_run:
        return 0
    stats = dataset_stats(convs)
    _write(out / "stats.csv", stats.to_csv())
    _write(out / "stats.txt", stats.to_text())
    print(stats.to_text(), end="")
    return 0


def cmd_parse_subs(args, argv):
    if not args.subs:
        raise UsageError("--subs is required")
    res = resolve_config(args)
    out = _start(args, argv, [], res, {"subs": args.subs})
    entries = parse_subtitle_file(Path(args.subs).read_bytes())
    if args.dry_run:
        return 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "begin", "end", "begin_ms", "end_ms", "text"])
    for e in entries:
        w.writerow([e.index, format_timestamp(e.begin_ms), format_timestamp(e.end_ms), e.begin_ms, e.end_ms, e.text])
    _write(out / "subtitles.csv", buf.getvalue())
    print(f"{len(entries)} subtitle entries")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "vote": cmd_vote,
    "kappa": cmd_kappa,
    "split": cmd_split,
    "corr": cmd_corr,
    "stats": cmd_stats,
    "parse-subs": cmd_parse_subs,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (manifest and reports)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--precision", choices=("f32", "f64"), default="f64")
    common.add_argument("--dry-run", action="store_true", help="validate inputs and write only the manifest")
    common.add_argument("-v", "--verbose", action="count", default=0)

    corpus = argparse.ArgumentParser(add_help=False)
    corpus.add_argument("--corpus", help="corpus directory")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--modalities", help="subset of t, a, v (e.g. 'ta')")
    model.add_argument("--task", choices=tuple(TASK_FLAGS))
    model.add_argument("--ablate", action="append", choices=tuple(MODULE_ABLATIONS), default=[])

    annotations = argparse.ArgumentParser(add_help=False)
    annotations.add_argument("--csv", help="annotation CSV instead of a corpus directory")

    triples = argparse.ArgumentParser(add_help=False)
    triples.add_argument("--csv", help="Dia_No, Utt_No, three annotator labels, optional expert label")
    triples.add_argument("--vocab", choices=("emotion", "intent"), help="label vocabulary (default: detect)")

    parser = argparse.ArgumentParser(prog="mceiu", description="EI² emotion/intent network and corpus tools")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", required=True)
    sub.add_parser("synth", parents=[common, model], help="write a synthetic corpus")
    sub.add_parser("pretrain", parents=[common, corpus, model], help="phase-1 encoder pre-training")
    p = sub.add_parser("train", parents=[common, corpus, model], help="joint training (pre-trains first unless disabled)")
    p.add_argument("--pretrained", help="encoder weights from 'pretrain'")
    p = sub.add_parser("eval", parents=[common, corpus], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p = sub.add_parser("ablate", parents=[common, corpus, model], help="module/task/modality ablation report")
    p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference audit of every block and the full model")
    p.add_argument("--points", type=int, default=5)
    p.add_argument("--eps", type=float, default=AuditSettings.eps)
    sub.add_parser("vote", parents=[common, triples], help="majority-vote final labels")
    sub.add_parser("kappa", parents=[common, triples], help="Fleiss's kappa of annotation triples")
    sub.add_parser("split", parents=[common, corpus], help="dialogue-level 7:1:2 split")
    sub.add_parser("corr", parents=[common, corpus, annotations], help="emotion x intent co-occurrence matrix")
    sub.add_parser("stats", parents=[common, corpus, annotations], help="corpus statistics")
    p = sub.add_parser("parse-subs", parents=[common], help="parse a subtitle file")
    p.add_argument("--subs")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    old = T.get_precision()
    T.set_precision(args.precision)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mceiu {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MCEIUError, OSError) as exc:
        print(f"mceiu {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        T.set_precision(old)


if __name__ == "__main__":
    sys.exit(main())
