"""Module, task and modality ablations with multi-seed averaging.

Fifteen configurations: the full model and five module removals, the two
single-task modes, and all seven non-empty modality subsets.  Each runs
``n_runs`` times with child seeds ``seed + k``; a configuration that raises
is recorded with its error and the rest still run.
"""

from __future__ import annotations

import csv
import io
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus.io import EMOTIONS, INTENTS, Corpus
from .errors import MCEIUError
from .model import EI2Config
from .training import TrainConfig, effective_model_config, evaluate, pretrain, train

log = logging.getLogger(__name__)

# full-scale reference numbers, echoed only; not reproducible at desk scale
REFERENCE_WAF = {"English": (42.09, 45.53), "Mandarin": (55.08, 61.63)}

MODULE_ABLATIONS = {
    "history": ("w/o History", {"use_history": False}, {}),
    "interaction": ("w/o Interaction", {"use_interaction": False}, {}),
    "gating": ("w/o Gating", {"use_gate": False}, {}),
    "fl": ("w/o FL", {}, {"use_focal": False}),
    "pretrain": ("w/o Pre-training", {}, {"pretrained_init": False}),
}

MODALITY_SUBSETS = ("t", "a", "v", "t+a", "t+v", "a+v", "t+a+v")


@dataclass(frozen=True)
class AblationSpec:
    name: str
    group: str  # module | task | modality
    model_changes: tuple = ()
    train_changes: tuple = ()

    def resolve(self, mcfg: EI2Config, tcfg: TrainConfig) -> tuple[EI2Config, TrainConfig]:
        return mcfg.with_(**dict(self.model_changes)), tcfg.with_(**dict(self.train_changes))


def ablation_specs() -> list[AblationSpec]:
    specs = [AblationSpec("EI2 (full)", "module")]
    for label, m, t in MODULE_ABLATIONS.values():
        specs.append(AblationSpec(label, "module", tuple(m.items()), tuple(t.items())))
    specs.append(AblationSpec("Emotion only", "task", (), (("task_mode", "emotion_only"),)))
    specs.append(AblationSpec("Intent only", "task", (), (("task_mode", "intent_only"),)))
    for subset in MODALITY_SUBSETS:
        specs.append(AblationSpec(subset, "modality", (("modalities", subset.replace("+", "")),)))
    return specs


@dataclass
class RunScore:
    seed: int
    emotion_waf: float | None
    intent_waf: float | None
    emotion_f1: list | None = None
    intent_f1: list | None = None


@dataclass
class ConfigResult:
    spec: AblationSpec
    runs: list[RunScore] = field(default_factory=list)
    error: str | None = None

    def mean(self, task: str) -> float | None:
        vals = [getattr(r, f"{task}_waf") for r in self.runs]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def std(self, task: str) -> float | None:
        vals = [getattr(r, f"{task}_waf") for r in self.runs]
        vals = [v for v in vals if v is not None]
        return float(np.std(vals)) if vals else None

    def mean_f1(self, task: str) -> list | None:
        rows = [getattr(r, f"{task}_f1") for r in self.runs]
        rows = [r for r in rows if r is not None]
        return np.mean(rows, axis=0).tolist() if rows else None


def run_one(corpus: Corpus, mcfg: EI2Config, tcfg: TrainConfig, eval_split: str = "test", cache: dict | None = None) -> RunScore:
    """Pre-train (cached across configurations that share encoders), train, evaluate."""
    pretrained = None
    if tcfg.pretrained_init:
        key = (repr(mcfg.with_(use_history=True, use_interaction=True, use_gate=True)),
               repr(tcfg.with_(task_mode="joint", pretrained_init=True)))
        if cache is not None and key in cache:
            pretrained = cache[key]
        else:
            pretrained, _ = pretrain(corpus, tcfg, mcfg)
            if cache is not None:
                cache[key] = pretrained
    state, _ = train(corpus, tcfg, mcfg, pretrained)
    metrics = evaluate(state, effective_model_config(mcfg, tcfg), corpus.split(eval_split), tcfg.eval_batch_size)
    tasks = tcfg.tasks
    score = RunScore(tcfg.seed, None, None)
    if "emotion" in tasks:
        score.emotion_waf, score.emotion_f1 = metrics["emotion"].waf, metrics["emotion"].f1.tolist()
    if "intent" in tasks:
        score.intent_waf, score.intent_f1 = metrics["intent"].waf, metrics["intent"].f1.tolist()
    return score


def run_config(corpus, spec: AblationSpec, mcfg, tcfg, eval_split="test", cache=None) -> ConfigResult:
    result = ConfigResult(spec)
    try:
        m, t = spec.resolve(mcfg, tcfg)
        for k in range(t.n_runs):
            result.runs.append(run_one(corpus, m, t.with_(seed=tcfg.seed + k), eval_split, cache))
    except (MCEIUError, ArithmeticError, ValueError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        log.warning("configuration %r failed: %s", spec.name, result.error)
        log.debug("%s", traceback.format_exc())
    return result


def _worker(args):
    corpus, spec, mcfg, tcfg, eval_split = args
    return run_config(corpus, spec, mcfg, tcfg, eval_split)


@dataclass
class AblationReport:
    results: list[ConfigResult]
    n_runs: int
    seed: int

    def by_name(self, name: str) -> ConfigResult:
        for r in self.results:
            if r.spec.name == name:
                return r
        raise KeyError(name)

    def interaction_benefit(self) -> tuple[int, int]:
        """(seeds where full intent WAF beats w/o Interaction, seeds compared)."""
        full = {r.seed: r.intent_waf for r in self.by_name("EI2 (full)").runs}
        cut = {r.seed: r.intent_waf for r in self.by_name("w/o Interaction").runs}
        seeds = sorted(set(full) & set(cut))
        return sum(full[s] > cut[s] for s in seeds), len(seeds)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        f1_cols = [f"emotion.{l}" for l in EMOTIONS] + [f"intent.{l}" for l in INTENTS]
        w.writerow(["configuration", "group", "task", "waf", "waf_std", "runs", "error"] + [f"f1.{c}" for c in f1_cols])
        for r in self.results:
            for task, labels in (("emotion", EMOTIONS), ("intent", INTENTS)):
                mean, f1 = r.mean(task), r.mean_f1(task)
                cells = {f"{task}.{l}": f"{v:.6f}" for l, v in zip(labels, f1)} if f1 else {}
                w.writerow(
                    [r.spec.name, r.spec.group, task,
                     "" if mean is None else f"{mean:.6f}",
                     "" if mean is None else f"{r.std(task):.6f}",
                     len(r.runs), r.error or ""]
                    + [cells.get(c, "") for c in f1_cols]
                )
        return buf.getvalue()

    def to_text(self) -> str:
        lines = ["Reference WAF at full scale (not reproducible at desk scale):"]
        for lang, (e, i) in REFERENCE_WAF.items():
            lines.append(f"  {lang}: emotion {e:.2f}, intent {i:.2f}")
        lines.append(f"Runs per configuration: {self.n_runs} (seeds {self.seed}..{self.seed + self.n_runs - 1})")
        titles = {"module": "Module ablations", "task": "Single vs joint task", "modality": "Modality ablations"}
        width = max(len(r.spec.name) for r in self.results)
        for group, title in titles.items():
            rows = [r for r in self.results if r.spec.group == group]
            if not rows:
                continue
            lines += ["", title, f"  {'Configuration':<{width}}  {'Emo WAF':>8}  {'Int WAF':>8}"]
            for r in rows:
                cells = []
                for task in ("emotion", "intent"):
                    v = r.mean(task)
                    cells.append("     n/a" if v is None else f"{100 * v:8.2f}")
                suffix = f"  FAILED ({r.error})" if r.error else ""
                lines.append(f"  {r.spec.name:<{width}}  {cells[0]}  {cells[1]}{suffix}")
        try:
            wins, n = self.interaction_benefit()
            lines += ["", f"Interaction benefit: full-model intent WAF above w/o Interaction in {wins} of {n} seeds"]
        except KeyError:
            pass
        return "\n".join(lines) + "\n"


def ablation_suite(
    corpus: Corpus,
    mcfg: EI2Config,
    tcfg: TrainConfig,
    specs: Sequence[AblationSpec] | None = None,
    jobs: int = 1,
    eval_split: str = "test",
    on_result: Callable[[ConfigResult], None] | None = None,
) -> AblationReport:
    specs = list(ablation_specs() if specs is None else specs)
    results: list[ConfigResult | None] = [None] * len(specs)
    if jobs <= 1:
        cache: dict = {}
        for k, spec in enumerate(specs):
            results[k] = run_config(corpus, spec, mcfg, tcfg, eval_split, cache)
            if on_result:
                on_result(results[k])
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_worker, (corpus, s, mcfg, tcfg, eval_split)) for s in specs]
            for k, fut in enumerate(futures):
                try:
                    results[k] = fut.result()
                except Exception as exc:  # a crashed worker must not lose the other rows
                    results[k] = ConfigResult(specs[k], error=f"{type(exc).__name__}: {exc}")
                if on_result:
                    on_result(results[k])
    return AblationReport(results, tcfg.n_runs, tcfg.seed)
