"""Losses, optimiser, schedule and the two-phase training procedure.

Phase 1 (:func:`pretrain`) fits the emotion and intent encoders with throwaway
linear heads on the token-averaged fused features.  Phase 2 (:func:`train`)
starts from those encoder weights and trains the whole network jointly,
keeping the epoch with the best validation WAF sum.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .corpus.io import EMOTIONS, INTENTS, Conversation, Corpus
from .errors import ContractError, DataError, NumericError
from .metrics import MetricsReport, argmax_predictions, metrics_from_predictions
from .model import (
    TASKS,
    EI2Config,
    ModelState,
    encode_task_utterance,
    encoder_paths,
    forward_batch,
    init_layers,
    init_model,
    make_batch,
    model_layout,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

TASK_MODES = ("joint", "emotion_only", "intent_only")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0002
    batch_size: int = 32
    epochs_pretrain: int = 60
    epochs_train: int = 60
    focal_gamma: float = 2.0
    seed: int = 0
    n_runs: int = 3
    use_focal: bool = True
    pretrained_init: bool = True
    task_mode: str = "joint"
    lr_floor: float = 0.1
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        if self.focal_gamma < 0:
            raise ContractError("focal_gamma must be non-negative")
        if self.task_mode not in TASK_MODES:
            raise ContractError(f"task_mode must be one of {TASK_MODES}")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    @property
    def tasks(self) -> tuple[str, ...]:
        return {"joint": TASKS, "emotion_only": ("emotion",), "intent_only": ("intent",)}[self.task_mode]


@dataclass
class LossEntry:
    total: float
    emotion: float
    intent: float


@dataclass
class LossReport:
    steps: list[LossEntry] = field(default_factory=list)
    epochs: list[LossEntry] = field(default_factory=list)
    valid_scores: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss_total", "loss_e", "loss_i"])
        for k, e in enumerate(self.epochs):
            w.writerow([k, repr(e.total), repr(e.emotion), repr(e.intent)])
        return buf.getvalue()


# --- losses -------------------------------------------------------------------


def focal_loss(logits, target, gamma: float = 2.0) -> Tensor:
    """``-(1 - p_t)^gamma * log(p_t)`` per sample; ``gamma = 0`` is cross-entropy.

    ``logits`` is ``[C]`` (scalar result) or ``[B, C]`` (one loss per row).
    """
    logits = T._wrap(logits)
    if gamma < 0:
        raise ContractError(f"gamma must be non-negative, got {gamma}")
    C = logits.shape[-1]
    target = np.asarray(target, dtype=int)
    if target.shape != logits.shape[:-1]:
        raise ContractError(f"targets of shape {target.shape} do not match logits {logits.shape}")
    if ((target < 0) | (target >= C)).any():
        raise ContractError(f"class index outside [0, {C})")
    log_probs = T.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        log_pt = log_probs[int(target)]
    else:
        log_pt = log_probs[np.arange(len(target)), target]
    if gamma == 0:
        return -log_pt
    return -(T.power(1.0 - T.exp(log_pt), gamma) * log_pt)


def cross_entropy(logits, target) -> Tensor:
    return focal_loss(logits, target, 0.0)


def batch_loss(logits_e, logits_i, emotion, intent, config: TrainConfig):
    """Mean per-sample loss over the batch; returns ``(loss tensor, LossEntry)``."""
    gamma = config.focal_gamma if config.use_focal else 0.0
    parts = {}
    for task, logits, labels in (("emotion", logits_e, emotion), ("intent", logits_i, intent)):
        if task not in config.tasks:
            continue
        labels = np.asarray(labels, dtype=int)
        if labels.size == 0:
            raise ContractError("empty batch")
        C = logits.shape[-1]
        if ((labels < 0) | (labels >= C)).any():
            raise DataError(f"{task} label outside the {C} categories")
        parts[task] = T.reduce("mean", focal_loss(logits, labels, gamma))
    total = None
    for v in parts.values():
        total = v if total is None else total + v
    entry = LossEntry(
        total.item(),
        parts["emotion"].item() if "emotion" in parts else 0.0,
        parts["intent"].item() if "intent" in parts else 0.0,
    )
    return total, entry


# --- optimiser and schedule ---------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(state: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], opt: AdamState, lr: float):
    """One bias-corrected Adam step applied in place; returns ``state``."""
    for path, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {path}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for path, g in grads.items():
        p = state[path]
        m = opt.m.get(path)
        if m is None:
            m = opt.m[path] = np.zeros_like(p.data)
            opt.v[path] = np.zeros_like(p.data)
        v = opt.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return state


def lr_factor(epoch: int, total_epochs: int, floor: float = 0.1) -> float:
    """Flat at 1.0 through the first half, then linear decay reaching ``floor`` at the last epoch.

    The decay starts one epoch past the midpoint, so with 60 epochs
    epoch 45 sits exactly halfway between 1.0 and 0.1.
    """
    if not 0 <= epoch < total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    last = total_epochs - 1
    if last == 0:
        return 1.0
    if epoch == last:
        return floor
    start = min(total_epochs // 2 + 1, last)
    if epoch <= start:
        return 1.0
    return 1.0 - (1.0 - floor) * (epoch - start) / (last - start)


# --- loops --------------------------------------------------------------------


def utterance_items(conversations: Sequence[Conversation]) -> list[tuple[Conversation, int]]:
    return [(c, n) for c in conversations for n in range(len(c))]


def _batches(items, batch_size: int, rng):
    order = rng.permutation(len(items))
    for s in range(0, len(order), batch_size):
        yield [items[j] for j in order[s : s + batch_size]]


def effective_model_config(mcfg: EI2Config, tcfg: TrainConfig) -> EI2Config:
    """Single-task runs have no second branch to interact with."""
    if tcfg.task_mode != "joint" and mcfg.use_interaction:
        return mcfg.with_(use_interaction=False)
    return mcfg


def _step(state, params, opt, loss, lr):
    state_grads = {}
    T.backward(loss, params.values())
    for k, p in params.items():
        state_grads[k] = p.grad
        p.grad = None
    adam_update(params, state_grads, opt, lr)


def _epoch_mean(entries: list[tuple[LossEntry, int]]) -> LossEntry:
    n = sum(w for _, w in entries)
    return LossEntry(
        sum(e.total * w for e, w in entries) / n,
        sum(e.emotion * w for e, w in entries) / n,
        sum(e.intent * w for e, w in entries) / n,
    )


def pretrain_layout(mcfg: EI2Config) -> dict:
    layout = {k: v for k, v in model_layout(mcfg).items() if k.startswith(("emotion_encoder.", "intent_encoder."))}
    layout["pretrain_classifier.emotion"] = nn.LayerSpec("linear", mcfg.hidden, mcfg.n_emotions)
    layout["pretrain_classifier.intent"] = nn.LayerSpec("linear", mcfg.hidden, mcfg.n_intents)
    return layout


def pretrain_logits(state, mcfg: EI2Config, feats):
    out = []
    for task in TASKS:
        f_star = encode_task_utterance(state, mcfg, feats, task)
        pooled = T.reduce("mean", f_star, axis=-2)
        out.append(nn.linear(nn.sub_params(state, f"pretrain_classifier.{task}."), pooled))
    return out


def pretrain(corpus: Corpus | Sequence[Conversation], tcfg: TrainConfig, mcfg: EI2Config):
    """Phase-1 encoder training; returns ``(encoder arrays, LossReport)``.

    The pre-training heads are discarded.
    """
    train_convs = corpus.split("train") if isinstance(corpus, Corpus) else list(corpus)
    if not train_convs:
        raise DataError("pretraining needs a non-empty train split")
    state = init_layers(pretrain_layout(mcfg), tcfg.seed)
    opt = AdamState()
    rng = np.random.default_rng([tcfg.seed, 11])
    items = utterance_items(train_convs)
    report = LossReport()
    for epoch in range(tcfg.epochs_pretrain):
        lr = tcfg.learning_rate * lr_factor(epoch, tcfg.epochs_pretrain, tcfg.lr_floor)
        entries = []
        for chunk in _batches(items, tcfg.batch_size, rng):
            batch = make_batch(chunk, mcfg, history=False)
            le, li = pretrain_logits(state, mcfg, batch.feats)
            loss, entry = batch_loss(le, li, batch.emotion, batch.intent, tcfg.with_(task_mode="joint"))
            _step(state, state, opt, loss, lr)
            report.steps.append(entry)
            entries.append((entry, batch.size))
        report.epochs.append(_epoch_mean(entries))
        log.debug("pretrain epoch %d loss %.6f", epoch, report.epochs[-1].total)
    encoders = {k: state[k].data.copy() for k in encoder_paths(state)}
    return encoders, report


def predict(state, mcfg: EI2Config, conversations: Sequence[Conversation], batch_size: int = 256):
    """Logits for every utterance, in conversation order, plus the true labels."""
    items = utterance_items(conversations)
    le_all, li_all, ye, yi = [], [], [], []
    with T.no_grad():
        for s in range(0, len(items), batch_size):
            batch = make_batch(items[s : s + batch_size], mcfg)
            le, li, _ = forward_batch(state, mcfg, batch)
            le_all.append(le.data)
            li_all.append(li.data)
            ye.append(batch.emotion)
            yi.append(batch.intent)
    return np.concatenate(le_all), np.concatenate(li_all), np.concatenate(ye), np.concatenate(yi)


def evaluate(state, mcfg: EI2Config, conversations: Sequence[Conversation], batch_size: int = 256) -> dict[str, MetricsReport]:
    if not conversations or not sum(len(c) for c in conversations):
        raise ContractError("evaluate needs a non-empty split")
    le, li, ye, yi = predict(state, mcfg, conversations, batch_size)
    return {
        "emotion": metrics_from_predictions(ye, argmax_predictions(le), EMOTIONS[: mcfg.n_emotions], "emotion"),
        "intent": metrics_from_predictions(yi, argmax_predictions(li), INTENTS[: mcfg.n_intents], "intent"),
    }


def train(
    corpus: Corpus,
    tcfg: TrainConfig,
    mcfg: EI2Config,
    pretrained: Mapping[str, np.ndarray] | None = None,
) -> tuple[ModelState, LossReport]:
    """Joint training; the returned state is the best-validation epoch (last epoch if no valid split)."""
    mcfg = effective_model_config(mcfg, tcfg)
    train_convs = corpus.split("train")
    valid_convs = corpus.split("valid") if "valid" in corpus.splits else []
    if not train_convs:
        raise DataError("training needs a non-empty train split")
    state = init_model(mcfg, tcfg.seed)
    if pretrained is not None:
        state.load_arrays({k: v for k, v in pretrained.items() if k in state}, strict=False)
    opt = AdamState()
    rng = np.random.default_rng([tcfg.seed, 12])
    items = utterance_items(train_convs)
    report = LossReport()
    best_score, best = -np.inf, None
    for epoch in range(tcfg.epochs_train):
        lr = tcfg.learning_rate * lr_factor(epoch, tcfg.epochs_train, tcfg.lr_floor)
        entries = []
        for chunk in _batches(items, tcfg.batch_size, rng):
            batch = make_batch(chunk, mcfg)
            le, li, _ = forward_batch(state, mcfg, batch)
            loss, entry = batch_loss(le, li, batch.emotion, batch.intent, tcfg)
            _step(state, state, opt, loss, lr)
            report.steps.append(entry)
            entries.append((entry, batch.size))
        report.epochs.append(_epoch_mean(entries))
        if valid_convs:
            metrics = evaluate(state, mcfg, valid_convs, tcfg.eval_batch_size)
            score = sum(metrics[t].waf for t in tcfg.tasks)
            report.valid_scores.append(score)
            if score > best_score:
                best_score, best = score, state.arrays()
                best = {k: v.copy() for k, v in best.items()}
                report.best_epoch = epoch
        log.debug("train epoch %d loss %.6f", epoch, report.epochs[-1].total)
    if best is not None:
        state.load_arrays(best)
    else:
        report.best_epoch = tcfg.epochs_train - 1 if tcfg.epochs_train else None
    return state, report


@dataclass
class RunResult:
    state: ModelState
    config: EI2Config
    pretrain_report: LossReport | None
    train_report: LossReport
    metrics: dict[str, MetricsReport]


def fit(corpus: Corpus, tcfg: TrainConfig, mcfg: EI2Config, eval_split: str = "test") -> RunResult:
    """Pre-train (unless disabled), train, and evaluate on ``eval_split``."""
    pre_report = pretrained = None
    if tcfg.pretrained_init:
        pretrained, pre_report = pretrain(corpus, tcfg, mcfg)
    state, report = train(corpus, tcfg, mcfg, pretrained)
    eff = effective_model_config(mcfg, tcfg)
    metrics = evaluate(state, eff, corpus.split(eval_split), tcfg.eval_batch_size)
    return RunResult(state, eff, pre_report, report, metrics)


def config_dict(cfg) -> dict:
    out = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
