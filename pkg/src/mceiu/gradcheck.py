"""Finite-difference audit of every block and of the full network.

A "random point" is a seeded draw of parameters and inputs.  Central
differences are only a trustworthy oracle where the function is smooth
within ``eps`` of the point and where no nonzero gradient sits below the
rounding floor of the difference quotient, so candidate points are redrawn
until both hold:

- every relu input and every max-pool winner is at least ``margin`` away
  from its kink (measured with :func:`mceiu.tensor.kink_monitor`);
- every nonzero analytic gradient coordinate is at least ``grad_floor``.

Every coordinate of an accepted point is then checked.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from . import tensor as T
from .corpus.io import EMOTIONS, INTENTS, AnnotationRecord, Conversation, Utterance, UtteranceFeatures
from .errors import ContractError
from .model import EI2Config, forward_batch, init_model, make_batch
from .training import TrainConfig, batch_loss

TOLERANCE = 1e-4


@dataclass(frozen=True)
class AuditSettings:
    eps: float = 1e-4
    margin: float = 2e-3
    grad_floor: float = 1e-7
    max_attempts: int = 200
    max_coords: int | None = None  # per parameter tensor; None checks all


@dataclass
class AuditRow:
    name: str
    seed: int
    attempts: int
    error: float
    coords: int
    margin: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def audit_model_config() -> EI2Config:
    """The smallest configuration that still exercises every code path."""
    return EI2Config(
        hidden=4, heads=2, text_dim=4, audio_dim=3, visual_dim=3,
        kernel_widths=(1, 2), filters_per_width=2, ff_dim=8,
    )


def _conversation(rng, dia: int, n: int, config: EI2Config, frames=(3, 6), scale=2.0) -> Conversation:
    conv = Conversation(dia)
    for u in range(n):
        rec = AnnotationRecord(
            "x", dia, u, "audit", None, 1, 0, 1000,
            EMOTIONS[rng.integers(config.n_emotions)], INTENTS[rng.integers(config.n_intents)], u % 2,
        )
        feats = UtteranceFeatures(
            *[scale * rng.normal(size=(int(rng.integers(frames[0], frames[1] + 1)), config.input_dim(m)))
              for m in ("textual", "acoustic", "visual")]
        )
        conv.utterances.append(Utterance(rec, feats))
    return conv


def _perturb_state(state, rng, scale=1.5, offset_sd=0.5):
    # widen weights and move biases / layer-norm affine terms off their init values
    for path, p in state.items():
        leaf = path.rsplit(".", 1)[-1]
        if leaf.startswith(("b", "gamma")):
            p.data = p.data + rng.normal(scale=offset_sd, size=p.shape)
        else:
            p.data = p.data * scale


def model_point(seed: int, attempt: int, config: EI2Config | None = None):
    """Parameters, a 3-utterance batch with histories of length 1, 4 and 5, and the loss closure."""
    config = config or audit_model_config()
    rng = np.random.default_rng([seed, attempt])
    convs = [_conversation(rng, 0, 6, config), _conversation(rng, 1, 5, config)]
    batch = make_batch([(convs[0], 5), (convs[1], 4), (convs[0], 1)], config)
    state = init_model(config, int(rng.integers(2**31)))
    _perturb_state(state, rng)
    tcfg = TrainConfig()

    def loss():
        le, li, _ = forward_batch(state, config, batch)
        return batch_loss(le, li, batch.emotion, batch.intent, tcfg)[0]

    return list(state.values()), loss


def _block_point(kind: str, seed: int, attempt: int):
    rng = np.random.default_rng([seed, attempt, 7])
    d, L = 4, 5
    specs = {
        "linear": nn.LayerSpec("linear", d, 3),
        "lstm": nn.LayerSpec("lstm", d, 3),
        "gru": nn.LayerSpec("gru", d, 3),
        "textcnn": nn.LayerSpec("textcnn", d, 3, kernel_widths=(1, 2, 3), filters_per_width=2),
        "mha": nn.LayerSpec("mha", d, d, heads=2),
        "transformer": nn.LayerSpec("transformer_layer", d, d, heads=2, ff_dim=6),
    }
    params = nn.init_params(specs[kind], int(rng.integers(2**31)))
    _perturb_state(params, rng)
    x = T.Tensor(rng.normal(size=(2, L, d)), requires_grad=True, name="input")
    y = T.Tensor(rng.normal(size=(2, 3, d)), requires_grad=True, name="input2")
    lengths = np.array([L, 3])
    fns: dict[str, Callable] = {
        "linear": lambda: nn.linear(params, x),
        "lstm": lambda: nn.lstm_encode(params, x, lengths),
        "gru": lambda: nn.gru_encode(params, x, lengths),
        "textcnn": lambda: nn.textcnn_encode(params, x, lengths),
        "mha": lambda: nn.multi_head_attention(params, x, y, y, heads=2),
        "transformer": lambda: nn.transformer_layer(params, x, heads=2),
    }
    out_shape = fns[kind]().shape
    probe = rng.normal(size=out_shape)
    inputs = [x, y] if kind == "mha" else [x]

    def loss():
        return T.reduce("sum", fns[kind]() * probe)

    return list(params.values()) + inputs, loss


BLOCKS = ("linear", "lstm", "gru", "textcnn", "mha", "transformer")


def _acceptable(params, loss, settings: AuditSettings) -> tuple[bool, float]:
    for p in params:
        p.grad = None
    with T.kink_monitor() as mon:
        out = loss()
    T.backward(out, params)
    g = np.concatenate([np.abs(p.grad).ravel() for p in params])
    for p in params:
        p.grad = None
    nonzero = g[g > 0]
    small = nonzero.size and nonzero.min() < settings.grad_floor
    return mon.margin >= settings.margin and not small, mon.margin


def audit_point(name: str, make: Callable, seed: int, settings: AuditSettings) -> AuditRow:
    if T.get_precision() != "f64":
        raise ContractError("the gradient audit runs in 64-bit mode only")
    start = time.perf_counter()
    for attempt in range(settings.max_attempts):
        params, loss = make(seed, attempt)
        ok, margin = _acceptable(params, loss, settings)
        if ok:
            break
    else:
        raise ContractError(f"{name}: no acceptable point for seed {seed} in {settings.max_attempts} draws")
    err = T.grad_check(loss, params, eps=settings.eps, max_coords=settings.max_coords, seed=seed)
    coords = sum(p.data.size if settings.max_coords is None else min(p.data.size, settings.max_coords) for p in params)
    return AuditRow(name, seed, attempt + 1, err, coords, margin, time.perf_counter() - start)


def run_audit(seeds=range(5), settings: AuditSettings | None = None, include_model: bool = True,
              model_config: EI2Config | None = None, on_row=None) -> list[AuditRow]:
    settings = settings or AuditSettings()
    rows = []
    targets = [(b, lambda s, a, b=b: _block_point(b, s, a)) for b in BLOCKS]
    if include_model:
        targets.append(("ei2_model", lambda s, a: model_point(s, a, model_config)))
    with T.precision("f64"):
        for name, make in targets:
            for seed in seeds:
                row = audit_point(name, make, seed, settings)
                rows.append(row)
                if on_row:
                    on_row(row)
    return rows


def audit_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "seed", "attempts", "max_rel_error", "coords", "kink_margin", "passed"])
    for r in rows:
        w.writerow([r.name, r.seed, r.attempts, f"{r.error:.3e}", r.coords, f"{r.margin:.3e}", int(r.passed)])
    return buf.getvalue()
