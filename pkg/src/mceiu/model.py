"""The emotion-intent interaction network.

Pipeline for utterance ``n`` of a conversation::

    task encoders      f*_s  = Fusion_s([Enc_s^v(u^v), Enc_s^a(u^a), Enc_s^t(u^t)])   3 tokens
    history encoder    f_h   = Proj(concat(GRU^v, GRU^a, GRU^t over u_1..u_{n-1}))
    fusion             f_s   = f*_s + f_h              (broadcast over tokens)
    binary attention   f_e-i = Attn(f_e, f_i, f_i);    f_i-e = Attn(f_i, f_e, f_e)
    triple attention   f_e-i-e = Attn(f_e, f_e-i, f_e-i)  (and the intent mirror)
    gate               g*_s  = f_s-x-s * sigmoid(f_s-x-s + f_s-x)
    classifiers        logits_s = Linear(mean_tokens(g*_s + f_s))

Everything operates on batches; the single-utterance helpers wrap a batch of one.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .corpus.io import EMOTIONS, INTENTS, MODALITIES, Conversation, UtteranceFeatures, parse_modalities
from .errors import ContractError, DataError
from .nn import LayerSpec, sub_params
from .tensor import Tensor

TASKS = ("emotion", "intent")
# token order of the fused sequence
TOKEN_ORDER = ("visual", "acoustic", "textual")


@dataclass(frozen=True)
class EI2Config:
    hidden: int = 128
    heads: int = 4
    n_emotions: int = 7
    n_intents: int = 9
    modalities: tuple = MODALITIES
    use_history: bool = True
    use_interaction: bool = True
    use_gate: bool = True
    text_dim: int = 768
    audio_dim: int = 512
    visual_dim: int = 342
    kernel_widths: tuple = (3, 4, 5)
    filters_per_width: int = 64
    ff_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "modalities", parse_modalities(self.modalities))
        object.__setattr__(self, "kernel_widths", tuple(int(w) for w in self.kernel_widths))
        if self.hidden % self.heads:
            raise ContractError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    def input_dim(self, modality: str) -> int:
        return {"textual": self.text_dim, "acoustic": self.audio_dim, "visual": self.visual_dim}[modality]

    def n_classes(self, task: str) -> int:
        return self.n_emotions if task == "emotion" else self.n_intents

    def to_json(self) -> str:
        body = asdict(self)
        body["modalities"] = list(self.modalities)
        body["kernel_widths"] = list(self.kernel_widths)
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EI2Config":
        body = json.loads(text)
        return cls(**body)

    def with_(self, **changes) -> "EI2Config":
        return replace(self, **changes)


class ModelState(dict):
    """Parameter tensors keyed by dotted path, e.g. ``emotion_encoder.textual.proj.W``."""

    def subtree(self, prefix: str) -> dict[str, Tensor]:
        return sub_params(self, prefix)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def clone(self) -> "ModelState":
        return ModelState({k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.items()})

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(arrays) != set(self):
            missing = sorted(set(self) - set(arrays))
            extra = sorted(set(arrays) - set(self))
            raise DataError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, v in arrays.items():
            if k not in self:
                continue
            if self[k].shape != v.shape:
                raise DataError(f"{k}: checkpoint shape {v.shape} != model shape {self[k].shape}")
            self[k].data = np.array(v, dtype=self[k].data.dtype)


def model_layout(config: EI2Config) -> dict[str, LayerSpec]:
    h = config.hidden
    layout: dict[str, LayerSpec] = {}
    for task in TASKS:
        p = f"{task}_encoder."
        layout[p + "visual"] = LayerSpec("lstm", config.visual_dim, h)
        layout[p + "acoustic"] = LayerSpec("lstm", config.audio_dim, h)
        layout[p + "textual"] = LayerSpec(
            "textcnn", config.text_dim, h,
            kernel_widths=config.kernel_widths, filters_per_width=config.filters_per_width,
        )
        layout[p + "fusion"] = LayerSpec("transformer_layer", h, h, heads=config.heads, ff_dim=config.ff_dim)
    for m in TOKEN_ORDER:
        layout[f"history.{m}"] = LayerSpec("gru", config.input_dim(m), h)
    layout["history.proj"] = LayerSpec("linear", 3 * h, h)
    for task in TASKS:
        layout[f"interaction.{task}.binary"] = LayerSpec("mha", h, h, heads=config.heads)
        layout[f"interaction.{task}.triple"] = LayerSpec("mha", h, h, heads=config.heads)
    layout["classifier.emotion"] = LayerSpec("linear", h, config.n_emotions)
    layout["classifier.intent"] = LayerSpec("linear", h, config.n_intents)
    return layout


def layer_seed(seed: int, path: str) -> list[int]:
    return [int(seed), zlib.crc32(path.encode("utf-8"))]


def init_layers(layout: Mapping[str, LayerSpec], seed: int) -> ModelState:
    state = ModelState()
    for prefix, spec in layout.items():
        for k, v in nn.init_params(spec, layer_seed(seed, prefix)).items():
            v.name = f"{prefix}.{k}"
            state[v.name] = v
    return state


def init_model(config: EI2Config, seed: int = 0) -> ModelState:
    return init_layers(model_layout(config), seed)


def encoder_paths(state: Mapping[str, Tensor]) -> list[str]:
    return [k for k in state if k.startswith(("emotion_encoder.", "intent_encoder."))]


# --- batching -----------------------------------------------------------------


@dataclass
class Batch:
    """Padded numeric inputs for a list of (conversation, index) items."""

    feats: dict[str, tuple[np.ndarray, np.ndarray]]
    history: dict[str, tuple[np.ndarray, np.ndarray]]
    emotion: np.ndarray
    intent: np.ndarray
    size: int
    ids: list = field(default_factory=list)


def _pad(seqs: Sequence[np.ndarray], dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=int)
    L = max(1, int(lengths.max(initial=0)))
    out = np.zeros((len(seqs), L, dim), dtype=dtype)
    for b, s in enumerate(seqs):
        if len(s):
            out[b, : len(s)] = s
    return out, lengths


def _utterance_feature(feats: UtteranceFeatures, m: str, config: EI2Config, uid) -> np.ndarray:
    x = feats.get(m)
    if x is None:
        raise DataError(f"utterance {uid}: missing enabled modality {m!r}")
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != config.input_dim(m):
        raise DataError(
            f"utterance {uid}: {m} features have shape {x.shape}, expected [L>=1, {config.input_dim(m)}]"
        )
    return x


def batch_features(feature_list: Sequence[UtteranceFeatures], config: EI2Config, ids=None):
    dtype = T.get_dtype()
    ids = ids or list(range(len(feature_list)))
    out = {}
    for m in config.modalities:
        seqs = [_utterance_feature(f, m, config, uid) for f, uid in zip(feature_list, ids)]
        out[m] = _pad(seqs, config.input_dim(m), dtype)
    return out


def batch_history(histories: Sequence[Sequence[UtteranceFeatures]], config: EI2Config, ids=None):
    """Each past utterance is mean-pooled over its frames before the recurrence."""
    dtype = T.get_dtype()
    ids = ids or list(range(len(histories)))
    out = {}
    for m in config.modalities:
        seqs = []
        for past, uid in zip(histories, ids):
            rows = [_utterance_feature(f, m, config, f"{uid} history").astype(dtype).mean(axis=0) for f in past]
            seqs.append(np.stack(rows) if rows else np.zeros((0, config.input_dim(m)), dtype=dtype))
        out[m] = _pad(seqs, config.input_dim(m), dtype)
    return out


def make_batch(items: Sequence[tuple[Conversation, int]], config: EI2Config, history: bool = True) -> Batch:
    ids = []
    current, past = [], []
    emo, intent = [], []
    for conv, n in items:
        if not 0 <= n < len(conv):
            raise ContractError(f"utterance index {n} outside dialogue {conv.dia_no} of length {len(conv)}")
        ids.append((conv.dia_no, n))
        current.append(conv.utterances[n].features)
        past.append([u.features for u in conv.utterances[:n]])
        rec = conv.utterances[n].record
        emo.append(EMOTIONS.index(rec.emotion))
        intent.append(INTENTS.index(rec.intent))
    return Batch(
        feats=batch_features(current, config, ids),
        history=batch_history(past, config, ids) if history and config.use_history else {},
        emotion=np.array(emo, dtype=int),
        intent=np.array(intent, dtype=int),
        size=len(items),
        ids=ids,
    )


# --- components ---------------------------------------------------------------


def encode_modality_tokens(state, config: EI2Config, feats, task: str) -> Tensor:
    """Per-modality utterance vectors stacked as ``[B, 3, hidden]`` (zeros for masked modalities)."""
    B = len(next(iter(feats.values()))[1])
    prefix = f"{task}_encoder."
    tokens = []
    for m in TOKEN_ORDER:
        if m in config.modalities:
            x, lengths = feats[m]
            p = sub_params(state, f"{prefix}{m}.")
            enc = nn.textcnn_encode if m == "textual" else nn.lstm_encode
            tokens.append(enc(p, x, lengths))
        else:
            tokens.append(T.tensor(np.zeros((B, config.hidden))))
    return T.stack(tokens, axis=1)


def encode_task_utterance(state, config: EI2Config, feats, task: str, return_weights: bool = False):
    """Task-specific fused representation ``f*_s``: ``[3, hidden]`` (or ``[B, 3, hidden]``)."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    single = isinstance(feats, UtteranceFeatures)
    if single:
        feats = batch_features([feats], config)
    tokens = encode_modality_tokens(state, config, feats, task)
    out, weights = nn.transformer_layer(
        sub_params(state, f"{task}_encoder.fusion."), tokens, config.heads, return_weights=True
    )
    if single:
        out, weights = out[0], weights[0]
    return (out, weights) if return_weights else out


def encode_history(state, config: EI2Config, past) -> Tensor:
    """History vector ``f_h``: ``[hidden]`` for a list of past utterances, or ``[B, hidden]``
    for a batched history dict.  Empty history gives exact zeros."""
    single = not isinstance(past, dict)
    hist = batch_history([list(past)], config) if single else past
    lengths = next(iter(hist.values()))[1]
    B = len(lengths)
    if lengths.max(initial=0) == 0:
        out = T.tensor(np.zeros((B, config.hidden)))
        return out[0] if single else out
    parts = []
    for m in TOKEN_ORDER:
        if m in config.modalities:
            x, lens = hist[m]
            parts.append(nn.gru_encode(sub_params(state, f"history.{m}."), x, lens))
        else:
            parts.append(T.tensor(np.zeros((B, config.hidden))))
    f_h = nn.linear(sub_params(state, "history.proj."), T.concat(parts, axis=-1))
    has_history = (lengths > 0).astype(T.get_dtype())[:, None]
    if not has_history.all():
        f_h = f_h * has_history
    return f_h[0] if single else f_h


def fuse_history(f_star, f_h, use_history: bool = True) -> Tensor:
    if not use_history:
        return f_star
    f_h = T._wrap(f_h)
    return f_star + T.reshape(f_h, f_h.shape[:-1] + (1, f_h.shape[-1]))


def binary_correlation(state, f_gamma, f_beta, branch: str, heads: int = 4, return_weights: bool = False):
    """Cross-attention: queries from the branch's own features, keys/values from the other task."""
    p = sub_params(state, f"interaction.{branch}.binary.")
    return nn.multi_head_attention(p, f_gamma, f_beta, f_beta, heads, return_weights)


def triple_interaction(state, f_gamma, f_gb, branch: str, heads: int = 4, return_weights: bool = False):
    p = sub_params(state, f"interaction.{branch}.triple.")
    return nn.multi_head_attention(p, f_gamma, f_gb, f_gb, heads, return_weights)


def gate_regulate(f_gbg, f_gb, use_gate: bool = True) -> Tensor:
    f_gbg = T._wrap(f_gbg)
    if not use_gate:
        return f_gbg
    return f_gbg * T.sigmoid(f_gbg + f_gb)


def classify(state, g_star, f, task: str, use_interaction: bool = True, return_features: bool = False):
    """Residual ``g = g* + f`` (or ``g = f`` without interaction), token mean, linear head."""
    g = f + g_star if use_interaction else T._wrap(f)
    pooled = T.reduce("mean", g, axis=-2)
    logits = nn.linear(sub_params(state, f"classifier.{task}."), pooled)
    return (logits, g) if return_features else logits


@dataclass
class ForwardTrace:
    f_star_e: Tensor
    f_star_i: Tensor
    f_h: Tensor | None
    f_e: Tensor
    f_i: Tensor
    f_ei: Tensor | None
    f_ie: Tensor | None
    f_eie: Tensor | None
    f_iei: Tensor | None
    g_star_e: Tensor | None
    g_star_i: Tensor | None
    g_e: Tensor
    g_i: Tensor
    logits_e: Tensor
    logits_i: Tensor
    attention: dict[str, Tensor] = field(default_factory=dict)


def forward_batch(state, config: EI2Config, batch: Batch):
    """Logits ``[B, n_emotions]``, ``[B, n_intents]`` and the intermediate trace."""
    att = {}
    f_star_e, att["fusion.emotion"] = encode_task_utterance(state, config, batch.feats, "emotion", True)
    f_star_i, att["fusion.intent"] = encode_task_utterance(state, config, batch.feats, "intent", True)
    f_h = None
    if config.use_history:
        f_h = encode_history(state, config, batch.history)
    f_e = fuse_history(f_star_e, f_h, config.use_history)
    f_i = fuse_history(f_star_i, f_h, config.use_history)
    f_ei = f_ie = f_eie = f_iei = g_star_e = g_star_i = None
    if config.use_interaction:
        h = config.heads
        f_ei, att["binary.emotion"] = binary_correlation(state, f_e, f_i, "emotion", h, True)
        f_ie, att["binary.intent"] = binary_correlation(state, f_i, f_e, "intent", h, True)
        f_eie, att["triple.emotion"] = triple_interaction(state, f_e, f_ei, "emotion", h, True)
        f_iei, att["triple.intent"] = triple_interaction(state, f_i, f_ie, "intent", h, True)
        g_star_e = gate_regulate(f_eie, f_ei, config.use_gate)
        g_star_i = gate_regulate(f_iei, f_ie, config.use_gate)
    logits_e, g_e = classify(state, g_star_e, f_e, "emotion", config.use_interaction, True)
    logits_i, g_i = classify(state, g_star_i, f_i, "intent", config.use_interaction, True)
    trace = ForwardTrace(
        f_star_e, f_star_i, f_h, f_e, f_i, f_ei, f_ie, f_eie, f_iei,
        g_star_e, g_star_i, g_e, g_i, logits_e, logits_i, att,
    )
    return logits_e, logits_i, trace


def forward(state, config: EI2Config, conversation: Conversation, n: int):
    """Single-utterance forward pass; logits have shapes ``[n_emotions]`` and ``[n_intents]``."""
    batch = make_batch([(conversation, n)], config)
    logits_e, logits_i, trace = forward_batch(state, config, batch)
    return logits_e[0], logits_i[0], trace


# --- checkpoints --------------------------------------------------------------


def save_model(path, state: Mapping[str, Tensor], config: EI2Config) -> None:
    """Write ``path`` (EIUP parameters) and ``path`` with a ``.json`` suffix (config)."""
    path = Path(path)
    nn.save_params(path, state)
    path.with_suffix(".json").write_text(config.to_json(), encoding="utf-8")


def load_model(path) -> tuple[ModelState, EI2Config]:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.is_file():
        raise DataError(f"missing config sidecar {sidecar}")
    config = EI2Config.from_json(sidecar.read_text(encoding="utf-8"))
    state = init_model(config, 0)
    state.load_arrays(nn.load_params(path))
    return state, config
