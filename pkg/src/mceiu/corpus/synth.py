"""Seeded synthetic corpora with a planted emotion/intent joint structure.

Each utterance draws an emotion (from the marginal, or from a sticky Markov
chain over the previous utterance's emotion) and then an intent from that
emotion's conditional row.  Every frame of every modality is the
concatenation of an emotion prototype (first half of the dimensions) and an
intent prototype (second half), plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import ContractError
from .io import (
    EMOTIONS,
    INTENTS,
    MODALITIES,
    AnnotationRecord,
    Conversation,
    Utterance,
    UtteranceFeatures,
    serialize_annotations_csv,
    write_corpus,
)
from .tools import split_corpus

# an emotion's most likely intent in the default planted structure
PARTNER_INTENT = {
    "happy": "encouraging",
    "surprise": "questioning",
    "sad": "sympathizing",
    "disgust": "suggesting",
    "anger": "acknowledging",
    "fear": "consoling",
    "neutral": "neutral",
}

DEFAULT_MARGINAL = (0.15, 0.10, 0.12, 0.08, 0.13, 0.12, 0.30)


def planted_conditional(strength: float = 0.8) -> tuple[tuple[float, ...], ...]:
    """Each emotion puts ``strength`` on its partner intent, the rest spread evenly."""
    if not 0.0 <= strength <= 1.0:
        raise ContractError(f"strength must be in [0, 1], got {strength}")
    rows = []
    for e in EMOTIONS:
        partner = INTENTS.index(PARTNER_INTENT[e])
        row = [(1.0 - strength) / (len(INTENTS) - 1)] * len(INTENTS)
        row[partner] = strength
        rows.append(tuple(row))
    return tuple(rows)


@dataclass(frozen=True)
class SynthConfig:
    n_conversations: int = 64
    utterances: tuple[int, int] = (8, 8)  # inclusive range per conversation
    emotion_marginal: tuple[float, ...] = DEFAULT_MARGINAL
    intent_conditional: tuple[tuple[float, ...], ...] = field(default_factory=planted_conditional)
    dims: tuple[int, int, int] = (48, 32, 24)  # textual, acoustic, visual
    lengths: tuple[tuple[int, int], ...] = ((4, 12), (6, 16), (2, 8))
    prototype_scale: float = 1.0
    noise: float = 1.0
    zero_intent_prototypes: bool = False
    stickiness: float = 0.0
    modalities: tuple[str, ...] = MODALITIES
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_conversations < 1:
            raise ContractError("n_conversations must be at least 1")
        lo, hi = self.utterances
        if not 1 <= lo <= hi:
            raise ContractError(f"bad utterance range {self.utterances}")
        _check_distribution(self.emotion_marginal, len(EMOTIONS), "emotion marginal")
        if len(self.intent_conditional) != len(EMOTIONS):
            raise ContractError(f"intent conditional needs {len(EMOTIONS)} rows")
        for e, row in zip(EMOTIONS, self.intent_conditional):
            _check_distribution(row, len(INTENTS), f"intent conditional row {e!r}")
        if not 0.0 <= self.stickiness < 1.0:
            raise ContractError(f"stickiness must be in [0, 1), got {self.stickiness}")
        if self.noise < 0 or self.prototype_scale < 0:
            raise ContractError("noise and prototype_scale must be non-negative")
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ContractError(f"dims must be three integers >= 2, got {self.dims}")
        if len(self.lengths) != 3 or any(not 1 <= a <= b for a, b in self.lengths):
            raise ContractError(f"bad length ranges {self.lengths}")
        if not self.modalities or set(self.modalities) - set(MODALITIES):
            raise ContractError(f"bad modalities {self.modalities}")
        return self

    def joint(self) -> np.ndarray:
        """The configured 7x9 joint distribution (for stickiness 0)."""
        return np.asarray(self.emotion_marginal)[:, None] * np.asarray(self.intent_conditional)

    def with_(self, **changes) -> "SynthConfig":
        return replace(self, **changes)


def _check_distribution(p, size: int, what: str) -> None:
    p = np.asarray(p, dtype=float)
    if p.shape != (size,):
        raise ContractError(f"{what} must have length {size}, got shape {p.shape}")
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"{what} must be non-negative and sum to 1 (sums to {p.sum()!r})")


@dataclass
class SynthCorpus:
    config: SynthConfig
    conversations: list[Conversation]
    prototypes: dict[str, tuple[np.ndarray, np.ndarray]]  # modality -> (emotion [7,d1], intent [9,d2])

    @property
    def records(self) -> list[AnnotationRecord]:
        return [u.record for c in self.conversations for u in c.utterances]

    def annotation_csv(self) -> str:
        return serialize_annotations_csv(self.records)

    def default_splits(self) -> dict[str, list[int]]:
        if len(self.conversations) < 10:
            ids = [c.dia_no for c in self.conversations]
            return {"train": ids, "valid": ids, "test": ids}
        return split_corpus(self.conversations, seed=self.config.seed).as_ids()

    def write(self, root, splits=None, folders=None) -> Path:
        write_corpus(root, self.conversations, self.default_splits() if splits is None else splits, folders)
        return Path(root)


def synth_corpus(config: SynthConfig | None = None) -> SynthCorpus:
    config = (config or SynthConfig()).validate()
    rng = np.random.default_rng(config.seed)
    marginal = np.asarray(config.emotion_marginal, dtype=float)
    conditional = np.asarray(config.intent_conditional, dtype=float)

    prototypes = {}
    for m, d in zip(MODALITIES, config.dims):
        d_e = d // 2
        emo = (config.prototype_scale * rng.normal(size=(len(EMOTIONS), d_e))).astype(np.float32)
        intent = (config.prototype_scale * rng.normal(size=(len(INTENTS), d - d_e))).astype(np.float32)
        if config.zero_intent_prototypes:
            intent[:] = 0.0
        prototypes[m] = (emo, intent)

    convs = []
    clock = 0
    for dia in range(config.n_conversations):
        n_utt = int(rng.integers(config.utterances[0], config.utterances[1] + 1))
        conv = Conversation(dia)
        prev = None
        for utt in range(n_utt):
            if prev is not None and rng.random() < config.stickiness:
                e = prev
            else:
                e = int(rng.choice(len(EMOTIONS), p=marginal))
            i = int(rng.choice(len(INTENTS), p=conditional[e]))
            prev = e
            feats = {}
            for m, (lo, hi) in zip(MODALITIES, config.lengths):
                length = int(rng.integers(lo, hi + 1))
                emo_p, int_p = prototypes[m]
                frame = np.concatenate([emo_p[e], int_p[i]])
                noise = rng.normal(size=(length, frame.size))
                if m in config.modalities:
                    feats[m] = (frame + config.noise * noise).astype(np.float32)
            begin = clock + int(rng.integers(100, 800))
            end = begin + int(rng.integers(800, 5000))
            clock = end
            words = " ".join(f"w{int(k)}" for k in rng.integers(0, 500, size=int(rng.integers(3, 16))))
            rec = AnnotationRecord(
                subtitle=words,
                dia_no=dia,
                utt_no=utt,
                video_name="synthetic",
                season=1,
                episode=dia // 50 + 1,
                begin_ms=begin,
                end_ms=end,
                emotion=EMOTIONS[e],
                intent=INTENTS[i],
                speaker=utt % 2,
            )
            conv.utterances.append(Utterance(rec, UtteranceFeatures(**feats)))
        convs.append(conv)
    return SynthCorpus(config, convs, prototypes)


def empirical_joint(records) -> np.ndarray:
    m = np.zeros((len(EMOTIONS), len(INTENTS)))
    for r in records:
        m[EMOTIONS.index(r.emotion), INTENTS.index(r.intent)] += 1
    return m / max(m.sum(), 1)
