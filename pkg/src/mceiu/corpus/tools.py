"""Annotation finalisation and corpus analysis.

- majority voting over three annotators, with expert escalation as data
- Fleiss's kappa from an items x categories count matrix
- dialogue-level train/valid/test splitting with label balancing
- emotion x intent co-occurrence matrices
- corpus statistics (conversation/utterance counts, durations, words, label diversity)
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from ..errors import ContractError, DataError
from .io import EMOTIONS, INTENTS, MODALITIES, AnnotationRecord, Conversation, Utterance, UtteranceFeatures


# --- majority voting ----------------------------------------------------------


class _NoMajority:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NoMajority"

    def __bool__(self) -> bool:
        return False


NoMajority = _NoMajority()


@dataclass(frozen=True)
class AnnotationTriple:
    dia_no: int
    utt_no: int
    labels: tuple
    expert: str | None = None

    def __post_init__(self):
        if len(self.labels) != 3:
            raise ContractError(f"({self.dia_no}, {self.utt_no}): expected 3 labels, got {len(self.labels)}")


def _norm(label: str, vocabulary: Sequence[str]) -> str:
    key = str(label).strip().lower()
    if key not in vocabulary:
        raise DataError(f"label {label!r} is not in the vocabulary {tuple(vocabulary)}")
    return key


def majority_vote(labels: Sequence[str], vocabulary: Sequence[str] = EMOTIONS, expert: str | None = None):
    """The label at least two of three annotators chose, else the expert's label, else ``NoMajority``."""
    if len(labels) != 3:
        raise ContractError(f"majority vote needs exactly 3 labels, got {len(labels)}")
    labels = [_norm(l, vocabulary) for l in labels]
    label, count = Counter(labels).most_common(1)[0]
    if count >= 2:
        return label
    if expert is not None and str(expert).strip():
        return _norm(expert, vocabulary)
    return NoMajority


def detect_vocabulary(labels: Iterable[str]) -> tuple[str, ...]:
    seen = {str(l).strip().lower() for l in labels if str(l).strip()}
    if seen <= set(EMOTIONS):
        return EMOTIONS
    if seen <= set(INTENTS):
        return INTENTS
    raise DataError(f"labels fit neither the emotion nor the intent vocabulary: {sorted(seen)}")


def parse_triples_csv(data: bytes | str, vocabulary: Sequence[str] | None = None) -> tuple[list[AnnotationTriple], tuple]:
    """Columns: Dia_No, Utt_No, three annotator labels, optional expert label."""
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    rows = [r for r in csv.reader(io.StringIO(data)) if r and any(c.strip() for c in r)]
    if not rows:
        return [], tuple(vocabulary or EMOTIONS)
    header, body = rows[0], rows[1:]
    if len(header) not in (5, 6):
        raise DataError(f"triples header must have 5 or 6 columns, got {header}")
    if vocabulary is None:
        vocabulary = detect_vocabulary(c for r in body for c in r[2:])
    out = []
    for k, r in enumerate(body, start=2):
        if len(r) not in (5, 6):
            raise DataError(f"row {k}: expected 5 or 6 fields, got {len(r)}")
        try:
            dia, utt = int(r[0]), int(r[1])
            labels = tuple(_norm(x, vocabulary) for x in r[2:5])
            expert = _norm(r[5], vocabulary) if len(r) == 6 and r[5].strip() else None
        except (ValueError, DataError) as exc:
            raise DataError(f"row {k}: {exc}") from None
        out.append(AnnotationTriple(dia, utt, labels, expert))
    return out, tuple(vocabulary)


def rating_counts(triples: Sequence[AnnotationTriple], vocabulary: Sequence[str]) -> np.ndarray:
    index = {l: j for j, l in enumerate(vocabulary)}
    counts = np.zeros((len(triples), len(vocabulary)), dtype=np.int64)
    for i, t in enumerate(triples):
        for l in t.labels:
            counts[i, index[_norm(l, vocabulary)]] += 1
    return counts


# --- Fleiss's kappa -----------------------------------------------------------


@dataclass
class KappaResult:
    kappa: float
    observed: float  # mean per-item agreement
    expected: float  # chance agreement from the category marginals
    n_items: int
    n_raters: int
    degenerate: bool = False


def fleiss_kappa(counts) -> KappaResult:
    """Fleiss's kappa for an ``items x categories`` matrix of rating counts.

    If every rating falls in one category the chance agreement is 1 and the
    formula is 0/0; that case returns kappa = 1 with ``degenerate=True``.
    """
    n = np.asarray(counts)
    if n.ndim != 2 or n.shape[0] == 0:
        raise ContractError(f"counts must be a non-empty 2-D matrix, got shape {n.shape}")
    if (n < 0).any() or not np.array_equal(n, np.round(n)):
        raise ContractError("counts must be non-negative integers")
    n = n.astype(np.int64)
    row_sums = n.sum(axis=1)
    r = int(row_sums[0])
    if not (row_sums == r).all():
        raise ContractError("every item must have the same number of ratings")
    if r < 2:
        raise ContractError(f"need at least 2 raters per item, got {r}")
    N = n.shape[0]
    # integer counts make every term rational; round once at the end
    p_bar = Fraction(int((n * n).sum()) - N * r, N * r * (r - 1))
    p_e = Fraction(int((n.sum(axis=0) ** 2).sum()), (N * r) ** 2)
    if p_e >= 1:
        return KappaResult(1.0, float(p_bar), float(p_e), N, r, degenerate=True)
    return KappaResult(float((p_bar - p_e) / (1 - p_e)), float(p_bar), float(p_e), N, r)


def kappa_csv(results: dict[str, KappaResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "kappa", "observed", "expected", "items", "raters", "degenerate"])
    for name, k in results.items():
        w.writerow([name, repr(k.kappa), repr(k.observed), repr(k.expected), k.n_items, k.n_raters, int(k.degenerate)])
    return buf.getvalue()


# --- splitting ----------------------------------------------------------------


@dataclass
class SplitResult:
    train: list[Conversation]
    valid: list[Conversation]
    test: list[Conversation]
    distances: dict[str, float] = field(default_factory=dict)

    def as_ids(self) -> dict[str, list[int]]:
        return {name: sorted(c.dia_no for c in getattr(self, name)) for name in ("train", "valid", "test")}


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder rounding, so each size is within 1 of its exact share."""
    ratios = np.asarray(ratios, dtype=float)
    exact = n * ratios / ratios.sum()
    sizes = np.floor(exact).astype(int)
    for j in np.argsort(-(exact - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[j] += 1
    return sizes.tolist()


def _label_counts(conv: Conversation) -> np.ndarray:
    v = np.zeros(len(EMOTIONS) + len(INTENTS))
    for u in conv.utterances:
        v[EMOTIONS.index(u.record.emotion)] += 1
        v[len(EMOTIONS) + INTENTS.index(u.record.intent)] += 1
    return v


def _distance(counts: np.ndarray, global_dist: np.ndarray) -> np.ndarray:
    """Per-vocabulary L1 distance of one subset's label distribution from the global one."""
    out = []
    for sl in (slice(0, len(EMOTIONS)), slice(len(EMOTIONS), None)):
        c = counts[sl]
        total = c.sum()
        out.append(np.abs(c / total - global_dist[sl]).sum() if total else 0.0)
    return np.array(out)


def split_corpus(
    conversations: Sequence[Conversation],
    ratios: Sequence[float] = (7, 1, 2),
    seed: int = 0,
    balance_tolerance: float = 0.0,
    candidates: int = 16,
) -> SplitResult:
    """Dialogue-level partition with greedy label balancing.

    Dialogues are shuffled and cut at the target sizes, then one pass tries
    up to ``candidates`` random swaps per dialogue across subsets, keeping a
    swap whenever it lowers the summed L1 distance between each subset's
    emotion/intent distributions and the corpus-wide ones.  The pass stops
    early once the distance is at most ``balance_tolerance``.
    """
    convs = list(conversations)
    if len(convs) < 10:
        raise ContractError(f"need at least 10 conversations to split, got {len(convs)}")
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ContractError(f"ratios must be three positive numbers, got {ratios}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(convs))
    sizes = split_sizes(len(convs), ratios)
    assign = np.empty(len(convs), dtype=int)
    assign[order[: sizes[0]]] = 0
    assign[order[sizes[0] : sizes[0] + sizes[1]]] = 1
    assign[order[sizes[0] + sizes[1] :]] = 2

    labels = np.stack([_label_counts(c) for c in convs])
    total = labels.sum(axis=0)
    global_dist = np.concatenate(
        [total[: len(EMOTIONS)] / max(total[: len(EMOTIONS)].sum(), 1),
         total[len(EMOTIONS) :] / max(total[len(EMOTIONS) :].sum(), 1)]
    )
    subset = np.stack([labels[assign == s].sum(axis=0) for s in range(3)])
    cost = np.array([_distance(subset[s], global_dist).sum() for s in range(3)])

    for i in order:
        if cost.sum() <= balance_tolerance:
            break
        others = np.flatnonzero(assign != assign[i])
        for j in rng.choice(others, size=min(candidates, len(others)), replace=False):
            a, b = assign[i], assign[j]
            new_a = subset[a] - labels[i] + labels[j]
            new_b = subset[b] - labels[j] + labels[i]
            ca, cb = _distance(new_a, global_dist).sum(), _distance(new_b, global_dist).sum()
            if ca + cb < cost[a] + cost[b] - 1e-12:
                subset[a], subset[b] = new_a, new_b
                cost[a], cost[b] = ca, cb
                assign[i], assign[j] = b, a
                break

    parts = [[convs[k] for k in range(len(convs)) if assign[k] == s] for s in range(3)]
    per_vocab = sum(_distance(subset[s], global_dist) for s in range(3))
    return SplitResult(*parts, distances={"emotion": float(per_vocab[0]), "intent": float(per_vocab[1])})


# --- correlation matrices -----------------------------------------------------


def correlation_matrix(records: Iterable[AnnotationRecord]) -> np.ndarray:
    """Counts of utterances per (emotion, intent) pair, rows in EMOTIONS order."""
    m = np.zeros((len(EMOTIONS), len(INTENTS)), dtype=np.int64)
    for r in records:
        m[EMOTIONS.index(r.emotion), INTENTS.index(r.intent)] += 1
    return m


def correlation_csv(matrix: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["emotion"] + list(INTENTS))
    for e, row in zip(EMOTIONS, matrix):
        w.writerow([e] + [int(x) for x in row])
    return buf.getvalue()


_GLYPHS = " .:-=+*#%@"


def correlation_heatmap(matrix: np.ndarray) -> str:
    """Text heatmap: one glyph per cell scaled by count, plus the raw counts."""
    peak = matrix.max()
    lines = ["      " + " ".join(i[:3] for i in INTENTS)]
    for e, row in zip(EMOTIONS, matrix):
        cells = []
        for x in row:
            k = 0 if peak == 0 else int(round((len(_GLYPHS) - 1) * x / peak))
            cells.append(_GLYPHS[k] * 3)
        lines.append(f"{e[:3]:<5} " + " ".join(cells) + "   " + " ".join(f"{int(x):>5}" for x in row))
    return "\n".join(lines) + "\n"


# --- statistics ---------------------------------------------------------------


@dataclass
class CorpusStats:
    modalities: tuple
    n_conversations: int
    n_utterances: int
    duration_hours: float | None
    avg_words_per_utterance: float | None
    avg_duration_per_utterance: float | None  # seconds
    avg_utterances_per_conversation: float | None
    avg_emotions_per_conversation: float | None
    avg_intents_per_conversation: float | None
    missing: tuple = ()

    ROWS = (
        ("# Modalities", "modalities"),
        ("# Conversations", "n_conversations"),
        ("# Utterances", "n_utterances"),
        ("# Duration (hours)", "duration_hours"),
        ("Avg. Words per Utterance", "avg_words_per_utterance"),
        ("Avg. Duration per Utterance (seconds)", "avg_duration_per_utterance"),
        ("Avg. Utterances per Conversation", "avg_utterances_per_conversation"),
        ("Avg. Emotions per Conversation", "avg_emotions_per_conversation"),
        ("Avg. Intents per Conversation", "avg_intents_per_conversation"),
    )

    def rows(self) -> list[tuple[str, str]]:
        out = []
        for label, attr in self.ROWS:
            v = getattr(self, attr)
            if v is None:
                text = "n/a"
            elif attr == "modalities":
                text = "(" + ", ".join(m[0] for m in v) + ")" if v else "n/a"
            elif isinstance(v, float):
                text = f"{v:.2f}"
            else:
                text = str(v)
            out.append((label, text))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["statistic", "value"])
        w.writerows(self.rows())
        return buf.getvalue()

    def to_text(self) -> str:
        rows = self.rows()
        width = max(len(l) for l, _ in rows)
        return "\n".join(f"{l:<{width}}  {v:>10}" for l, v in rows) + "\n"


def count_words(text: str) -> int:
    """Whitespace tokens; text with no whitespace at all counts characters instead."""
    text = text.strip()
    if not text:
        return 0
    tokens = text.split()
    return len(tokens) if len(tokens) > 1 else len(tokens[0]) if _is_unspaced_script(tokens[0]) else 1


def _is_unspaced_script(token: str) -> bool:
    # a single token counts per character only for scripts written without spaces
    return any(ord(ch) > 0x2E7F for ch in token)


def dataset_stats(conversations: Sequence[Conversation]) -> CorpusStats:
    convs = [c for c in conversations if len(c)]
    records = [u.record for c in convs for u in c.utterances]
    n_conv, n_utt = len(convs), len(records)
    missing = []
    present = []
    for m in MODALITIES:
        if n_utt and all(u.features.get(m) is not None for c in convs for u in c.utterances):
            present.append(m)
    if not present:
        missing.append("modalities")
    durations = [r.duration_ms for r in records]
    texts = [r.subtitle for r in records]
    if not n_utt:
        missing.extend(["duration", "words", "per-conversation averages"])
        return CorpusStats(tuple(present), n_conv, 0, None, None, None, None, None, None, tuple(missing))
    total_ms = sum(durations)
    return CorpusStats(
        modalities=tuple(present),
        n_conversations=n_conv,
        n_utterances=n_utt,
        duration_hours=total_ms / 3_600_000,
        avg_words_per_utterance=sum(count_words(t) for t in texts) / n_utt,
        avg_duration_per_utterance=total_ms / 1000 / n_utt,
        avg_utterances_per_conversation=n_utt / n_conv,
        avg_emotions_per_conversation=float(np.mean([len({r.emotion for r in c.records}) for c in convs])),
        avg_intents_per_conversation=float(np.mean([len({r.intent for r in c.records}) for c in convs])),
        missing=tuple(missing),
    )


def conversations_from_records(records: Iterable[AnnotationRecord]) -> list[Conversation]:
    """Group records into feature-less conversations (for statistics and splitting)."""
    by_dia: dict[int, list[AnnotationRecord]] = {}
    for r in records:
        by_dia.setdefault(r.dia_no, []).append(r)
    return [
        Conversation(d, [Utterance(r, UtteranceFeatures()) for r in sorted(by_dia[d], key=lambda r: r.utt_no)])
        for d in sorted(by_dia)
    ]
