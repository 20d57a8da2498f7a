"""Reading and writing MC-EIU-shaped corpora.

Layout on disk::

    {root}/annotations.csv                  11-column annotation table
    {root}/{modality_folder}/dia_{d}_utt_{u}.eiuf
    {root}/splits.json                      optional: {"train": [dia_no, ...], ...}

Timestamps are integer milliseconds throughout.
"""

from __future__ import annotations

import csv
import io
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import DataError, FormatError, ParseError

EMOTIONS = ("happy", "surprise", "sad", "disgust", "anger", "fear", "neutral")
INTENTS = (
    "questioning",
    "agreeing",
    "acknowledging",
    "sympathizing",
    "encouraging",
    "consoling",
    "suggesting",
    "wishing",
    "neutral",
)
MODALITIES = ("textual", "acoustic", "visual")
MODALITY_CODES = {"t": "textual", "a": "acoustic", "v": "visual"}
CSV_COLUMNS = (
    "Subtitle",
    "Dia_No",
    "Utt_No",
    "Video_name",
    "Season",
    "Episode",
    "Begin_timestamp",
    "End_timestamp",
    "Emotion",
    "Intent",
    "Speaker",
)
FEATURE_SUFFIX = ".eiuf"

_TS = re.compile(r"^\s*(\d{1,3}):(\d{2}):(\d{2})[,.](\d{3})\s*$")


@dataclass(frozen=True)
class AnnotationRecord:
    subtitle: str
    dia_no: int
    utt_no: int
    video_name: str
    season: int | None
    episode: int
    begin_ms: int
    end_ms: int
    emotion: str
    intent: str
    speaker: int

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.begin_ms


@dataclass
class UtteranceFeatures:
    """Per-utterance feature sequences; a modality may be absent."""

    textual: np.ndarray | None = None
    acoustic: np.ndarray | None = None
    visual: np.ndarray | None = None

    def get(self, modality: str) -> np.ndarray | None:
        return getattr(self, modality)


@dataclass
class Utterance:
    record: AnnotationRecord
    features: UtteranceFeatures


@dataclass
class Conversation:
    dia_no: int
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def records(self) -> list[AnnotationRecord]:
        return [u.record for u in self.utterances]


@dataclass
class SubtitleEntry:
    index: int
    begin_ms: int
    end_ms: int
    text: str


@dataclass
class Corpus:
    """Conversations plus a dialogue-level train/valid/test partition."""

    conversations: list[Conversation]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def split(self, name: str) -> list[Conversation]:
        if name not in self.splits:
            raise DataError(f"corpus has no {name!r} split (has {sorted(self.splits)})")
        wanted = set(self.splits[name])
        return [c for c in self.conversations if c.dia_no in wanted]


# --- timestamps ---------------------------------------------------------------


def parse_timestamp(text: str) -> int:
    """``"HH:MM:SS,mmm"`` to integer milliseconds."""
    m = _TS.match(text)
    if not m:
        raise ParseError(f"malformed timestamp {text!r}")
    h, mi, s, ms = (int(g) for g in m.groups())
    if mi > 59 or s > 59:
        raise ParseError(f"malformed timestamp {text!r}")
    return ((h * 60 + mi) * 60 + s) * 1000 + ms


def format_timestamp(ms: int) -> str:
    s, ms = divmod(int(ms), 1000)
    m, s = divmod(s, 60)
    h, m = divmod(m, 60)
    return f"{h:02d}:{m:02d}:{s:02d},{ms:03d}"


# --- annotation CSV -----------------------------------------------------------


def _label(value: str, vocab: Sequence[str], what: str, row: int) -> str:
    key = value.strip().lower()
    if key not in vocab:
        raise DataError(f"row {row}: unknown {what} label {value!r}")
    return key


def _int(value: str, what: str, row: int) -> int:
    try:
        return int(value.strip())
    except ValueError:
        raise DataError(f"row {row}: {what} is not an integer: {value!r}") from None


def parse_annotations_csv(data: bytes | str) -> list[AnnotationRecord]:
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    elif data.startswith("\ufeff"):
        data = data[1:]
    reader = csv.reader(io.StringIO(data, newline=""))
    header = next(reader, None)
    if header is None:
        return []
    names = [h.strip().lower() for h in header]
    expected = [c.lower() for c in CSV_COLUMNS]
    if names != expected:
        raise DataError(f"annotation header {header} does not match {list(CSV_COLUMNS)}")
    records = []
    seen: dict[tuple[int, int], int] = {}
    for row_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_COLUMNS):
            raise DataError(f"row {row_no}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
        sub, dia, utt, video, season, episode, begin, end, emo, intent, speaker = row
        try:
            begin_ms, end_ms = parse_timestamp(begin), parse_timestamp(end)
        except ParseError as exc:
            raise DataError(f"row {row_no}: {exc}") from None
        if begin_ms >= end_ms:
            raise DataError(f"row {row_no}: begin {begin} is not before end {end}")
        spk = _int(speaker, "speaker", row_no)
        if spk not in (0, 1):
            raise DataError(f"row {row_no}: speaker must be 0 or 1, got {speaker!r}")
        rec = AnnotationRecord(
            subtitle=sub,
            dia_no=_int(dia, "Dia_No", row_no),
            utt_no=_int(utt, "Utt_No", row_no),
            video_name=video.strip(),
            season=None if season.strip() in ("-", "") else _int(season, "season", row_no),
            episode=_int(episode, "episode", row_no),
            begin_ms=begin_ms,
            end_ms=end_ms,
            emotion=_label(emo, EMOTIONS, "emotion", row_no),
            intent=_label(intent, INTENTS, "intent", row_no),
            speaker=spk,
        )
        key = (rec.dia_no, rec.utt_no)
        if key in seen:
            raise DataError(f"row {row_no}: duplicate (Dia_No, Utt_No) {key}, first at row {seen[key]}")
        seen[key] = row_no
        records.append(rec)
    return records


def serialize_annotations_csv(records: Iterable[AnnotationRecord]) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow(
            [
                r.subtitle,
                r.dia_no,
                r.utt_no,
                r.video_name,
                "-" if r.season is None else r.season,
                r.episode,
                format_timestamp(r.begin_ms),
                format_timestamp(r.end_ms),
                r.emotion,
                r.intent,
                r.speaker,
            ]
        )
    return buf.getvalue()


# --- EIUF feature files -------------------------------------------------------

EIUF_MAGIC = b"EIUF"
EIUF_VERSION = 1


def feature_bytes(matrix: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    head = EIUF_MAGIC + struct.pack("<BBI", EIUF_VERSION, 0, arr.ndim)
    return head + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def feature_from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 10 or buf[:4] != EIUF_MAGIC:
        raise FormatError(f"{source}: not an EIUF feature file (bad magic)")
    version, dtype, ndim = struct.unpack_from("<BBI", buf, 4)
    if version != EIUF_VERSION:
        raise FormatError(f"{source}: unsupported EIUF version {version}")
    if dtype != 0:
        raise FormatError(f"{source}: unsupported EIUF dtype code {dtype}")
    off = 10 + 4 * ndim
    if len(buf) < off:
        raise FormatError(f"{source}: truncated EIUF header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 10)
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != expected:
        raise FormatError(f"{source}: payload is {len(buf) - off} bytes, shape {dims} needs {expected}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def write_feature_file(path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(feature_bytes(matrix))


def read_feature_file(path) -> np.ndarray:
    return feature_from_bytes(Path(path).read_bytes(), str(path))


def feature_name(dia_no: int, utt_no: int) -> str:
    return f"dia_{dia_no}_utt_{utt_no}{FEATURE_SUFFIX}"


def parse_modalities(spec: str | Iterable[str] | None) -> tuple[str, ...]:
    """``"ta"`` / ``"t,a"`` / ``["textual", ...]`` to canonical modality names."""
    if spec is None:
        return MODALITIES
    if isinstance(spec, str):
        items = [c for c in re.split(r"[,\s]+", spec.strip()) if c]
        if len(items) == 1 and items[0] not in MODALITIES:
            items = list(items[0])
    else:
        items = list(spec)
    out = set()
    for it in items:
        name = MODALITY_CODES.get(it, it)
        if name not in MODALITIES:
            raise DataError(f"unknown modality {it!r}")
        out.add(name)
    if not out:
        raise DataError("modality set must be non-empty")
    return tuple(m for m in MODALITIES if m in out)


def assemble_conversations(
    records: Sequence[AnnotationRecord],
    feature_root,
    modality_mask: Iterable[str] = MODALITIES,
    folders: Mapping[str, str] | None = None,
) -> list[Conversation]:
    """Group records by dialogue and attach the enabled modalities' features."""
    root = Path(feature_root)
    mods = parse_modalities(modality_mask)
    folders = {m: m for m in MODALITIES} | dict(folders or {})
    by_dia: dict[int, list[AnnotationRecord]] = {}
    for r in records:
        by_dia.setdefault(r.dia_no, []).append(r)
    missing = []
    conversations = []
    for dia in sorted(by_dia):
        recs = sorted(by_dia[dia], key=lambda r: r.utt_no)
        nos = [r.utt_no for r in recs]
        if nos != list(range(len(recs))):
            raise DataError(f"dialogue {dia}: Utt_No not contiguous from 0: {nos}")
        conv = Conversation(dia)
        for r in recs:
            feats = UtteranceFeatures()
            for m in mods:
                path = root / folders[m] / feature_name(r.dia_no, r.utt_no)
                if not path.is_file():
                    missing.append(str(path))
                    continue
                setattr(feats, m, read_feature_file(path))
            conv.utterances.append(Utterance(r, feats))
        conversations.append(conv)
    if missing:
        raise DataError(f"{len(missing)} missing feature file(s): " + ", ".join(missing))
    return conversations


def write_corpus(root, conversations: Sequence[Conversation], splits=None, folders=None) -> None:
    """Write annotations, feature files and (optionally) splits under ``root``."""
    root = Path(root)
    folders = {m: m for m in MODALITIES} | dict(folders or {})
    root.mkdir(parents=True, exist_ok=True)
    records = [u.record for c in conversations for u in c.utterances]
    (root / "annotations.csv").write_text(serialize_annotations_csv(records), encoding="utf-8")
    for m in MODALITIES:
        present = [(u.record, u.features.get(m)) for c in conversations for u in c.utterances]
        present = [(r, x) for r, x in present if x is not None]
        if not present:
            continue
        d = root / folders[m]
        d.mkdir(exist_ok=True)
        for r, x in present:
            write_feature_file(d / feature_name(r.dia_no, r.utt_no), x)
    if splits is not None:
        write_splits(root / "splits.json", splits)


def write_splits(path, splits: Mapping[str, Sequence[int]]) -> None:
    body = {k: [int(x) for x in v] for k, v in splits.items()}
    Path(path).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_splits(path) -> dict[str, list[int]]:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read splits file {path}: {exc}") from None
    return {k: [int(x) for x in v] for k, v in body.items()}


def load_corpus(root, modality_mask=MODALITIES, folders=None) -> Corpus:
    """Read a corpus directory; ``splits`` is empty when no splits.json exists."""
    root = Path(root)
    csv_path = root / "annotations.csv"
    if not csv_path.is_file():
        raise DataError(f"no annotations.csv under {root}")
    records = parse_annotations_csv(csv_path.read_bytes())
    convs = assemble_conversations(records, root, modality_mask, folders)
    splits = read_splits(root / "splits.json") if (root / "splits.json").is_file() else {}
    return Corpus(convs, splits)


# --- subtitles ----------------------------------------------------------------

_SUB_TIME = re.compile(r"^\s*(\S+)\s*-->\s*(\S+)\s*$")


def parse_subtitle_file(data: bytes | str) -> list[SubtitleEntry]:
    """Parse block-structured subtitles (index, time range, text lines, blank)."""
    if isinstance(data, bytes):
        data = data.decode("utf-8-sig")
    data = data.lstrip("\ufeff")
    lines = data.splitlines()
    entries = []
    i, n = 0, len(lines)
    while i < n:
        if not lines[i].strip():
            i += 1
            continue
        index_line = i + 1
        try:
            index = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"line {index_line}: expected a subtitle index, got {lines[i]!r}") from None
        i += 1
        if i >= n:
            raise ParseError(f"line {index_line}: subtitle {index} has no timestamp line")
        m = _SUB_TIME.match(lines[i])
        if not m:
            raise ParseError(f"line {i + 1}: malformed timestamp line {lines[i]!r}")
        try:
            begin, end = parse_timestamp(m.group(1)), parse_timestamp(m.group(2))
        except ParseError as exc:
            raise ParseError(f"line {i + 1}: {exc}") from None
        if begin > end:
            raise DataError(f"line {i + 1}: subtitle {index} begins after it ends")
        i += 1
        text = []
        while i < n and lines[i].strip():
            text.append(lines[i].strip())
            i += 1
        entries.append(SubtitleEntry(index, begin, end, " ".join(text)))
    entries.sort(key=lambda e: (e.begin_ms, e.index))
    return entries


def serialize_subtitles(entries: Iterable[SubtitleEntry]) -> str:
    blocks = [
        f"{e.index}\n{format_timestamp(e.begin_ms)} --> {format_timestamp(e.end_ms)}\n{e.text}\n"
        for e in entries
    ]
    return "\n".join(blocks)
