"""Corpus formats, finalisation tools and the synthetic generator."""

from .io import (
    CSV_COLUMNS,
    EMOTIONS,
    INTENTS,
    MODALITIES,
    AnnotationRecord,
    Conversation,
    Corpus,
    SubtitleEntry,
    Utterance,
    UtteranceFeatures,
    assemble_conversations,
    load_corpus,
    parse_annotations_csv,
    parse_subtitle_file,
    read_feature_file,
    serialize_annotations_csv,
    write_corpus,
    write_feature_file,
)
from .synth import SynthConfig, synth_corpus
from .tools import (
    AnnotationTriple,
    KappaResult,
    NoMajority,
    correlation_matrix,
    dataset_stats,
    fleiss_kappa,
    majority_vote,
    split_corpus,
)
