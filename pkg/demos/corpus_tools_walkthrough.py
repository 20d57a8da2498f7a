"""Annotation finalisation on a toy batch: votes, agreement, splits, statistics."""

import numpy as np

from mceiu.corpus.io import EMOTIONS, INTENTS, AnnotationRecord
from mceiu.corpus.tools import (
    conversations_from_records,
    correlation_csv,
    correlation_matrix,
    dataset_stats,
    fleiss_kappa,
    majority_vote,
    parse_triples_csv,
    rating_counts,
    split_corpus,
)

triples_csv = """Dia_No,Utt_No,A1,A2,A3,Expert
0,0,happy,happy,sad,
0,1,neutral,neutral,neutral,
0,2,happy,sad,anger,fear
1,0,surprise,happy,surprise,
1,1,sad,anger,fear,
"""
triples, vocab = parse_triples_csv(triples_csv)
for t in triples:
    print(t.dia_no, t.utt_no, t.labels, "->", majority_vote(t.labels, vocab, t.expert))

k = fleiss_kappa(rating_counts(triples, vocab))
print(f"\nFleiss kappa {k.kappa:.4f} (observed {k.observed:.3f}, chance {k.expected:.3f})")
print("two items, three raters, (2,1) and (1,2):", fleiss_kappa([[2, 1], [1, 2]]).kappa)

# a fake finalised corpus of 30 dialogues
rng = np.random.default_rng(1)
records = []
clock = 0
for d in range(30):
    for u in range(int(rng.integers(3, 9))):
        begin = clock + 200
        clock = begin + int(rng.integers(900, 4000))
        records.append(AnnotationRecord(
            "so what do you think", d, u, "toy", 1, 1, begin, clock,
            EMOTIONS[rng.integers(7)], INTENTS[rng.integers(9)], u % 2))
convs = conversations_from_records(records)

split = split_corpus(convs, seed=0)
print("\nsplit sizes", len(split.train), len(split.valid), len(split.test))
print("label-distribution distance", split.distances)

print()
print(correlation_csv(correlation_matrix(records)))
print(dataset_stats(convs).to_text())
