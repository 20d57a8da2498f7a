"""Acceptance criteria, one test per criterion.

Each test prints a single ``[n] PASS|FAIL ...`` line to the terminal (even
under capture) and then asserts, so a failing criterion both shows in the
summary and fails the run.
"""

import contextlib
import itertools
import time
from fractions import Fraction

import numpy as np
import pytest
from conftest import INTENT_BRANCH, noise_history, perturb_intent_branch, random_conversation, tiny_config

from mceiu import tensor as T
from mceiu.ablation import MODULE_ABLATIONS, ablation_specs, ablation_suite
from mceiu.cli import main
from mceiu.corpus.io import (
    EMOTIONS,
    Corpus,
    feature_bytes,
    feature_from_bytes,
    parse_annotations_csv,
    serialize_annotations_csv,
)
from mceiu.corpus.synth import SynthConfig, empirical_joint, planted_conditional, synth_corpus
from mceiu.corpus.tools import NoMajority, correlation_matrix, fleiss_kappa, majority_vote, split_corpus
from mceiu.gradcheck import TOLERANCE, run_audit
from mceiu.metrics import metrics_from_predictions
from mceiu.model import EI2Config, forward, forward_batch, gate_regulate, init_model, make_batch
from mceiu.training import TrainConfig, evaluate, focal_loss, train


@contextlib.contextmanager
def criterion(capsys, number, title):
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        with capsys.disabled():
            print(f"\n[{number}] FAIL {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    detail = "; ".join(notes)
    with capsys.disabled():
        print(f"\n[{number}] PASS {title} ({detail}; {time.perf_counter() - start:.1f} s)")


def test_1_gradient_audit(capsys):
    with criterion(capsys, 1, "gradient audit, every block and the full model at 5 points") as notes:
        start = time.perf_counter()
        rows = run_audit(seeds=range(5))
        elapsed = time.perf_counter() - start
        worst = max(rows, key=lambda r: r.error)
        notes.append(f"{len(rows)} audits, worst {worst.error:.2e} ({worst.name} seed {worst.seed})")
        assert all(r.error < TOLERANCE for r in rows), [(r.name, r.seed, r.error) for r in rows if not r.passed]
        assert elapsed < 300, f"audit took {elapsed:.0f} s"


def _logits_for_pt(pt, C=5):
    return np.log(np.array([pt] + [(1 - pt) / (C - 1)] * (C - 1)))


def test_2_loss_identities(capsys):
    with criterion(capsys, 2, "focal-loss identities") as notes:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            C = int(rng.integers(2, 10))
            z, y = rng.normal(scale=3, size=C), int(rng.integers(C))
            ce = np.logaddexp.reduce(z) - z[y]
            worst = max(worst, abs(focal_loss(z, y, 0.0).item() - ce))
        notes.append(f"gamma=0 vs CE worst {worst:.1e}")
        assert worst < 1e-9
        half = focal_loss(_logits_for_pt(0.5), 0, 0.0).item()
        assert abs(half - 0.693147) < 1e-6
        p9 = focal_loss(_logits_for_pt(0.9), 0, 2.0).item()
        notes.append(f"pt=0.9 gamma=2 gives {p9:.8f}")
        assert abs(p9 - 0.00105360) < 1e-8


def test_3_attention_and_gate_invariants(capsys):
    with criterion(capsys, 3, "attention rows sum to 1, gate bound, gate probe") as notes:
        rng = np.random.default_rng(3)
        cfg = tiny_config()
        worst_row = 0.0
        for k in range(100):
            state = init_model(cfg, k)
            convs = [random_conversation(rng, d, int(rng.integers(1, 5)), cfg) for d in range(2)]
            items = [(c, int(rng.integers(len(c)))) for c in convs]
            _, _, tr = forward_batch(state, cfg, make_batch(items, cfg))
            assert len(tr.attention) == 6
            for w in tr.attention.values():
                worst_row = max(worst_row, float(np.abs(w.data.sum(axis=-1) - 1.0).max()))
            for g, f in ((tr.g_star_e, tr.f_eie), (tr.g_star_i, tr.f_iei)):
                assert (np.abs(g.data) <= np.abs(f.data)).all()
        for _ in range(1000):
            a, b = rng.normal(scale=10, size=(2, 3, 8))
            assert (np.abs(gate_regulate(a, b).data) <= np.abs(a)).all()
        probe = gate_regulate(1.0, 0.0).item()
        notes.append(f"worst row-sum error {worst_row:.1e}, probe {probe:.6f}")
        assert worst_row < 1e-6
        assert abs(probe - 0.731058) < 1e-6


def test_4_dependency_cuts(capsys):
    with criterion(capsys, 4, "ablation dependency cuts hold bitwise") as notes:
        rng = np.random.default_rng(4)
        base = tiny_config()
        cut = base.with_(**MODULE_ABLATIONS["interaction"][1])
        state = init_model(cut, 0)
        conv = random_conversation(rng, 0, 6, cut)
        ref = [forward(state, cut, conv, n)[0].data.tobytes() for n in range(6)]
        n_params = sum(p.data.size for k, p in state.items() if k.startswith(INTENT_BRANCH))
        for _ in range(20):
            s = state.clone()
            perturb_intent_branch(s, rng, scale=float(rng.uniform(0.1, 10)))
            assert [forward(s, cut, conv, n)[0].data.tobytes() for n in range(6)] == ref
        cut = base.with_(**MODULE_ABLATIONS["history"][1])
        state = init_model(cut, 1)
        ref = [tuple(x.data.tobytes() for x in forward(state, cut, conv, n)[:2]) for n in range(6)]
        for _ in range(20):
            for n in range(6):
                noisy = noise_history(conv, n, rng)
                assert tuple(x.data.tobytes() for x in forward(state, cut, noisy, n)[:2]) == ref[n]
        notes.append(f"20 perturbations of {n_params} intent-branch values; 20 history replacements")


def test_5_overfit_oracle(capsys):
    with criterion(capsys, 5, "overfit oracle, train-set WAF >= 0.95 on both tasks") as notes:
        sc = synth_corpus(SynthConfig(n_conversations=64, utterances=(8, 8), intent_conditional=planted_conditional(0.8), seed=0))
        convs = sc.conversations
        corpus = Corpus(convs, {"train": [c.dia_no for c in convs]})
        mcfg = EI2Config(hidden=32, heads=4, text_dim=48, audio_dim=32, visual_dim=24, filters_per_width=16, ff_dim=64)
        tcfg = TrainConfig(learning_rate=2e-4, epochs_train=40, pretrained_init=False)
        start = time.perf_counter()
        state, report = train(corpus, tcfg, mcfg)
        m = evaluate(state, mcfg, convs)
        elapsed = time.perf_counter() - start
        notes.append(f"{tcfg.epochs_train} epochs, emotion {m['emotion'].waf:.3f}, intent {m['intent'].waf:.3f}")
        assert m["emotion"].waf >= 0.95 and m["intent"].waf >= 0.95
        assert elapsed < 600


def test_6_interaction_benefit(capsys):
    with criterion(capsys, 6, "interaction benefit on held-out intent WAF") as notes:
        cfg = SynthConfig(n_conversations=64, seed=1, noise=4.0,
                          intent_conditional=planted_conditional(1.0), zero_intent_prototypes=True)
        sc = synth_corpus(cfg)
        corpus = Corpus(sc.conversations, sc.default_splits())
        mcfg = EI2Config(hidden=32, heads=4, text_dim=48, audio_dim=32, visual_dim=24, filters_per_width=16, ff_dim=64)
        tcfg = TrainConfig(epochs_train=15, pretrained_init=False, n_runs=3, seed=0)
        specs = [s for s in ablation_specs() if s.name in ("EI2 (full)", "w/o Interaction")]
        report = ablation_suite(corpus, mcfg, tcfg, specs)
        wins, n = report.interaction_benefit()
        assert "Interaction benefit" in report.to_text()
        full, cut = report.by_name("EI2 (full)"), report.by_name("w/o Interaction")
        notes.append(f"full beats w/o Interaction in {wins} of {n} seeds, "
                     f"mean intent WAF {full.mean('intent'):.3f} vs {cut.mean('intent'):.3f}")
        assert n == 3 and wins >= 2


def brute_waf(yt, yp, C):
    total = 0.0
    for c in range(C):
        tp = sum(1 for t, p in zip(yt, yp) if t == c and p == c)
        fp = sum(1 for t, p in zip(yt, yp) if t != c and p == c)
        fn = sum(1 for t, p in zip(yt, yp) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        total += (tp + fn) / len(yt) * (2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return total


def kappa_direct(counts):
    N, r = len(counts), sum(counts[0])
    P_bar = sum(Fraction(sum(x * x for x in row) - r, r * (r - 1)) for row in counts) / N
    P_e = sum(Fraction(sum(row[j] for row in counts), N * r) ** 2 for j in range(len(counts[0])))
    return float((P_bar - P_e) / (1 - P_e))


def test_7_oracle_equivalence(capsys):
    with criterion(capsys, 7, "WAF, kappa and voting match independent oracles") as notes:
        rng = np.random.default_rng(7)
        waf_err = 0.0
        for _ in range(50):
            C, n = int(rng.integers(2, 10)), int(rng.integers(1, 100))
            yt, yp = rng.integers(C, size=n), rng.integers(C, size=n)
            waf_err = max(waf_err, abs(metrics_from_predictions(yt, yp, tuple(range(C))).waf - brute_waf(yt, yp, C)))
        assert waf_err < 1e-12
        kappa_err, done = 0.0, 0
        while done < 50:
            N, k, r = int(rng.integers(2, 40)), int(rng.integers(2, 10)), int(rng.integers(2, 8))
            counts = np.stack([np.bincount(rng.integers(k, size=r), minlength=k) for _ in range(N)])
            if (counts.sum(axis=0) == N * r).any():
                continue
            kappa_err = max(kappa_err, abs(fleiss_kappa(counts).kappa - kappa_direct(counts.tolist())))
            done += 1
        assert kappa_err < 1e-9
        assert fleiss_kappa([[2, 1], [1, 2]]).kappa == -1 / 3
        for a, b, c in itertools.product(EMOTIONS, repeat=3):
            expected = a if a in (b, c) else b if b == c else NoMajority
            assert majority_vote([a, b, c]) == expected if expected is not NoMajority else majority_vote([a, b, c]) is NoMajority
        notes.append(f"WAF worst {waf_err:.1e}, kappa worst {kappa_err:.1e}, 343 triples")


def test_8_corpus_plumbing(capsys):
    with criterion(capsys, 8, "corpus plumbing round-trips, split, correlation, synthetic joint") as notes:
        sc = synth_corpus(SynthConfig(n_conversations=10, dims=(6, 4, 4)))
        text = sc.annotation_csv()
        assert serialize_annotations_csv(parse_annotations_csv(text)) == text
        for c in sc.conversations:
            for u in c.utterances:
                for m in ("textual", "acoustic", "visual"):
                    blob = feature_bytes(u.features.get(m))
                    assert feature_bytes(feature_from_bytes(blob)) == blob
        split = split_corpus(sc.conversations, seed=0)
        assert (len(split.train), len(split.valid), len(split.test)) == (7, 1, 2)
        ids = split.as_ids()
        assert sorted(ids["train"] + ids["valid"] + ids["test"]) == list(range(10))
        for part in (split.train, split.valid, split.test):
            for c in part:
                assert c in sc.conversations and len(c) == 8
        assert correlation_matrix(sc.records).sum() == len(sc.records)
        big = SynthConfig(n_conversations=1250, dims=(2, 2, 2), lengths=((1, 1),) * 3, seed=8)
        records = synth_corpus(big).records
        l1 = float(np.abs(empirical_joint(records) - big.joint()).sum())
        notes.append(f"{len(records)} synthetic utterances, joint L1 {l1:.4f}")
        assert len(records) == 10_000 and l1 < 0.05


def test_9_determinism(capsys, tmp_path):
    with criterion(capsys, 9, "two runs of one manifest are bitwise identical") as notes:
        cfg = tmp_path / "run.cfg"
        cfg.write_text("hidden = 8\nheads = 2\nkernel_widths = 1, 2\nfilters_per_width = 3\nff_dim = 16\n"
                       "epochs_pretrain = 2\nepochs_train = 3\nlearning_rate = 0.002\n"
                       "synth.n_conversations = 12\ndims = 6, 4, 4\n")
        outs = []
        for k in range(2):
            corpus, run = tmp_path / f"corpus{k}", tmp_path / f"run{k}"
            assert main(["synth", "--config", str(cfg), "--seed", "7", "--out", str(corpus)]) == 0
            assert main(["train", "--corpus", str(corpus), "--config", str(cfg), "--seed", "7",
                         "--precision", "f64", "--out", str(run)]) == 0
            outs.append((corpus, run))
        compared = 0
        for (c0, r0), (c1, r1) in [outs]:
            for base0, base1 in ((c0, c1), (r0, r1)):
                files = sorted(p.relative_to(base0) for p in base0.rglob("*") if p.is_file() and p.name != "manifest.json")
                assert files == sorted(p.relative_to(base1) for p in base1.rglob("*") if p.is_file() and p.name != "manifest.json")
                for f in files:
                    assert (base0 / f).read_bytes() == (base1 / f).read_bytes(), f
                    compared += 1
        notes.append(f"{compared} output files identical, including model.eiup")
