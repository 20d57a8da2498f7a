import numpy as np
import pytest

from mceiu import tensor as T
from mceiu.corpus.io import EMOTIONS, INTENTS, AnnotationRecord, Conversation, Utterance, UtteranceFeatures
from mceiu.model import EI2Config


@pytest.fixture(autouse=True)
def _f64():
    T.set_precision("f64")
    yield
    T.set_precision("f64")


def tiny_config(**changes) -> EI2Config:
    base = EI2Config(hidden=8, heads=2, text_dim=6, audio_dim=5, visual_dim=4,
                     kernel_widths=(1, 2), filters_per_width=3, ff_dim=16)
    return base.with_(**changes)


def random_conversation(rng, dia=0, n=4, config=None, frames=(1, 5)):
    config = config or tiny_config()
    conv = Conversation(dia)
    for u in range(n):
        rec = AnnotationRecord(
            f"utterance {u} of {dia}", dia, u, "show", 1, 1, 1000 * u, 1000 * u + 900,
            EMOTIONS[int(rng.integers(7))], INTENTS[int(rng.integers(9))], u % 2,
        )
        feats = UtteranceFeatures(*[
            rng.normal(size=(int(rng.integers(frames[0], frames[1] + 1)), config.input_dim(m))).astype(np.float32)
            for m in ("textual", "acoustic", "visual")
        ])
        conv.utterances.append(Utterance(rec, feats))
    return conv


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


INTENT_BRANCH = ("intent_encoder.", "interaction.intent.", "classifier.intent.")


def perturb_intent_branch(state, rng, scale=1.0):
    for k, p in state.items():
        if k.startswith(INTENT_BRANCH):
            p.data = p.data + scale * rng.normal(size=p.shape)


def noise_history(conv, n, rng):
    """Copy of ``conv`` whose utterances before ``n`` carry fresh random features."""
    out = Conversation(conv.dia_no)
    for k, u in enumerate(conv.utterances):
        feats = u.features
        if k < n:
            feats = UtteranceFeatures(*[
                rng.normal(scale=5.0, size=(int(rng.integers(1, 9)), feats.get(m).shape[1]))
                for m in ("textual", "acoustic", "visual")
            ])
        out.utterances.append(Utterance(u.record, feats))
    return out
