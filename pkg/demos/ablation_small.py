"""The fifteen-row ablation table at toy scale (a few minutes on one core).

Numbers here say nothing about the full-scale model; the point is the
shape of the report and that every configuration runs.
"""

from mceiu.ablation import ablation_suite
from mceiu.corpus.io import Corpus
from mceiu.corpus.synth import SynthConfig, planted_conditional, synth_corpus
from mceiu.model import EI2Config
from mceiu.training import TrainConfig

# intent carries no signal of its own here, only via the emotion it comes with
cfg = SynthConfig(n_conversations=32, noise=4.0, intent_conditional=planted_conditional(1.0),
                  zero_intent_prototypes=True, dims=(24, 16, 12), seed=1)
sc = synth_corpus(cfg)
corpus = Corpus(sc.conversations, sc.default_splits())

mcfg = EI2Config(hidden=16, heads=2, text_dim=24, audio_dim=16, visual_dim=12,
                 kernel_widths=(2, 3), filters_per_width=8, ff_dim=32)
tcfg = TrainConfig(learning_rate=1e-3, epochs_pretrain=3, epochs_train=6, n_runs=2)

report = ablation_suite(corpus, mcfg, tcfg, on_result=lambda r: print("done:", r.spec.name, flush=True))
print()
print(report.to_text())
