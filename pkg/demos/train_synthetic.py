"""Train the joint network on a planted synthetic corpus and look at the results.

Takes about a minute on one core.
"""

from mceiu.corpus.io import Corpus
from mceiu.corpus.synth import SynthConfig, synth_corpus
from mceiu.corpus.tools import correlation_heatmap, correlation_matrix
from mceiu.metrics import confusion_text
from mceiu.model import EI2Config
from mceiu.training import TrainConfig, fit

sc = synth_corpus(SynthConfig(n_conversations=64, seed=0))
corpus = Corpus(sc.conversations, sc.default_splits())
print({k: len(v) for k, v in corpus.splits.items()}, "conversations per split")

# the planted emotion -> intent structure, as counts
print(correlation_heatmap(correlation_matrix(sc.records)))

# desk-sized network; full size is hidden 128 with 768/512/342 inputs
mcfg = EI2Config(hidden=32, heads=4, text_dim=48, audio_dim=32, visual_dim=24, filters_per_width=16, ff_dim=64)
tcfg = TrainConfig(learning_rate=2e-3, epochs_pretrain=5, epochs_train=10, seed=0)

res = fit(corpus, tcfg, mcfg)
for k, e in enumerate(res.train_report.epochs):
    print(f"epoch {k:2d}  loss {e.total:.4f}  (emotion {e.emotion:.4f}, intent {e.intent:.4f})")
print("best validation epoch", res.train_report.best_epoch)

for task, r in res.metrics.items():
    print(f"\n{task} test WAF {100 * r.waf:.2f}")
    print(confusion_text(r))
