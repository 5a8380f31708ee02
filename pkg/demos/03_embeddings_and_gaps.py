"""
Sequence embeddings and missing data
====================================

Part one gives every training sequence its own learned vector and checks
that renewal and self-correcting sequences end up in different clusters.
Part two hides a third of a Hawkes sequence and compares three ways of
training through the hole. Runs in a few minutes.
"""

# %%
import numpy as np
from scipy.cluster.vq import kmeans2

from iftpp import generators as gen
from iftpp import trainer as tr
from iftpp.config import TrainConfig

seqs = (gen.generate(gen.preset("renewal", 12, 256, 0))
        + gen.generate(gen.preset("self_correcting", 12, 256, 0)))
train, val, _ = tr.split_within_sequences(seqs)

# history is switched off for the first 20 epochs so the vectors have to
# carry the difference between the two processes on their own
cfg = TrainConfig(sequence_embedding=True, pretrain_epochs=20, batch_size=16, max_epochs=100, patience=10)
model = tr.train(cfg, train, val, all_seqs=seqs).model
ids, emb = model.embeddings()
_, labels = kmeans2(emb, 2, seed=0, minit="++")
for name in ("renewal", "self_correcting"):
    print(name.ljust(16), np.bincount(labels[[i.startswith(name) for i in ids]], minlength=2))

# %%
# Walk from one embedding to the other and watch the spread of log gaps.
e_sc, e_rn = emb[ids.index("self_correcting-0")], emb[ids.index("renewal-0")]
for w in (0.0, 0.25, 0.5, 0.75, 1.0):
    taus, _ = model.generate(3000, np.random.default_rng(1), seq_embedding=(1 - w) * e_sc + w * e_rn)
    print(f"weight on renewal {w:.2f}: std of log gaps {np.log(taus).std():.3f}")

# %%
spec = gen.preset("hawkes1", 1, 100, 0)
full = gen.generate(spec)[0]
observed, gap, truth = gen.mask_interval(full, 1 / 3, np.random.default_rng(0))
print(f"gap ({gap[0]:.1f}, {gap[1]:.1f}) hides {len(truth) - len(observed)} of {len(truth)} events")
print("true-model NLL of the full sequence: %.3f" % gen.true_nll(spec, [truth]))

for strategy in ("none", "mean", "reparam"):
    cfg = TrainConfig(K=16, H=32, imputation=strategy, mc_samples=10)
    fitted = tr.train_with_imputation(cfg, observed, gap, steps=300)
    print(f"{strategy:8s} NLL of the full sequence {tr.nll_time(fitted, [truth]):.3f}")
