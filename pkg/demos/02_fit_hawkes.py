"""
Fitting a self-exciting process
===============================

Simulate a Hawkes process, fit a log-normal mixture and the Gompertz
(RMTPP) baseline, and compare both against the likelihood of the process
that generated the data. Takes about a minute on one core.
"""

# %%
import numpy as np

from iftpp import generators as gen
from iftpp import trainer as tr
from iftpp.config import TrainConfig

spec = gen.preset("hawkes1", n_sequences=16, n_events=256, seed=0)
seqs = gen.generate(spec)
train, val, test = tr.split_dataset(seqs)
print(len(train), "train /", len(val), "val /", len(test), "test sequences")
print("true-model NLL on test: %.3f" % gen.true_nll(spec, test))

# %%
fitted = {}
for kind in ("lognormmix", "gompertz"):
    cfg = TrainConfig(model=kind, batch_size=16, max_epochs=100, patience=10)
    res = tr.train(cfg, train, val)
    fitted[kind] = res.model
    print(f"{kind:11s} best epoch {res.best_epoch:3d}  test NLL {tr.nll_time(res.model, test):.3f}")

# %%
# Condition on the first 20 events of a test sequence and look at the next gap.
history = test[0]
history = type(history)(history.arrival_times[:20], sequence_id=history.sequence_id)
grid = np.array([0.05, 0.2, 0.5, 1, 2, 5, 10])
for kind, model in fitted.items():
    c = model.next_context(history)
    cc = np.repeat(c[None], len(grid), axis=0)
    lam = model.decoder.intensity(grid, cc)
    print(kind.ljust(11), " ".join(f"{v:6.3f}" for v in lam))
print("tau".ljust(11), " ".join(f"{v:6.2f}" for v in grid))

# %%
# Roll the mixture model forward. Bursts make single-run rates noisy, so
# compare gap quantiles instead.
taus, _ = fitted["lognormmix"].generate(5000, np.random.default_rng(1))
data = np.concatenate([s.inter_times for s in seqs])
for q in (0.1, 0.5, 0.9):
    print(f"gap quantile {q}: data {np.quantile(data, q):.3f}, model {np.quantile(taus, q):.3f}")
