"""Maximum-likelihood training, evaluation and learning with missing data."""
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .data import EventSequence, make_batch
from .encoder import Scaling, gru_sequence
from .models import TPPModel, _FlowDecoder

log = logging.getLogger(__name__)

MAX_IMPUTED_EVENTS = 10_000


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- data handling

def split_dataset(seqs, fractions=(0.6, 0.2, 0.2), seed=0):
    """Shuffle whole sequences with ``seed`` and cut them into train/val/test."""
    n = len(seqs)
    if n < 5:
        raise ValueError(f"need at least 5 sequences to split, got {n}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be three numbers summing to 1")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pick = lambda idx: [seqs[i] for i in idx]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def split_within_sequences(seqs, fractions=(0.6, 0.2, 0.2)):
    """Split every sequence in time, keeping ids (needed with sequence embeddings)."""
    parts = ([], [], [])
    for s in seqs:
        n = len(s)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        for out, (lo, hi) in zip(parts, ((0, a), (a, b), (b, n))):
            if hi > lo:
                out.append(s.slice(lo, hi))
    return parts


def chunk_sequences(seqs, length):
    return [c for s in seqs for c in s.chunks(length)]


def iterate_batches(seqs, batch_size, seq_index=None, rng=None):
    order = np.arange(len(seqs)) if rng is None else rng.permutation(len(seqs))
    for i in range(0, len(seqs), batch_size):
        yield make_batch([seqs[j] for j in order[i:i + batch_size]], seq_index)


def _vocab(seqs, attr):
    vals = [getattr(s, attr) for s in seqs if getattr(s, attr) is not None and len(getattr(s, attr))]
    return int(max(v.max() for v in vals)) + 1 if vals else 0


# ---------------------------------------------------------------- objectives

def _batch_terms(model, batch, marks):
    try:
        return model.log_likelihood(batch, marks)
    except FloatingPointError as exc:
        raise FloatingPointError(f"non-finite log-likelihood: {exc}") from None


def nll_time(model: TPPModel, seqs, batch_size=64):
    """Mean negative log-density of the inter-event times, in original units."""
    total, count = 0.0, 0
    for start in range(0, len(seqs), batch_size):
        group = seqs[start:start + batch_size]
        batch = make_batch(group, model.seq_index or None)
        time_lp, _ = _batch_terms(model, batch, marks=False)
        lp = np.where(batch.mask, time_lp.data, 0.0)
        bad = np.argwhere(~np.isfinite(lp))
        if len(bad):
            b, t = bad[0]
            raise FloatingPointError(f"non-finite log-density at sequence {start + b}, event {t}")
        total += float(lp.sum())
        count += batch.n_events
    return -total / count


def nll_total(model: TPPModel, seqs, batch_size=64):
    """Time plus mark NLL per event, with the argmax mark accuracy."""
    if model.mark_head is None:
        raise ValueError("model has no mark head")
    if any(s.marks is None for s in seqs):
        raise ValueError("nll_total needs marks on every sequence")
    t_sum = m_sum = correct = 0.0
    count = 0
    from .encoder import mark_log_probs
    for start in range(0, len(seqs), batch_size):
        batch = make_batch(seqs[start:start + batch_size], model.seq_index or None)
        c = model.context(batch)
        time_lp = model.decoder.log_prob(batch.tau, c).data
        lp = mark_log_probs(c, model.mark_head).data
        picked = np.take_along_axis(lp, batch.marks[..., None], -1)[..., 0]
        t_sum += float(np.sum(time_lp[batch.mask]))
        m_sum += float(np.sum(picked[batch.mask]))
        correct += float(np.sum((lp.argmax(-1) == batch.marks)[batch.mask]))
        count += batch.n_events
    return {"nll_time": -t_sum / count, "nll_mark": -m_sum / count,
            "nll_total": -(t_sum + m_sum) / count, "mark_accuracy": correct / count}


def _l2(params, weight):
    if weight == 0:
        return 0.0
    return weight * ad.sum(ad.stack([ad.sum(ad.square(p)) for p in params]))


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: TPPModel
    history: List[tuple] = field(default_factory=list)   # (epoch, train_nll, val_nll)
    best_epoch: int = -1
    best_val: float = math.inf
    train_nll: float = math.nan

    def metrics_csv(self):
        lines = ["epoch,train_nll,val_nll"]
        lines += [f"{e},{tr:.12g},{va:.12g}" for e, tr, va in self.history]
        return "\n".join(lines) + "\n"


def build_model(config: TrainConfig, train_seqs, all_seqs=None):
    """Model with scaling and vocabularies taken from the data."""
    all_seqs = train_seqs if all_seqs is None else all_seqs
    scaling = Scaling.from_sequences(train_seqs)
    ids = sorted({s.sequence_id for s in all_seqs}) if config.sequence_embedding else ()
    model = TPPModel(config, scaling, n_marks=_vocab(all_seqs, "marks"),
                     n_meta=_vocab(all_seqs, "metadata"), sequence_ids=ids)
    if config.marks and model.n_marks == 0:
        raise ValueError("config.marks is set but the data has no marks")
    if config.metadata and model.n_meta == 0:
        raise ValueError("config.metadata is set but the data has no metadata")
    if isinstance(model.decoder, _FlowDecoder):
        chunks = chunk_sequences(train_seqs, config.chunk_len)
        samples = []
        for batch in iterate_batches(chunks, config.batch_size, model.seq_index or None):
            c = model.context(batch).data
            samples.append((batch.tau[batch.mask], c[batch.mask]))
        model.decoder.fit_batchnorm(samples)
    return model


def _run_epoch(model, opt, chunks, config, rng):
    params = opt.params
    total, count = 0.0, 0
    for batch in iterate_batches(chunks, config.batch_size, model.seq_index or None, rng):
        opt.zero_grad()
        nll = model.nll_sum(batch, marks=config.marks)
        loss = nll / batch.n_events
        if config.l2:
            loss = loss + _l2(params, config.l2)
        ad.backward(loss)
        opt.step()
        model.after_step()
        total += float(nll.data)
        count += batch.n_events
    return total / count


def _val_loss(model, seqs, config):
    if config.marks and model.mark_head is not None:
        return nll_total(model, seqs, config.batch_size)["nll_total"]
    return nll_time(model, seqs, config.batch_size)


def train(config: TrainConfig, train_seqs, val_seqs, model=None, all_seqs=None, callback=None):
    """Adam with early stopping on the validation NLL.

    Training stops once more than ``patience`` epochs have passed without a
    new best validation loss, and the best snapshot is restored. With
    sequence embeddings and ``pretrain_epochs > 0`` the history encoder is
    disabled for a warm-up phase that only fits embeddings and heads.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    if model is None:
        model = build_model(config, train_seqs, all_seqs or list(train_seqs) + list(val_seqs))
    chunks = chunk_sequences(train_seqs, config.chunk_len)
    result = TrainResult(model)

    if config.sequence_embedding and config.pretrain_epochs and config.history:
        model.encoder.history_enabled = False
        params = [p for k, p in model.named_tensors().items() if not k.startswith("encoder.W_")
                  and not k.startswith("encoder.b_")]
        opt = ad.Adam(params, lr=config.lr, clip_norm=config.clip_norm)
        for epoch in range(config.pretrain_epochs):
            _guarded_epoch(model, opt, chunks, config, rng, epoch)
        model.encoder.history_enabled = True

    opt = ad.Adam(model.parameters(), lr=config.lr, clip_norm=config.clip_norm)
    best_state = model.state_dict()
    since_best = 0
    for epoch in range(config.max_epochs):
        train_nll = _guarded_epoch(model, opt, chunks, config, rng, epoch)
        if epoch % config.eval_every and epoch != config.max_epochs - 1:
            continue
        val = _val_loss(model, val_seqs, config)
        result.history.append((epoch, train_nll, val))
        if callback is not None:
            callback(epoch, train_nll, val)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += config.eval_every
            if since_best > config.patience:
                break
    model.load_state_dict(best_state)
    result.train_nll = nll_time(model, train_seqs, config.batch_size)
    return result


def _guarded_epoch(model, opt, chunks, config, rng, epoch):
    try:
        loss = _run_epoch(model, opt, chunks, config, rng)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
    if not math.isfinite(loss):
        raise TrainingDiverged(f"epoch {epoch}: training loss is {loss}")
    return loss


def grid_search(config: TrainConfig, grid, train_seqs, val_seqs):
    """Train every combination in ``grid`` (field -> values); keep the lowest validation NLL."""
    keys = sorted(grid)
    runs = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = config.replace(**dict(zip(keys, values)))
        res = train(cfg, train_seqs, val_seqs)
        runs.append((res.best_val, cfg, res))
        log.info("grid %s -> val %.4f", dict(zip(keys, values)), res.best_val)
    best = min(runs, key=lambda r: r[0])
    return best[1], best[2], [(cfg.to_dict(), v) for v, cfg, _ in runs]


def evaluate_conditional(config: TrainConfig, train_seqs, val_seqs, test_seqs):
    """Test NLL for {history on/off} x {metadata on/off}."""
    out = {}
    for history in (True, False):
        for metadata in (True, False):
            cfg = config.replace(history=history, metadata=metadata)
            res = train(cfg, train_seqs, val_seqs, all_seqs=list(train_seqs) + list(val_seqs) + list(test_seqs))
            out[(history, metadata)] = nll_time(res.model, test_seqs)
    return out


# ---------------------------------------------------------------- missing data

def observed_gap(seq: EventSequence):
    gap = seq.extra.get("gap")
    if gap is None:
        raise ValueError(f"sequence {seq.sequence_id!r} has no gap annotation")
    return float(gap[0]), float(gap[1])


def mean_imputed(seq: EventSequence, gap):
    """Place events every mean observed gap inside ``gap``; returns ``(filled, observed_mask)``.

    ``n`` events are added at ``t_start + k * tau_hat`` for ``k = 1 .. n`` with
    ``t_start + n * tau_hat < t_end``.
    """
    t0, t1 = gap
    t = seq.arrival_times
    if t1 <= t0:
        return seq, np.ones(len(seq), dtype=bool)
    inside_gap = (t > t0) & (t <= t1)
    tau = seq.inter_times
    tau_hat = float(tau[~(np.isclose(t, t1) & inside_gap)].mean())
    n = max(int(math.ceil((t1 - t0) / tau_hat)) - 1, 0)
    extra = t0 + tau_hat * np.arange(1, n + 1)
    extra = extra[extra < t1]
    times = np.concatenate([t, extra])
    order = np.argsort(times, kind="stable")
    observed = np.concatenate([np.ones(len(t), bool), np.zeros(len(extra), bool)])[order]
    filled = EventSequence(times[order], sequence_id=seq.sequence_id, t_start=seq.t_start)
    return filled, observed



def _reparam_loss(model, seq, gap, rng, lanes, temperature):
    """Negative expected observed log-likelihood under ``lanes`` imputed rollouts."""
    enc, dec, sc = model.encoder, model.decoder, model.scaling
    t = seq.arrival_times
    t0, t1 = gap
    i = int(np.searchsorted(t, t0))          # index of the event opening the gap
    if i >= len(t) - 1 or not np.isclose(t[i], t0):
        raise ValueError("gap must start at an observed event")
    tau = seq.inter_times

    # prefix: events 0 .. i, shared by all rollouts
    pre = tau[None, :i + 1]
    h_pre = enc.history_states(np.concatenate([pre, np.ones((1, 1))], 1), None, sc)
    ll_pre = ad.sum(dec.log_prob(pre, ad.index(h_pre, (slice(None), slice(0, i + 1)))))
    h = ad.index(h_pre, (slice(None), i + 1)) * np.ones((lanes, 1))           # (L, H)

    # rollouts through the gap
    t_last = ad.constant(np.full(lanes, t0))
    active = np.ones(lanes, dtype=bool)
    n_imputed = 0
    while active.any():
        sample = dec.rsample(h, rng, temperature)
        lands = active & (t_last.data + sample.data < t1)
        if not lands.any():
            break
        n_imputed += int(lands.sum())
        if n_imputed > MAX_IMPUTED_EVENTS * lanes:
            raise RuntimeError(f"runaway imputation: more than {MAX_IMPUTED_EVENTS} events per rollout")
        x = (ad.log(sample) - sc.log_mean) / sc.log_std
        h_new = enc.step(ad.reshape(x, (lanes, 1)), h)
        h = ad.where(lands[:, None], h_new, h)
        t_last = ad.where(lands, t_last + sample, t_last)
        active = lands

    # suffix: the event closing the gap and everything after it
    j = i + 1
    first = t1 - t_last                                                          # (L,)
    rest = np.broadcast_to(tau[None, j + 1:], (lanes, len(tau) - j - 1))
    tau_suf = ad.concat([ad.reshape(first, (lanes, 1)), ad.constant(rest)], axis=1)
    ll_suf = ad.sum(dec.log_prob(tau_suf, _suffix_states(model, tau_suf, h))) / lanes
    n_obs = len(tau)
    return -(ll_pre + ll_suf) / n_obs, n_imputed / lanes


def _suffix_states(model, tau, h0):
    """Hidden states before each event of ``tau`` (L, T) when starting from ``h0``."""
    enc, sc = model.encoder, model.scaling
    T = tau.shape[1]
    first = ad.reshape(h0, (h0.shape[0], 1, h0.shape[1]))
    if T == 1:
        return first
    x = (ad.log(ad.index(tau, (slice(None), slice(0, T - 1)))) - sc.log_mean) / sc.log_std
    x = ad.reshape(x, x.shape + (1,))
    p = enc.params
    hs = gru_sequence(x, p["W_ih"], p["W_hh"], p["b_ih"], p["b_hh"], h0=h0)
    return ad.concat([first, hs], axis=1)


def train_with_imputation(config: TrainConfig, observed: EventSequence, gap=None, steps=None,
                          callback=None):
    """Fit a history-only model to one sequence with a missing interval.

    ``none`` treats the gap as one long inter-event time; ``mean`` feeds
    evenly spaced pseudo-events to the encoder without scoring them;
    ``reparam`` averages the observed log-likelihood over sampled fillings of
    the gap and differentiates through the samples. Runs ``steps`` full-batch
    Adam updates (default ``config.max_epochs``) and returns the model.
    """
    gap = observed_gap(observed) if gap is None else gap
    steps = config.max_epochs if steps is None else steps
    if config.metadata or config.marks or config.sequence_embedding:
        raise ValueError("imputation supports history-only models")
    strategy = config.imputation
    if gap[1] <= gap[0]:
        strategy = "none"
    if strategy == "reparam" and config.model not in ("lognormmix", "lognormal"):
        raise ValueError("reparam imputation needs a model with reparametrized sampling")
    model = build_model(config, [observed])
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    opt = ad.Adam(model.parameters(), lr=config.lr, clip_norm=config.clip_norm)
    if strategy == "mean":
        filled, mask = mean_imputed(observed, gap)
        batch = make_batch([filled])
        batch.mask = mask[None]
    else:
        batch = make_batch([observed])
    for step in range(steps):
        opt.zero_grad()
        if strategy == "reparam":
            loss, _ = _reparam_loss(model, observed, gap, rng, config.mc_samples, config.temperature)
        else:
            loss = model.nll_sum(batch) / len(observed)
        if config.l2:
            loss = loss + _l2(opt.params, config.l2)
        ad.backward(loss)
        opt.step()
        model.after_step()
        if callback is not None:
            callback(step, float(loss.data))
    return model
