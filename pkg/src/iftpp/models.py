"""Conditional inter-event time models: decoders, the full model and checkpoints.

A decoder maps a context tensor ``c`` of shape ``(..., C)`` to a distribution
over the next inter-event time. ``tau`` broadcasts against ``c.shape[:-1]``.
Every decoder reports densities in the original time units: the internal
normalisation (log-time centring for the mixture and flows, division by the
mean gap for the intensity baselines) is folded back in exactly.
"""
import json
import math

import numpy as np

from . import autodiff as ad
from . import distributions as dist
from . import flows
from .config import TrainConfig
from .encoder import (Encoder, HeadParams, MarkHeadParams, Scaling, affine, heads_mixture,
                      init_linear, mark_log_probs)

CHECKPOINT_VERSION = 1


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def _numeric_mean(cdf, center, width, n=4001):
    """``E[tau] = int_0^inf (1 - F(tau)) dtau`` on a log-time grid, per context."""
    u = np.linspace(center - 25.0 * width, center + 25.0 * width, n)
    t = np.exp(u)
    surv = 1.0 - cdf(t)
    return np.trapz(surv * t, u, axis=-1) + t[0]


class Decoder:
    """Shared plumbing; subclasses set ``self.params`` and implement ``log_prob``."""

    name = ""
    reparametrizable = False

    def tensors(self):
        return dict(self.params)

    def after_step(self):
        pass

    def cdf(self, tau, c):
        raise NotImplementedError

    def intensity(self, tau, c):
        """Hazard rate ``p / (1 - F)`` at ``tau``."""
        lam, _ = flows.intensity_from_density(lambda t: self.log_prob(t, c),
                                              lambda t: self.cdf(t, c), tau)
        return lam

    def rsample(self, c, rng, temperature=1.0):
        raise NotImplementedError(f"{self.name} does not support reparametrized sampling")


class LogNormMixDecoder(Decoder):
    """Log-normal mixture whose parameters are affine in the context.

    The heads describe ``(log tau - b) / a`` with the dataset's log-time mean
    ``b`` and std ``a``; mapping back gives ``mu' = a mu + b`` and ``s' = a s``.
    """

    name = "lognormmix"
    reparametrizable = True

    def __init__(self, rng, context_dim, scaling, K=64):
        self.scaling = scaling
        self.head = HeadParams.init(rng, context_dim, K)
        self.params = self.head.tensors()

    def mixture(self, c):
        p = heads_mixture(c, self.head)
        a, b = self.scaling.log_std, self.scaling.log_mean
        return dist.MixtureParams(p.w, p.mu * a + b, p.s * a, p.log_w)

    def log_prob(self, tau, c):
        return dist.lognormmix_logpdf(tau, self.mixture(c))

    def cdf(self, tau, c):
        return dist.lognormmix_cdf(tau, self.mixture(c), strict=False).data

    def mean(self, c):
        return dist.lognormmix_mean(self.mixture(c)).data

    def sample(self, c, rng, size=()):
        return dist.lognormmix_sample(self.mixture(c), rng, size)

    def rsample(self, c, rng, temperature=1.0):
        return dist.lognormmix_sample_reparam(self.mixture(c), rng, temperature)


class LogNormalDecoder(LogNormMixDecoder):
    name = "lognormal"

    def __init__(self, rng, context_dim, scaling):
        super().__init__(rng, context_dim, scaling, K=1)


class _FlowDecoder(Decoder):
    """Stack ``log -> BN -> f_1 -> BN -> ... -> f_M -> sigmoid``.

    The first batch-norm layer uses the log-time statistics of the training
    set; the ones between parametric layers are fitted by
    :meth:`fit_batchnorm` once, before training, and stay frozen.
    """

    def __init__(self, scaling, M):
        self.scaling = scaling
        self.M = M
        self.bn = [flows.BatchNormFlowParams() for _ in range(M - 1)]

    def layer(self, m, c):
        raise NotImplementedError

    def stack(self, c, upto=None):
        layers = [flows.BatchNormFlowParams(self.scaling.log_mean, self.scaling.log_std)]
        upto = self.M if upto is None else upto
        for m in range(upto):
            layers.append(self.layer(m, c))
            if m < self.M - 1 and m < upto - 1:
                layers.append(self.bn[m])
        return flows.FlowStack(layers)

    def fit_batchnorm(self, samples):
        """``samples`` is a list of ``(tau, c)`` pairs covering the training set."""
        for m in range(self.M - 1):
            xs = []
            for tau, c in samples:
                x, _ = flows.flow_inverse(tau, self.stack(ad.constant(_data(c)), upto=m + 1))
                xs.append(np.ravel(x.data))
            self.bn[m] = flows.BatchNormFlowParams.from_data(np.concatenate(xs))

    def log_prob(self, tau, c):
        return flows.flow_logpdf(tau, self.stack(c))

    def cdf(self, tau, c):
        t = np.asarray(tau, dtype=np.float64)
        safe = np.where(t > 0, t, 1.0)
        return np.where(t > 0, flows.flow_cdf(safe, self.stack(c)).data, 0.0)

    def mean(self, c):
        c = ad.constant(_data(c))
        lead = c.shape[:-1]
        cc = ad.reshape(c, lead + (1, c.shape[-1]))
        return _numeric_mean(lambda t: self.cdf(t, cc), self.scaling.log_mean,
                             self.scaling.log_std)

    def sample(self, c, rng, size=(), tol=1e-9):
        return flows.flow_sample(self.stack(ad.constant(_data(c))), rng, tol=tol, size=size)

    def batchnorm_state(self):
        return [[bn.shift, bn.scale] for bn in self.bn]

    def load_batchnorm_state(self, state):
        self.bn = [flows.BatchNormFlowParams(float(a), float(b)) for a, b in state]


class DSFlowDecoder(_FlowDecoder):
    name = "dsflow"

    def __init__(self, rng, context_dim, scaling, K=64, M=2):
        super().__init__(scaling, M)
        self.heads = [HeadParams.init(rng, context_dim, K) for _ in range(M)]
        self.params = {f"{m}.{k}": v for m, h in enumerate(self.heads) for k, v in h.tensors().items()}

    def layer(self, m, c):
        p = heads_mixture(c, self.heads[m])
        return flows.DsfLayerParams(p.w, p.mu, p.s, p.log_w)


class SOSFlowDecoder(_FlowDecoder):
    """Sum-of-squares layers, initialised close to the identity map."""

    name = "sosflow"

    def __init__(self, rng, context_dim, scaling, K=64, M=2, R=3):
        super().__init__(scaling, M)
        self.K, self.R = K, R
        self.params = {}
        n = (R + 1) * K
        for m in range(M):
            V, _ = init_linear(rng, context_dim, n + 1, bias=False)
            V.data *= 0.1
            b = np.zeros(n + 1)
            b[:K] = 1.0 / np.sqrt(K)
            self.params[f"{m}.V"] = V
            self.params[f"{m}.b"] = ad.parameter(b)

    def layer(self, m, c):
        out = affine(c, self.params[f"{m}.V"], self.params[f"{m}.b"])
        lead = out.shape[:-1]
        n = (self.R + 1) * self.K
        a = ad.reshape(ad.index(out, (Ellipsis, slice(0, n))), lead + (self.R + 1, self.K))
        a0 = ad.index(out, (Ellipsis, n))
        return flows.SosLayerParams(a, a0)


class FullyNNDecoder(Decoder):
    """Cumulative-intensity network on ``tau / mean_tau``.

    Its density ``lambda exp(-Lambda)`` puts mass ``1 - exp(-Lambda(0))`` on
    negative times and ``exp(-Lambda(inf))`` on "no next event", so it does
    not integrate to one over the positive half-line.
    """

    name = "fullynn"

    def __init__(self, rng, context_dim, scaling, D=64):
        self.scaling = scaling
        bound = 1.0 / np.sqrt(D)
        self.params = {
            "W1": ad.parameter(rng.uniform(0.0, 1.0, (D, 1))),
            "W2": ad.parameter(rng.uniform(0.0, bound, (D, D))),
            "W3": ad.parameter(rng.uniform(0.0, bound, (1, D))),
            "V": ad.parameter(rng.uniform(-1.0, 1.0, (D, context_dim)) / np.sqrt(max(context_dim, 1))),
            "b0": ad.parameter(rng.uniform(-1.0, 1.0, D)),
            "b2": ad.parameter(rng.uniform(-bound, bound, D)),
            "b3": ad.parameter(0.0),
        }

    def nn_params(self):
        return flows.FullyNnParams(**self.params)

    def after_step(self):
        self.nn_params().clip_()

    def _h(self, c):
        return None if self.params["V"].shape[1] == 0 else c

    def log_prob(self, tau, c):
        m = self.scaling.mean_tau
        return flows.fullynn_logpdf(ad.constant(tau) / m, self.nn_params(), self._h(c)) - math.log(m)

    def cdf(self, tau, c):
        """Mass on ``(0, tau]``, which never reaches one."""
        m = self.scaling.mean_tau
        t = np.maximum(np.asarray(tau, dtype=np.float64), 0.0) / m
        cum = flows.fullynn_cumint(t, self.nn_params(), self._h(c)).data
        cum0 = flows.fullynn_cumint(np.zeros_like(t), self.nn_params(), self._h(c)).data
        return np.exp(-cum0) - np.exp(-cum)

    def intensity(self, tau, c):
        m = self.scaling.mean_tau
        return flows.fullynn_intensity(np.asarray(tau) / m, self.nn_params(), self._h(c)).data / m

    def total_mass(self, c):
        return flows.fullynn_total_mass(self.nn_params(), self._h(c))

    def mean(self, c):
        raise NotImplementedError("FullyNN defines no proper mean (the density is deficient)")

    def sample(self, c, rng, size=()):
        c = _data(c)
        if c.ndim > 1:
            if c.shape[:-1] != (1,) * (c.ndim - 1):
                raise ValueError("FullyNN sampling supports a single context")
            c = c.reshape(-1)
        return self.scaling.mean_tau * flows.fullynn_sample(self.nn_params(), rng, self._h(c), size)


class _IntensityBaseline(Decoder):
    """Shared scaling for the Gompertz and exponential decoders."""

    def __init__(self, rng, context_dim, scaling):
        self.scaling = scaling
        v, b = init_linear(rng, context_dim, 1)
        self.params = {"v": v, "b": b}

    def _linear(self, c):
        out = affine(c, self.params["v"], self.params["b"])
        return ad.reshape(out, out.shape[:-1])


class GompertzDecoder(_IntensityBaseline):
    """Exponential intensity ``exp(w tau + v.c + b)`` (RMTPP), i.e. a Gompertz law."""

    name = "gompertz"

    def __init__(self, rng, context_dim, scaling):
        super().__init__(rng, context_dim, scaling)
        # w = exp(log_w) starts near the memoryless limit; larger starting
        # values make exp(w tau) explode on the long gaps of heavy-tailed data
        self.params["log_w"] = ad.parameter(math.log(1e-3))

    def _wd(self, c):
        return ad.exp(self.params["log_w"]), self._linear(c)

    def gompertz(self, c):
        w, d = self._wd(ad.constant(_data(c)))
        return dist.GompertzParams(np.exp(d.data), w.data)

    def log_prob(self, tau, c):
        m = self.scaling.mean_tau
        w, d = self._wd(c)
        return dist.gompertz_logpdf_wd(ad.constant(tau) / m, w, d) - math.log(m)

    def cdf(self, tau, c):
        return dist.gompertz_cdf(np.asarray(tau) / self.scaling.mean_tau, self.gompertz(c))

    def intensity(self, tau, c):
        p = self.gompertz(c)
        return p.alpha * np.exp(p.beta * np.asarray(tau) / self.scaling.mean_tau) / self.scaling.mean_tau

    def mean(self, c):
        return self.scaling.mean_tau * dist.gompertz_mean(self.gompertz(c))

    def sample(self, c, rng, size=()):
        return self.scaling.mean_tau * dist.gompertz_sample(self.gompertz(c), rng, size)


class ExponentialDecoder(_IntensityBaseline):
    """Constant intensity ``exp(v.c + b)`` between events."""

    name = "exponential"

    def rate(self, c):
        return dist.ExponentialParams(np.exp(self._linear(ad.constant(_data(c))).data))

    def log_prob(self, tau, c):
        m = self.scaling.mean_tau
        log_c = self._linear(c)
        return log_c - ad.exp(log_c) * (ad.constant(tau) / m) - math.log(m)

    def cdf(self, tau, c):
        return dist.exponential_cdf(np.asarray(tau) / self.scaling.mean_tau, self.rate(c))

    def intensity(self, tau, c):
        rate = self.rate(c).c / self.scaling.mean_tau
        return np.broadcast_to(rate, np.broadcast_shapes(np.shape(tau), np.shape(rate))).copy()

    def mean(self, c):
        return self.scaling.mean_tau * dist.exponential_mean(self.rate(c))

    def sample(self, c, rng, size=()):
        return self.scaling.mean_tau * dist.exponential_sample(self.rate(c), rng, size)


def make_decoder(config: TrainConfig, rng, context_dim, scaling):
    kind = config.model
    if kind == "lognormmix":
        return LogNormMixDecoder(rng, context_dim, scaling, K=config.K)
    if kind == "lognormal":
        return LogNormalDecoder(rng, context_dim, scaling)
    if kind == "dsflow":
        return DSFlowDecoder(rng, context_dim, scaling, K=config.K, M=config.M)
    if kind == "sosflow":
        return SOSFlowDecoder(rng, context_dim, scaling, K=config.K, M=config.M, R=config.R)
    if kind == "fullynn":
        return FullyNNDecoder(rng, context_dim, scaling, D=config.D)
    if kind == "gompertz":
        return GompertzDecoder(rng, context_dim, scaling)
    if kind == "exponential":
        return ExponentialDecoder(rng, context_dim, scaling)
    raise ValueError(f"unknown model kind {kind!r}")


class TPPModel:
    """History encoder, time decoder and optional mark head."""

    def __init__(self, config: TrainConfig, scaling: Scaling, n_marks=0, n_meta=0,
                 sequence_ids=(), rng=None):
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.config = config
        self.scaling = scaling
        self.n_marks = n_marks if config.marks else 0
        self.n_meta = n_meta if config.metadata else 0
        self.sequence_ids = [str(s) for s in sequence_ids] if config.sequence_embedding else []
        self.seq_index = {sid: i for i, sid in enumerate(self.sequence_ids)}
        self.encoder = Encoder(rng, hidden=config.H, history=config.history,
                               n_marks=self.n_marks, mark_dim=config.mark_dim,
                               n_meta=self.n_meta, meta_dim=config.meta_dim,
                               n_sequences=len(self.sequence_ids), seq_dim=config.seq_dim)
        self.decoder = make_decoder(config, rng, self.encoder.context_dim, scaling)
        self.mark_head = None
        if self.n_marks:
            self.mark_head = MarkHeadParams.init(rng, self.encoder.context_dim, self.n_marks)

    # ------------------------------------------------------------ parameters

    def named_tensors(self):
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params.items()})
        if self.mark_head is not None:
            out.update({f"marks.{k}": v for k, v in self.mark_head.tensors().items()})
        return out

    def parameters(self):
        return list(self.named_tensors().values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state_dict(self, state):
        tensors = self.named_tensors()
        missing = set(tensors) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in tensors.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} does not match {t.shape}")
            t.data[...] = arr

    def after_step(self):
        self.decoder.after_step()

    # ------------------------------------------------------------ likelihood

    def context(self, batch):
        if self.n_marks and batch.marks is None:
            raise ValueError("model is mark-aware but the data carries no marks")
        if self.n_meta and batch.meta is None:
            raise ValueError("model uses metadata but the data carries none")
        return self.encoder.encode(batch.tau, batch.marks, batch.meta, batch.seq_idx, self.scaling)

    def log_likelihood(self, batch, marks=True):
        """Per-event ``(log p(tau), log p(mark))`` tensors of shape (B, T); padding included."""
        c = self.context(batch)
        time_lp = self.decoder.log_prob(batch.tau, c)
        mark_lp = None
        if marks and self.mark_head is not None:
            lp = mark_log_probs(c, self.mark_head)
            B, T = batch.tau.shape
            mark_lp = ad.index(lp, (np.arange(B)[:, None], np.arange(T)[None, :], batch.marks))
        return time_lp, mark_lp

    def nll_sum(self, batch, marks=True):
        """Summed negative log-likelihood over the unpadded events."""
        time_lp, mark_lp = self.log_likelihood(batch, marks)
        mask = batch.mask.astype(np.float64)
        total = ad.sum(time_lp * mask)
        if mark_lp is not None:
            total = total + ad.sum(mark_lp * mask)
        return -total

    # ------------------------------------------------------------ generation

    def _state_after(self, seq):
        """Hidden state after consuming every event of ``seq``."""
        from .data import make_batch
        if not self.encoder.history or not self.encoder.history_enabled or len(seq) == 0:
            return np.zeros(self.encoder.hidden)
        b = make_batch([seq])
        tau = np.concatenate([b.tau, np.ones((1, 1))], axis=1)
        marks = None if b.marks is None else np.concatenate([b.marks, np.zeros((1, 1), int)], 1)
        return self.encoder.history_states(tau, marks, self.scaling).data[0, -1]

    def _context_from_state(self, h, meta=None, seq_vec=None, seq_id=None):
        parts = []
        if self.encoder.history:
            parts.append(h if self.encoder.history_enabled else np.zeros_like(h))
        if self.n_meta:
            if meta is None:
                raise ValueError("metadata value required for the next event")
            parts.append(self.encoder.params["meta_emb"].data[int(meta)])
        if self.sequence_ids:
            if seq_vec is None:
                if seq_id not in self.seq_index:
                    raise KeyError(f"unknown sequence id {seq_id!r}")
                seq_vec = self.encoder.params["seq_emb"].data[self.seq_index[seq_id]]
            parts.append(np.asarray(seq_vec, dtype=np.float64))
        return np.concatenate(parts) if parts else np.zeros(0)

    def next_context(self, seq, meta=None, seq_embedding=None):
        """Context of the event following the last event of ``seq``."""
        if meta is None and self.n_meta and seq.metadata is not None and len(seq):
            meta = seq.metadata[-1]
        return self._context_from_state(self._state_after(seq), meta, seq_embedding, seq.sequence_id)

    def embeddings(self):
        if not self.sequence_ids:
            raise ValueError("model was trained without sequence embeddings")
        return self.sequence_ids, self.encoder.params["seq_emb"].data.copy()

    def generate(self, n_events, rng, history=None, seq_embedding=None, seq_id=None, meta=None):
        """Sample ``n_events`` inter-event times autoregressively.

        Returns ``(taus, marks)``; ``marks`` is None for mark-free models.
        ``seq_embedding`` overrides the learned sequence vector.
        """
        h = self._state_after(history) if history is not None else np.zeros(self.encoder.hidden)
        if history is not None and seq_id is None:
            seq_id = history.sequence_id
        taus, marks = [], []
        for _ in range(n_events):
            c = self._context_from_state(h, meta, seq_embedding, seq_id)
            tau = float(np.ravel(self.decoder.sample(c[None], rng))[0])
            if not np.isfinite(tau) or tau <= 0:
                raise RuntimeError(f"sampler produced an invalid inter-event time {tau}")
            taus.append(tau)
            x = [(math.log(tau) - self.scaling.log_mean) / self.scaling.log_std]
            if self.mark_head is not None:
                probs = np.exp(mark_log_probs(ad.constant(c[None]), self.mark_head).data[0])
                k = int(rng.choice(len(probs), p=probs / probs.sum()))
                marks.append(k)
                x = np.concatenate([x, self.encoder.params["mark_emb"].data[k]])
            if self.encoder.history and self.encoder.history_enabled:
                h = self.encoder.step(np.asarray(x, dtype=np.float64)[None], h[None]).data[0]
        return np.array(taus), (np.array(marks) if self.mark_head is not None else None)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: TPPModel, extra=None):
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "scaling": model.scaling.to_dict(),
        "n_marks": model.n_marks,
        "n_meta": model.n_meta,
        "sequence_ids": model.sequence_ids,
        "batchnorm": model.decoder.batchnorm_state() if hasattr(model.decoder, "batchnorm_state") else [],
        "extra": extra or {},
    }
    arrays = {f"p:{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Rebuild a :class:`TPPModel` from :func:`save_checkpoint` output; returns ``(model, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a checkpoint file")
        meta = json.loads(str(z["__meta__"]))
        state = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    config = TrainConfig.from_dict(meta["config"])
    model = TPPModel(config, Scaling(**meta["scaling"]), meta["n_marks"], meta["n_meta"],
                     meta["sequence_ids"], rng=np.random.default_rng(0))
    model.load_state_dict(state)
    if meta["batchnorm"]:
        model.decoder.load_batchnorm_state(meta["batchnorm"])
    return model, meta["extra"]
