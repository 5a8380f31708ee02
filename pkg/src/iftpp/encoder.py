"""History encoder, context assembly and parameter heads.

The recurrent cell is a gated recurrent unit (update/reset gates) whose
forward and backward passes over a whole sequence are fused into one graph
node, with the gradient computed by backpropagation through time by hand.
A single-step variant is used when inputs are generated on the fly.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .distributions import MixtureParams


# ---------------------------------------------------------------- gated recurrent unit

def _gru_step(xg, h, W_hh, b_hh):
    """One step given the precomputed input projection ``xg`` (B, 3H)."""
    H = h.shape[-1]
    hg = h @ W_hh + b_hh
    r = expit(xg[:, :H] + hg[:, :H])
    z = expit(xg[:, H:2 * H] + hg[:, H:2 * H])
    hn = hg[:, 2 * H:]
    n = np.tanh(xg[:, 2 * H:] + r * hn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (h, r, z, n, hn)


def _gru_step_backward(dh_new, cache, W_hh):
    """Return ``(d xg, d h_prev, d hg)`` for one step."""
    h, r, z, n, hn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dn_pre = dn * (1.0 - n * n)
    dr = dn_pre * hn
    dr_pre = dr * r * (1.0 - r)
    dz_pre = dz * z * (1.0 - z)
    dxg = np.concatenate([dr_pre, dz_pre, dn_pre], axis=-1)
    dhg = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=-1)
    dh = dh + dhg @ W_hh.T
    return dxg, dh, dhg


def gru_sequence(X, W_ih, W_hh, b_ih, b_hh, h0=None):
    """Run the GRU over ``X`` (B, T, D); returns all hidden states (B, T, H)."""
    X, W_ih, W_hh, b_ih, b_hh = (ad.constant(t) for t in (X, W_ih, W_hh, b_ih, b_hh))
    B, T, D = X.shape
    H = W_hh.shape[0]
    if W_ih.shape != (D, 3 * H) or W_hh.shape != (H, 3 * H):
        raise ad.ShapeError("gru_sequence", X.shape, W_ih.shape, W_hh.shape)
    h0t = ad.constant(np.zeros((B, H)) if h0 is None else h0)
    Wi, Wh = W_ih.data, W_hh.data
    XG = X.data @ Wi + b_ih.data
    out = np.empty((B, T, H))
    caches = []
    h = h0t.data
    for t in range(T):
        h, cache = _gru_step(XG[:, t], h, Wh, b_hh.data)
        out[:, t] = h
        caches.append(cache)

    def bw(g):
        dXG = np.empty((B, T, 3 * H))
        dWh = np.zeros_like(Wh)
        dbh = np.zeros(3 * H)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dxg, dh, dhg = _gru_step_backward(dh + g[:, t], caches[t], Wh)
            dXG[:, t] = dxg
            dWh += caches[t][0].T @ dhg
            dbh += dhg.sum(0)
        flat = dXG.reshape(-1, 3 * H)
        dWi = X.data.reshape(-1, D).T @ flat
        dX = dXG @ Wi.T
        return dX, dWi, dWh, flat.sum(0), dbh, dh
    return ad._make(out, (X, W_ih, W_hh, b_ih, b_hh, h0t), bw, "gru_sequence")


def gru_cell(x, h, W_ih, W_hh, b_ih, b_hh):
    """Single GRU step: ``x`` (B, D), ``h`` (B, H) -> (B, H)."""
    x, h, W_ih, W_hh, b_ih, b_hh = (ad.constant(t) for t in (x, h, W_ih, W_hh, b_ih, b_hh))
    xg = x.data @ W_ih.data + b_ih.data
    h_new, cache = _gru_step(xg, h.data, W_hh.data, b_hh.data)

    def bw(g):
        dxg, dh, dhg = _gru_step_backward(g, cache, W_hh.data)
        return (dxg @ W_ih.data.T, dh, x.data.T @ dxg, cache[0].T @ dhg,
                dxg.sum(0), dhg.sum(0))
    return ad._make(h_new, (x, h, W_ih, W_hh, b_ih, b_hh), bw, "gru_cell")


# ---------------------------------------------------------------- parameters

def init_linear(rng, fan_in, fan_out, bias=True):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    W = ad.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)))
    b = ad.parameter(rng.uniform(-bound, bound, fan_out)) if bias else None
    return W, b


def affine(c, W, b):
    """``c @ W + b`` that also accepts an empty context."""
    if W.shape[0] == 0:
        return ad.add(ad.constant(np.zeros(c.shape[:-1] + (W.shape[1],))), b)
    return ad.matmul(c, W) + b


@dataclass
class Scaling:
    """Dataset statistics used to normalise inputs.

    ``log_mean``/``log_std`` centre and scale ``log tau`` (RNN inputs, the
    mixture's affine layer and the first batch-norm flow layer); ``mean_tau``
    is the linear scale used by the intensity-based baselines.
    """
    log_mean: float = 0.0
    log_std: float = 1.0
    mean_tau: float = 1.0

    def __post_init__(self):
        if self.log_std <= 0 or self.mean_tau <= 0:
            raise ValueError("scaling statistics must be positive")

    @classmethod
    def from_sequences(cls, seqs):
        taus = np.concatenate([s.inter_times for s in seqs])
        logt = np.log(taus)
        std = float(logt.std())
        return cls(float(logt.mean()), std if std > 0 else 1.0, float(taus.mean()))

    def to_dict(self):
        return {"log_mean": self.log_mean, "log_std": self.log_std, "mean_tau": self.mean_tau}


class Encoder:
    """GRU history encoder plus mark, metadata and sequence embeddings.

    The context for event ``i`` is ``[h_i || y_i || e_j]`` where ``h_i`` has
    consumed events ``1 .. i-1`` only; ``h_1`` is the zero initial state.
    """

    def __init__(self, rng, hidden=64, history=True, n_marks=0, mark_dim=32,
                 n_meta=0, meta_dim=64, n_sequences=0, seq_dim=32):
        self.hidden = hidden
        self.history = history
        self.history_enabled = history
        self.n_marks = n_marks
        self.n_meta = n_meta
        self.n_sequences = n_sequences
        self.params = {}
        in_dim = 1 + (mark_dim if n_marks else 0)
        if history:
            bound = 1.0 / np.sqrt(hidden)
            for name, shape in (("W_ih", (in_dim, 3 * hidden)), ("W_hh", (hidden, 3 * hidden)),
                                ("b_ih", (3 * hidden,)), ("b_hh", (3 * hidden,))):
                self.params[name] = ad.parameter(rng.uniform(-bound, bound, shape))
        if n_marks:
            self.params["mark_emb"] = ad.parameter(rng.normal(0.0, 1.0, (n_marks, mark_dim)))
        if n_meta:
            self.params["meta_emb"] = ad.parameter(rng.normal(0.0, 1.0, (n_meta, meta_dim)))
        if n_sequences:
            # small start so the learned directions dominate distances between rows
            self.params["seq_emb"] = ad.parameter(rng.normal(0.0, 0.01, (n_sequences, seq_dim)))
        self.context_dim = (hidden if history else 0) + (meta_dim if n_meta else 0) + \
            (seq_dim if n_sequences else 0)

    def input_features(self, tau, marks, scaling):
        """RNN input per event: centred log time, then the mark embedding."""
        tau = ad.constant(tau)
        x = (ad.log(tau) - scaling.log_mean) / scaling.log_std
        feats = [ad.reshape(x, x.shape + (1,))]
        if self.n_marks:
            feats.append(ad.gather(self.params["mark_emb"], marks))
        return feats[0] if len(feats) == 1 else ad.concat(feats, axis=-1)

    def step(self, x, h):
        p = self.params
        return gru_cell(x, h, p["W_ih"], p["W_hh"], p["b_ih"], p["b_hh"])

    def history_states(self, tau, marks, scaling):
        """Hidden states ``h_1 .. h_T`` for a padded batch ``tau`` (B, T)."""
        B, T = np.shape(ad.constant(tau).data)
        zeros = ad.constant(np.zeros((B, 1, self.hidden)))
        if T == 1:
            return zeros
        X = self.input_features(tau, marks, scaling)
        X = ad.index(X, (slice(None), slice(0, T - 1)))
        p = self.params
        hs = gru_sequence(X, p["W_ih"], p["W_hh"], p["b_ih"], p["b_hh"])
        return ad.concat([zeros, hs], axis=1)

    def assemble(self, h, meta=None, seq_idx=None, lead_shape=None):
        """Concatenate the enabled context parts along the last axis.

        ``h`` may be None when history is off; ``lead_shape`` then gives the
        leading shape (e.g. (B, T)) of the context.
        """
        parts = []
        if self.history:
            if not self.history_enabled:
                h = ad.constant(np.zeros(tuple(lead_shape) + (self.hidden,)))
            parts.append(h)
            lead_shape = h.shape[:-1]
        if self.n_meta:
            meta = np.asarray(meta)
            if meta.min() < 0 or meta.max() >= self.n_meta:
                raise IndexError("unknown metadata category")
            parts.append(ad.gather(self.params["meta_emb"], meta))
            lead_shape = meta.shape
        if self.n_sequences:
            e = ad.gather(self.params["seq_emb"], np.asarray(seq_idx))
            # (B, E) -> (B, ..., E) broadcast over the event axes
            extra = len(lead_shape) - 1
            e = ad.reshape(e, (e.shape[0],) + (1,) * extra + (e.shape[-1],))
            parts.append(e * np.ones(tuple(lead_shape) + (1,)))
        if not parts:
            return ad.constant(np.zeros(tuple(lead_shape) + (0,)))
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)

    def encode(self, tau, marks=None, meta=None, seq_idx=None, scaling=None):
        """Context vectors (B, T, C) for a padded batch."""
        tau_d = ad.constant(tau).data
        if self.n_marks and marks is not None:
            marks = np.asarray(marks)
            if marks.min() < 0 or marks.max() >= self.n_marks:
                raise IndexError("unknown mark index")
        h = None
        if self.history and self.history_enabled:
            h = self.history_states(tau, marks, scaling)
        return self.assemble(h, meta, seq_idx, lead_shape=tau_d.shape)


# ---------------------------------------------------------------- heads

@dataclass
class HeadParams:
    """Affine maps from the context to the mixture parameters (and mark head)."""
    V_w: ad.Tensor
    b_w: ad.Tensor
    V_s: ad.Tensor
    b_s: ad.Tensor
    V_mu: ad.Tensor
    b_mu: ad.Tensor

    @classmethod
    def init(cls, rng, context_dim, K):
        V_w, b_w = init_linear(rng, context_dim, K)
        V_s, b_s = init_linear(rng, context_dim, K)
        V_mu, b_mu = init_linear(rng, context_dim, K)
        return cls(V_w, b_w, V_s, b_s, V_mu, b_mu)

    @classmethod
    def zeros(cls, context_dim, K):
        z = lambda *s: ad.parameter(np.zeros(s))
        return cls(z(context_dim, K), z(K), z(context_dim, K), z(K), z(context_dim, K), z(K))

    def tensors(self):
        return {"V_w": self.V_w, "b_w": self.b_w, "V_s": self.V_s, "b_s": self.b_s,
                "V_mu": self.V_mu, "b_mu": self.b_mu}


def heads_mixture(c, p: HeadParams):
    """``w = softmax(V_w c + b_w)``, ``s = exp(V_s c + b_s)``, ``mu = V_mu c + b_mu``."""
    c = ad.constant(c)
    logits = affine(c, p.V_w, p.b_w)
    log_w = ad.log_softmax(logits, axis=-1)
    return MixtureParams(w=ad.exp(log_w), mu=affine(c, p.V_mu, p.b_mu),
                         s=ad.exp(affine(c, p.V_s, p.b_s)), log_w=log_w)


@dataclass
class MarkHeadParams:
    V1: ad.Tensor
    b1: ad.Tensor
    V2: ad.Tensor
    b2: ad.Tensor

    @classmethod
    def init(cls, rng, context_dim, n_classes, hidden=64):
        V1, b1 = init_linear(rng, context_dim, hidden)
        V2, b2 = init_linear(rng, hidden, n_classes)
        return cls(V1, b1, V2, b2)

    def tensors(self):
        return {"V1": self.V1, "b1": self.b1, "V2": self.V2, "b2": self.b2}


def mark_log_probs(c, p: MarkHeadParams):
    hidden = ad.tanh(affine(ad.constant(c), p.V1, p.b1))
    return ad.log_softmax(affine(hidden, p.V2, p.b2), axis=-1)


def heads_marks(c, p: MarkHeadParams):
    """Categorical mark distribution ``softmax(V2 tanh(V1 c + b1) + b2)``."""
    return ad.exp(mark_log_probs(c, p))
