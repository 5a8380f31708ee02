"""Normalizing-flow densities on the positive half-line.

A :class:`FlowStack` maps an inter-event time to the unit interval through
``log``, a sequence of monotone layers, and a terminal sigmoid; the density of
``tau`` follows from the change of variables with a Uniform(0, 1) base. The
parametric layers are deep sigmoidal (DSF) and sum-of-squares polynomial (SOS)
transforms, optionally interleaved with frozen batch-norm affine layers.

Also here: the FullyNN cumulative-intensity baseline and the generic
density/intensity/merging utilities.
"""
from dataclasses import dataclass, field
from typing import Any, List, Optional

import numpy as np

from . import autodiff as ad


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def _expand(x):
    x = ad.constant(x)
    return ad.reshape(x, x.shape + (1,))


# ---------------------------------------------------------------- layer parameters

@dataclass
class DsfLayerParams:
    w: Any
    mu: Any
    s: Any
    log_w: Optional[Any] = None

    def logw(self):
        return ad.constant(self.log_w) if self.log_w is not None else ad.log(self.w)

    def inverse(self, x):
        """Apply the layer; returns ``(f(x), log f'(x))``."""
        return dsf_inverse(x, self, with_logdet=True)


@dataclass
class SosLayerParams:
    a: Any          # (..., R + 1, K)
    a0: Any = 0.0

    def inverse(self, x):
        return sos_inverse(x, self, with_logdet=True)


@dataclass
class BatchNormFlowParams:
    """Frozen affine layer ``(x - shift) / scale`` with dataset statistics."""
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not np.all(np.asarray(self.scale) > 0):
            raise ValueError("batch-norm flow scale must be positive")

    @classmethod
    def from_data(cls, x):
        x = np.asarray(x, dtype=np.float64)
        std = float(x.std())
        return cls(float(x.mean()), std if std > 0 else 1.0)

    def inverse(self, x):
        y = (ad.constant(x) - self.shift) / self.scale
        return y, ad.constant(-np.log(self.scale))


@dataclass
class FlowStack:
    """Inverse-direction layer list applied after ``log`` and before the sigmoid.

    The base density is Uniform(0, 1).
    """
    layers: List[Any] = field(default_factory=list)


# ---------------------------------------------------------------- layers

def dsf_inverse(x, p: DsfLayerParams, with_logdet=False):
    """``logit(sum_k w_k sigmoid((x - mu_k) / s_k))``, evaluated in log-space.

    Working with ``log y`` and ``log(1 - y)`` avoids clamping the inner sum
    before the logit; saturation only costs precision in the tails.
    """
    u = (_expand(x) - p.mu) / p.s
    lw = p.logw()
    ls_pos = ad.logsigmoid(u)
    ls_neg = ad.logsigmoid(-u)
    log_y = ad.logsumexp(lw + ls_pos, axis=-1)
    log_1my = ad.logsumexp(lw + ls_neg, axis=-1)
    out = log_y - log_1my
    if not with_logdet:
        return out
    log_dy = ad.logsumexp(lw + ls_pos + ls_neg - ad.log(p.s), axis=-1)
    return out, log_dy - log_y - log_1my


def _powers(x, n):
    """Stack ``[x**0, ..., x**n]`` along a new last axis."""
    x = ad.constant(x)
    cols = [ad.constant(np.ones(x.shape))]
    for _ in range(n):
        cols.append(cols[-1] * x)
    return ad.stack(cols, axis=-1)


def sos_inverse(x, p: SosLayerParams, with_logdet=False):
    """Sum-of-squares polynomial ``a0 + sum_k int_0^x (sum_p a_pk t^p)^2 dt``."""
    a = ad.constant(p.a)
    deg = a.shape[-2] - 1
    xp = _powers(x, 2 * deg + 1)                                     # (..., 2R + 2)
    pq = np.add.outer(np.arange(deg + 1), np.arange(deg + 1))
    integ = ad.index(xp, (Ellipsis, pq + 1)) / (pq + 1.0)            # (..., R+1, R+1)
    outer = ad.reshape(a, a.shape[:-2] + (deg + 1, 1, a.shape[-1])) * \
        ad.reshape(a, a.shape[:-2] + (1, deg + 1, a.shape[-1]))
    poly_int = ad.sum(ad.sum(ad.sum(outer * ad.reshape(integ, integ.shape + (1,)), -1), -1), -1)
    out = p.a0 + poly_int
    if not with_logdet:
        return out
    base = ad.index(xp, (Ellipsis, slice(0, deg + 1)))               # (..., R+1)
    poly = ad.sum(a * ad.reshape(base, base.shape + (1,)), axis=-2)  # (..., K)
    deriv = ad.sum(ad.square(poly), axis=-1)
    if np.any(deriv.data <= 0):
        raise ValueError("degenerate SOS layer: zero derivative")
    return out, ad.log(deriv)


# ---------------------------------------------------------------- stack

def flow_inverse(tau, stack: FlowStack):
    """Map ``tau`` to the pre-sigmoid variable; returns ``(x, log|dx/dtau|)``."""
    if np.any(_data(tau) <= 0):
        raise ValueError("tau must be strictly positive")
    x = ad.log(tau)
    logdet = -x
    for layer in stack.layers:
        x, ld = layer.inverse(x)
        logdet = logdet + ld
    return x, logdet


def flow_logpdf(tau, stack: FlowStack):
    x, logdet = flow_inverse(tau, stack)
    return logdet + ad.logsigmoid(x) + ad.logsigmoid(-x)


def flow_cdf(tau, stack: FlowStack):
    x, _ = flow_inverse(tau, stack)
    return ad.sigmoid(x)


def flow_log_survival(tau, stack: FlowStack):
    """``log(1 - F(tau))``, stable deep in the tail."""
    x, _ = flow_inverse(tau, stack)
    return ad.logsigmoid(-x)


def _bisect_monotone(cdf, z, tol, lo=1e-12, hi=1.0, max_doublings=200, max_iter=400):
    """Solve ``cdf(tau) = z`` elementwise for an increasing ``cdf`` by bisection in log-time."""
    z = np.asarray(z, dtype=np.float64)
    log_lo = np.full(z.shape, np.log(lo))
    log_hi = np.full(z.shape, np.log(hi))
    for _ in range(max_doublings):
        bad = cdf(np.exp(log_hi)) < z
        if not bad.any():
            break
        log_hi = np.where(bad, log_hi + np.log(2.0), log_hi)
    else:
        raise RuntimeError(f"no upper bracket within {max_doublings} doublings")
    for _ in range(max_doublings):
        bad = cdf(np.exp(log_lo)) > z
        if not bad.any():
            break
        log_lo = np.where(bad, log_lo - np.log(2.0), log_lo)
    else:
        raise RuntimeError(f"no lower bracket within {max_doublings} halvings")
    mid = 0.5 * (log_lo + log_hi)
    for _ in range(max_iter):
        f = cdf(np.exp(mid))
        done = np.abs(f - z) < tol
        if done.all():
            break
        up = f < z
        log_lo = np.where(done, log_lo, np.where(up, mid, log_lo))
        log_hi = np.where(done, log_hi, np.where(up, log_hi, mid))
        mid = np.where(done, mid, 0.5 * (log_lo + log_hi))
    return np.exp(mid)


def flow_sample(stack: FlowStack, rng, tol=1e-9, size=()):
    """Draw ``z ~ U(0, 1)`` and invert the stack numerically.

    Parameters of the stack broadcast against ``size``; the result satisfies
    ``|F(tau) - z| < tol`` wherever bisection can resolve it.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    lead = _stack_batch_shape(stack)
    shape = (tuple(np.atleast_1d(size)) if size != () else ()) + lead
    z = rng.random(shape)
    return _bisect_monotone(lambda t: flow_cdf(t, stack).data, z, tol)


def _stack_batch_shape(stack):
    shapes = []
    for layer in stack.layers:
        if isinstance(layer, DsfLayerParams):
            shapes.append(_data(layer.mu).shape[:-1])
        elif isinstance(layer, SosLayerParams):
            shapes.append(_data(layer.a).shape[:-2])
    return np.broadcast_shapes(*shapes) if shapes else ()


# ---------------------------------------------------------------- FullyNN

@dataclass
class FullyNnParams:
    """Weights of the cumulative-intensity network.

    ``W1`` (D, 1), ``W2`` (D, D) and ``W3`` (1, D) must be non-negative;
    ``V`` (D, H) maps the history embedding into the first bias.
    """
    W1: Any
    W2: Any
    W3: Any
    V: Any
    b0: Any
    b2: Any
    b3: Any

    def clip_(self):
        for w in (self.W1, self.W2, self.W3):
            arr = w.data if isinstance(w, ad.Tensor) else w
            np.maximum(arr, 0.0, out=arr)

    @classmethod
    def random(cls, rng, d=64, h=0, scale=1.0):
        return cls(
            W1=np.abs(rng.normal(0, scale, (d, 1))),
            W2=np.abs(rng.normal(0, scale / np.sqrt(d), (d, d))),
            W3=np.abs(rng.normal(0, scale / np.sqrt(d), (1, d))),
            V=rng.normal(0, scale, (d, h)),
            b0=rng.normal(0, scale, d),
            b2=rng.normal(0, scale, d),
            b3=float(rng.normal(0, scale)),
        )


def _fullynn_first_bias(p, h):
    V = ad.constant(p.V)
    if h is None or V.shape[1] == 0:
        return ad.constant(p.b0)
    return ad.matmul(ad.constant(h), ad.transpose(V)) + p.b0


def fullynn_forward(tau, p: FullyNnParams, h=None):
    """Cumulative intensity ``Lambda(tau)`` and its exact derivative ``lambda(tau)``.

    The derivative is carried alongside the forward pass as a tangent (forward
    mode), built from differentiable ops so the reverse pass can train
    through ``log lambda``.
    """
    tau = ad.constant(tau)
    w1 = ad.reshape(ad.constant(p.W1), (-1,))
    b1 = _fullynn_first_bias(p, h)
    u1 = _expand(tau) * w1 + b1
    a1 = ad.tanh(u1)
    da1 = (1.0 - ad.square(a1)) * w1
    W2t = ad.transpose(ad.constant(p.W2))
    a2 = ad.tanh(ad.matmul(a1, W2t) + p.b2)
    da2 = (1.0 - ad.square(a2)) * ad.matmul(da1, W2t)
    w3 = ad.reshape(ad.constant(p.W3), (-1,))
    u3 = ad.sum(a2 * w3, axis=-1) + p.b3
    du3 = ad.sum(da2 * w3, axis=-1)
    return ad.softplus(u3), ad.sigmoid(u3) * du3


def fullynn_cumint(tau, p: FullyNnParams, h=None):
    if np.any(_data(tau) < 0):
        raise ValueError("tau must be non-negative")
    return fullynn_forward(tau, p, h)[0]


def fullynn_intensity(tau, p: FullyNnParams, h=None):
    return fullynn_forward(tau, p, h)[1]


def fullynn_logpdf(tau, p: FullyNnParams, h=None):
    """``log lambda(tau) - Lambda(tau)``; note this density is deficient."""
    cum, lam = fullynn_forward(tau, p, h)
    return ad.log(lam + 1e-30) - cum


def fullynn_cumint_limit(p: FullyNnParams, h=None):
    """``lim_{tau -> inf} Lambda(tau)``: the first tanh layer saturates."""
    w1 = _data(p.W1).reshape(-1)
    b1 = _fullynn_first_bias(p, h).data
    a1 = np.where(w1 > 0, 1.0, np.tanh(b1))
    a2 = np.tanh(a1 @ _data(p.W2).T + _data(p.b2))
    u3 = a2 @ _data(p.W3).reshape(-1) + _data(p.b3)
    return np.logaddexp(0.0, u3)


def fullynn_total_mass(p: FullyNnParams, h=None):
    """Probability mass the model puts on ``(0, inf)``."""
    lam0 = fullynn_cumint(np.zeros(1) if h is None else np.zeros(len(h)), p, h).data
    lam_inf = fullynn_cumint_limit(p, h)
    out = np.exp(-lam0) - np.exp(-lam_inf)
    return float(out[0]) if h is None else out


def fullynn_sample(p: FullyNnParams, rng, h=None, size=(), tol=1e-9):
    """Inverse-method sampling: solve ``Lambda(tau) = E`` with ``E ~ Exp(1)``.

    Draws that land in the mass the network assigns to ``tau <= 0`` are
    returned as 0; draws beyond ``Lambda(inf)`` (no further event) as ``inf``.
    """
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    e = rng.standard_exponential(shape)
    lo = float(fullynn_cumint(np.zeros(1), p, h).data[0])
    hi = float(np.atleast_1d(fullynn_cumint_limit(p, h))[0])
    out = np.full(shape, np.inf)
    out[e <= lo] = 0.0
    inner = (e > lo) & (e < hi)
    if inner.any():
        target = -np.expm1(-e[inner])
        cdf = lambda t: -np.expm1(-fullynn_cumint(t.reshape(-1), p, h).data).reshape(t.shape)
        out[inner] = _bisect_monotone(cdf, target, tol)
    return out


# ---------------------------------------------------------------- intensity utilities

def intensity_from_density(logpdf_fn, cdf_fn, tau, saturation=1e-12):
    """Hazard ``p / (1 - F)`` and cumulative hazard ``-log(1 - F)``."""
    tau = np.asarray(tau, dtype=np.float64)
    F = _data(cdf_fn(tau))
    if np.any(F >= 1.0 - saturation):
        raise FloatingPointError("CDF saturated at 1; intensity undefined")
    lam = np.exp(_data(logpdf_fn(tau))) / (1.0 - F)
    return lam, -np.log1p(-F)


def merge_cdfs(F1, F2, tau=None):
    """CDF of the superposition of two independent processes.

    ``F1``/``F2`` are CDF callables (evaluated at ``tau``) or CDF values.
    """
    f1 = F1(tau) if callable(F1) else F1
    f2 = F2(tau) if callable(F2) else F2
    f1, f2 = _data(f1), _data(f2)
    return f1 + f2 - f1 * f2
