"""Closed-form densities for positive inter-event times.

All functions accept plain numbers, numpy arrays or :class:`~iftpp.autodiff.Tensor`
objects. Parameters broadcast over leading dimensions; mixture parameters carry
the component axis last. Log-densities and CDFs are returned as tensors so they
can sit inside a training graph; call ``float()`` or ``.data`` for plain values.
"""
import math
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from . import autodiff as ad

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
EULER_GAMMA = 0.5772156649015329


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def _check_positive(tau, name="tau"):
    if np.any(_data(tau) <= 0):
        raise ValueError(f"{name} must be strictly positive")


@dataclass
class MixtureParams:
    """Weights, log-space means and log-space scales of a log-normal mixture.

    ``log_w`` may be supplied alongside ``w`` (heads produce it via log-softmax)
    to keep the log-density stable when some weights underflow.
    """
    w: Any
    mu: Any
    s: Any
    log_w: Optional[Any] = None

    def logw(self):
        if self.log_w is not None:
            return ad.constant(self.log_w)
        return ad.log(self.w)

    @property
    def n_components(self):
        return _data(self.mu).shape[-1]

    def validate(self, atol=1e-9):
        w, s = _data(self.w), _data(self.s)
        if np.any(w < 0) or not np.allclose(w.sum(-1), 1.0, atol=atol):
            raise ValueError("mixture weights must lie on the simplex")
        if np.any(s <= 0):
            raise ValueError("mixture scales must be positive")
        return self

    def numpy(self):
        log_w = None if self.log_w is None else _data(self.log_w)
        return MixtureParams(_data(self.w), _data(self.mu), _data(self.s), log_w)


@dataclass
class GompertzParams:
    """Shape ``alpha`` and rate ``beta`` of a Gompertz distribution."""
    alpha: Any
    beta: Any

    def validate(self):
        if np.any(_data(self.alpha) <= 0) or np.any(_data(self.beta) <= 0):
            raise ValueError("Gompertz parameters must be positive")
        return self


@dataclass
class ExponentialParams:
    c: Any

    def validate(self):
        if np.any(_data(self.c) <= 0):
            raise ValueError("exponential rate must be positive")
        return self


# ---------------------------------------------------------------- log-normal mixture

def lognormmix_logpdf(tau, p: MixtureParams):
    """Log-density of the log-normal mixture, evaluated with log-sum-exp."""
    _check_positive(tau)
    log_tau = ad.log(tau)
    z = (ad.reshape(log_tau, log_tau.shape + (1,)) - p.mu) / p.s
    comp = p.logw() - ad.log(p.s) - LOG_SQRT_2PI - 0.5 * ad.square(z)
    return ad.logsumexp(comp, axis=-1) - log_tau


def lognormmix_cdf(tau, p: MixtureParams, strict=True):
    """CDF ``sum_k w_k Phi((log tau - mu_k) / s_k)``.

    With ``strict=False`` non-positive ``tau`` maps to 0 instead of raising.
    """
    t = _data(tau)
    if np.any(t <= 0):
        if strict:
            raise ValueError("tau must be strictly positive")
        safe = np.where(t > 0, t, 1.0)
        val = lognormmix_cdf(safe, p)
        return ad.where(t > 0, val, 0.0)
    log_tau = ad.log(tau)
    z = (ad.reshape(log_tau, log_tau.shape + (1,)) - p.mu) / p.s
    return ad.sum(p.w * ad.normcdf(z), axis=-1)


def lognormmix_mean(p: MixtureParams):
    return ad.sum(p.w * ad.exp(p.mu + 0.5 * ad.square(p.s)), axis=-1)


def _gumbel(rng, shape):
    u = rng.random(shape)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def lognormmix_sample(p: MixtureParams, rng, size=()):
    """Closed-form sampling: categorical component, then a scaled normal in log-space.

    The component is drawn with the Gumbel-max trick so that, for a given
    generator state, this matches the forward value of
    :func:`lognormmix_sample_reparam`.
    """
    q = p.numpy()
    size = tuple(np.atleast_1d(size)) if size != () else ()
    lead = q.mu.shape[:-1]
    k = q.mu.shape[-1]
    with np.errstate(divide="ignore"):
        log_w = q.log_w if q.log_w is not None else np.log(q.w)
    gumbel = _gumbel(rng, size + lead + (k,))
    eps = rng.standard_normal(size + lead)
    idx = np.argmax(log_w + gumbel, axis=-1)
    mu = np.take_along_axis(np.broadcast_to(q.mu, size + lead + (k,)), idx[..., None], -1)[..., 0]
    s = np.take_along_axis(np.broadcast_to(q.s, size + lead + (k,)), idx[..., None], -1)[..., 0]
    return np.exp(s * eps + mu)


def lognormmix_sample_reparam(p: MixtureParams, rng, temperature=1.0, noise=None):
    """Differentiable sample via the straight-through Gumbel-softmax estimator.

    The forward value uses the hard one-hot argmax of the relaxed component
    vector; gradients flow through the relaxed softmax into the weights and
    through ``exp(s * eps + mu)`` into the means and scales. ``noise`` may fix
    the ``(gumbel, eps)`` draws.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    mu = ad.constant(p.mu)
    lead, k = mu.shape[:-1], mu.shape[-1]
    if noise is None:
        gumbel = _gumbel(rng, lead + (k,))
        eps = rng.standard_normal(lead)
    else:
        gumbel, eps = (np.asarray(n, dtype=np.float64) for n in noise)
    relaxed = ad.softmax((p.logw() + gumbel) / temperature, axis=-1)
    hard = np.zeros(relaxed.shape)
    np.put_along_axis(hard, np.argmax(relaxed.data, axis=-1)[..., None], 1.0, axis=-1)
    z = ad.straight_through(hard, relaxed)
    scale = ad.sum(z * p.s, axis=-1)
    loc = ad.sum(z * p.mu, axis=-1)
    return ad.exp(scale * eps + loc)


def lognormal_logpdf(tau, mu, s):
    """Single log-normal, i.e. the one-component mixture."""
    mu, s = ad.constant(mu), ad.constant(s)
    one = np.ones(mu.shape + (1,))
    p = MixtureParams(one, ad.reshape(mu, mu.shape + (1,)), ad.reshape(s, s.shape + (1,)),
                      log_w=np.zeros(mu.shape + (1,)))
    return lognormmix_logpdf(tau, p)


# ---------------------------------------------------------------- Gompertz

def gompertz_logpdf(tau, p: GompertzParams):
    """``log alpha + beta tau - (alpha / beta) (exp(beta tau) - 1)``."""
    if np.any(_data(tau) < 0):
        raise ValueError("tau must be non-negative")
    p.validate()
    a, b = ad.constant(p.alpha), ad.constant(p.beta)
    bt = b * tau
    return ad.log(a) + bt - a / b * (ad.exp(bt) - 1.0)


def gompertz_logpdf_wd(tau, w, d):
    """Same density in the exponential-intensity form with ``alpha = e^d``, ``beta = w``."""
    w, d = ad.constant(w), ad.constant(d)
    x = w * tau + d
    return x - ad.exp(x) / w + ad.exp(d) / w


def gompertz_cumhazard(tau, p: GompertzParams):
    a, b = _data(p.alpha), _data(p.beta)
    return a / b * np.expm1(b * _data(tau))


def gompertz_cdf(tau, p: GompertzParams):
    return -np.expm1(-gompertz_cumhazard(np.maximum(_data(tau), 0.0), p))


def gompertz_sample(p: GompertzParams, rng, size=()):
    a, b = _data(p.alpha), _data(p.beta)
    shape = (tuple(np.atleast_1d(size)) if size != () else ()) + np.broadcast_shapes(a.shape, b.shape)
    e = rng.standard_exponential(shape)
    return np.log1p(b / a * e) / b


def _e1_series(x):
    total, term, k = 0.0, 1.0, 1
    while True:
        term *= -x / k
        contrib = term / k
        total += contrib
        if abs(contrib) < 1e-17 * max(abs(total), 1e-300) or k > 500:
            break
        k += 1
    return -EULER_GAMMA - math.log(x) - total


def _scaled_e1_cf(x):
    """``exp(x) * E1(x)`` by modified Lentz continued fraction, for x > 1."""
    tiny = 1e-300
    b = x + 1.0
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        a = -float(i * i)
        b += 2.0
        d = 1.0 / (a * d + b)
        c = b + a / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def _scalar_scaled_e1(x):
    if x <= 0:
        raise ValueError("E1 requires x > 0")
    if x <= 1.0:
        return math.exp(x) * _e1_series(x)
    return _scaled_e1_cf(x)


def expint_e1(x):
    """Exponential integral ``E1(x) = -Ei(-x)`` for ``x > 0``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.vectorize(lambda v: _scalar_scaled_e1(v) * math.exp(-v), otypes=[float])(x)
    return out if out.ndim else float(out)


def expi(x):
    """Exponential integral ``Ei(x)`` for ``x < 0``."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x >= 0):
        raise ValueError("expi is only implemented for negative arguments")
    return -expint_e1(-x)


def gompertz_mean(p: GompertzParams):
    """``(1 / beta) exp(alpha / beta) E1(alpha / beta)``."""
    p.validate()
    a, b = _data(p.alpha), _data(p.beta)
    out = np.vectorize(_scalar_scaled_e1, otypes=[float])(a / b) / b
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- exponential

def exponential_logpdf(tau, p: ExponentialParams):
    if np.any(_data(tau) < 0):
        raise ValueError("tau must be non-negative")
    p.validate()
    c = ad.constant(p.c)
    return ad.log(c) - c * tau


def exponential_cdf(tau, p: ExponentialParams):
    return -np.expm1(-_data(p.c) * np.maximum(_data(tau), 0.0))


def exponential_mean(p: ExponentialParams):
    return 1.0 / _data(p.c)


def exponential_sample(p: ExponentialParams, rng, size=()):
    c = _data(p.c)
    shape = (tuple(np.atleast_1d(size)) if size != () else ()) + c.shape
    return rng.standard_exponential(shape) / c
