import math

import numpy as np
import pytest
from scipy import integrate, stats

from iftpp import generators as gen
from iftpp.data import EventSequence, write_jsonl

TRUE_NLL = {"poisson": 0.999, "renewal": 0.254, "self_correcting": 0.757, "hawkes1": 0.453, "hawkes2": -0.043}


def test_poisson_mean_gap():
    seq = gen.generate(gen.preset("poisson", 1, 10 ** 5, 3))[0]
    assert seq.inter_times.mean() == pytest.approx(1.0, rel=0.01)


def test_hawkes_stationary_rate():
    spec = gen.GeneratorSpec("hawkes", {"mu": 0.02, "alpha": [0.8], "beta": [1.0]}, 4, 5000, 1)
    seqs = gen.generate(spec)
    rate = sum(len(s) for s in seqs) / sum(s.arrival_times[-1] for s in seqs)
    assert rate == pytest.approx(0.1, rel=0.1)


def test_hawkes2_stationary_rate():
    seqs = gen.generate(gen.preset("hawkes2", 4, 5000, 2))
    rate = sum(len(s) for s in seqs) / sum(s.arrival_times[-1] for s in seqs)
    assert rate == pytest.approx(0.2 / (1 - 0.8), rel=0.1)


def test_self_correcting_is_regular():
    tau = gen.generate(gen.preset("self_correcting", 4, 2000, 0))[0].inter_times
    assert tau.std() / tau.mean() < 1.0


def test_self_correcting_gap_distribution():
    # first gap from t=0 with no history: F(tau) = 1 - exp(-(e^tau - 1))
    spec = gen.preset("self_correcting", 4000, 1, 5)
    first = np.array([s.arrival_times[0] for s in gen.generate(spec)])
    assert stats.kstest(first, lambda t: -np.expm1(-np.expm1(t))).statistic < 0.025


def test_renewal_moments():
    tau = gen.generate(gen.preset("renewal", 1, 10 ** 5, 0))[0].inter_times
    p = gen.PRESETS["renewal"][1]
    assert np.log(tau).mean() == pytest.approx(p["mu"], abs=0.03)
    assert np.log(tau).std() == pytest.approx(p["s"], rel=0.01)
    # mean of the gap distribution is one
    assert math.exp(p["mu"] + p["s"] ** 2 / 2) == pytest.approx(1.0)


def test_regime_flags_recorded():
    seq = gen.generate(gen.preset("regime_renewal", 1, 5000, 0))[0]
    flags = seq.metadata
    assert set(np.unique(flags)) == {0, 1}
    lt = np.log(seq.inter_times)
    assert lt[flags == 0].mean() == pytest.approx(-1.5, abs=0.05)
    assert lt[flags == 1].mean() == pytest.approx(1.0, abs=0.05)


def test_determinism(tmp_path):
    for name in gen.PRESETS:
        a = gen.generate(gen.preset(name, 3, 50, 11))
        b = gen.generate(gen.preset(name, 3, 50, 11))
        write_jsonl(tmp_path / "a.jsonl", a)
        write_jsonl(tmp_path / "b.jsonl", b)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    c = gen.generate(gen.preset("poisson", 3, 50, 12))
    assert not np.array_equal(a[0].arrival_times, c[0].arrival_times)


def test_sequences_do_not_depend_on_count():
    few = gen.generate(gen.preset("hawkes1", 2, 40, 4))
    many = gen.generate(gen.preset("hawkes1", 5, 40, 4))
    np.testing.assert_array_equal(few[1].arrival_times, many[1].arrival_times)


def test_invalid_specs_rejected():
    with pytest.raises(ValueError, match="unstable"):
        gen.GeneratorSpec("hawkes", {"mu": 0.1, "alpha": [0.6, 0.5], "beta": [1.0, 2.0]})
    with pytest.raises(ValueError):
        gen.GeneratorSpec("poisson", {}, n_events=0)
    with pytest.raises(ValueError):
        gen.GeneratorSpec("weibull")
    with pytest.raises(ValueError):
        gen.preset("hawkes3")


@pytest.mark.parametrize("name", sorted(TRUE_NLL))
def test_true_nll_matches_reference(name):
    spec = gen.preset(name, 64, 1024, 0)
    assert gen.true_nll(spec, gen.generate(spec)) == pytest.approx(TRUE_NLL[name], abs=0.03)


def test_poisson_nll_is_mean_gap():
    spec = gen.preset("poisson", 2, 100, 0)
    seqs = gen.generate(spec)
    assert gen.true_nll(spec, seqs) == pytest.approx(np.concatenate([s.inter_times for s in seqs]).mean())


@pytest.mark.parametrize("name", ["self_correcting", "hawkes1", "hawkes2"])
def test_conditional_densities_normalise(name):
    # the exact conditional density of the next gap must integrate to one for any history
    spec = gen.preset(name, 1, 6, 3)
    seq = gen.generate(spec)[0]
    t = seq.arrival_times

    def density(tau):
        trial = EventSequence(np.append(t, t[-1] + tau))
        return math.exp(gen.event_log_likelihoods(spec, trial)[-1])
    mass, _ = integrate.quad(density, 0, 200, limit=400, points=[0.1, 1, 10])
    assert mass == pytest.approx(1.0, abs=1e-7)


def test_hawkes_likelihood_matches_direct_intensity():
    spec = gen.preset("hawkes2", 1, 30, 8)
    seq = gen.generate(spec)[0]
    t = seq.arrival_times
    mu, alpha, beta = 0.2, np.array([0.4, 0.4]), np.array([1.0, 20.0])

    def lam(s):
        past = t[t < s]
        return mu + np.sum(alpha[:, None] * beta[:, None] * np.exp(-beta[:, None] * (s - past)))
    ll = gen.event_log_likelihoods(spec, seq)
    prev = 0.0
    for i in range(len(t)):
        comp, _ = integrate.quad(lam, prev, t[i], limit=200)
        assert ll[i] == pytest.approx(math.log(lam(t[i])) - comp, abs=1e-8)
        prev = t[i]


# ---------------------------------------------------------------- masking

def test_mask_zero_fraction_is_identity():
    seq = gen.generate(gen.preset("hawkes1", 1, 100, 0))[0]
    observed, (a, b), truth = gen.mask_interval(seq, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(observed.arrival_times, truth.arrival_times)
    assert a == b


def test_mask_partitions_sequence():
    seq = gen.generate(gen.preset("hawkes1", 1, 100, 0))[0]
    for s in range(20):
        observed, (a, b), truth = gen.mask_interval(seq, 1 / 3, np.random.default_rng(s))
        t = truth.arrival_times
        removed = t[(t > a) & (t < b)]
        assert len(removed) > 0
        assert not np.intersect1d(removed, observed.arrival_times).size
        np.testing.assert_array_equal(np.sort(np.concatenate([removed, observed.arrival_times])), t)
        span = t[-1]
        assert b - a >= span / 3
        assert b - a < span / 3 + np.max(np.diff(t))
        assert observed.extra["gap"] == [a, b]


def test_mask_rejects_bad_fraction():
    seq = gen.generate(gen.preset("poisson", 1, 10, 0))[0]
    with pytest.raises(ValueError):
        gen.mask_interval(seq, 1.0, np.random.default_rng(0))
