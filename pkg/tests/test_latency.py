import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ftproxy.simharness.latency import (
    LatencyModel,
    Purpose,
    Unsupported,
    ks_distance,
    min_of_n_cdf_oracle,
    percentile,
    stream,
)


def test_percentile_examples():
    assert percentile([10, 20, 30, 40], 0.5) == 20
    assert percentile(list(range(1, 101)), 0.99) == 99
    assert percentile([5], 0.01) == 5
    assert percentile([3, 1, 2], 1.0) == 3


@pytest.mark.parametrize("args", [([], 0.5), ([1], 0.0), ([1], 1.5)])
def test_percentile_invalid(args):
    with pytest.raises(ValueError):
        percentile(*args)


def test_percentile_matches_sort_and_index():
    rnd = random.Random(3)
    for _ in range(1000):
        xs = [rnd.uniform(0, 100) for _ in range(rnd.randint(1, 200))]
        q = rnd.choice([0.5, 0.9, 0.99, rnd.uniform(0.001, 1)])
        k = max(1, math.ceil(round(q * len(xs), 9)))
        assert percentile(xs, q) == sorted(xs)[k - 1]


def test_oracle_n1_is_identity():
    m = LatencyModel.lognormal(3.0, 0.5)
    for x in (1, 10, 20, 50):
        assert min_of_n_cdf_oracle(m, 1, x) == pytest.approx(m.cdf(x))


@given(st.floats(0.1, 1000), st.floats(0, 5000))
def test_min_of_two_exponentials_is_exponential_half_mean(mean, x):
    a = min_of_n_cdf_oracle(LatencyModel.exponential(mean), 2, x)
    b = LatencyModel.exponential(mean / 2).cdf(x)
    assert a == pytest.approx(b, abs=1e-12)


def test_empirical_has_no_closed_form():
    with pytest.raises(Unsupported):
        min_of_n_cdf_oracle(LatencyModel.empirical([1, 2, 3]), 2, 1.5)


def test_oracle_bad_n():
    with pytest.raises(ValueError):
        min_of_n_cdf_oracle(LatencyModel.fixed(1), 0, 1)


def test_streams_are_reproducible_and_independent():
    a = stream(1, 1, Purpose.SERVICE).random(5)
    b = stream(1, 1, Purpose.SERVICE).random(5)
    c = stream(1, 2, Purpose.SERVICE).random(5)
    d = stream(1, 1, Purpose.RETURN).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)


def test_sampler_matches_bulk_draw():
    m = LatencyModel.exponential(10)
    s = m.sampler(stream(5, 1, Purpose.SERVICE))
    got = [s() for _ in range(5000)]
    bulk = np.concatenate([m.draw(stream(5, 1, Purpose.SERVICE), 4096), ])
    assert got[:4096] == bulk.tolist()


@pytest.mark.parametrize("model", [LatencyModel.exponential(50), LatencyModel.lognormal(3, 0.7)])
def test_samples_fit_own_cdf(model):
    xs = model.draw(stream(9, 1, Purpose.SERVICE), 20000)
    assert (xs > 0).all()
    assert ks_distance(xs, model.cdf) < 0.015


def test_ks_distance_known():
    # uniform points against the uniform cdf on [0, 1]
    xs = [0.5]
    assert ks_distance(xs, lambda x: x) == pytest.approx(0.5)


def test_round_trip_dict(tmp_path):
    for m in (LatencyModel.fixed(3), LatencyModel.exponential(4), LatencyModel.lognormal(1, 2),
              LatencyModel.empirical([1, 2])):
        assert LatencyModel.from_dict(m.to_dict()) == m
    f = tmp_path / "s.txt"
    f.write_text("1.5\n2.5\n")
    assert LatencyModel.from_dict({"kind": "empirical", "file": "s.txt"}, tmp_path).samples == (1.5, 2.5)
    assert LatencyModel.from_dict({"kind": "lognormal", "median": math.e, "sigma": 1}).mu == pytest.approx(1)


@pytest.mark.parametrize("bad", [{"kind": "fixed", "mean": -1}, {"kind": "exponential", "mean": 0},
                                 {"kind": "lognormal", "mu": 0, "sigma": 0}, {"kind": "weibull", "mean": 1}])
def test_invalid_models(bad):
    with pytest.raises(ValueError):
        LatencyModel.from_dict(bad)


def test_expected_values():
    assert LatencyModel.lognormal(0, 1).expected == pytest.approx(math.exp(0.5))
    assert LatencyModel.empirical([1, 3]).expected == 2
