import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdiff.schedule import (
    NoiseSchedule,
    explicit_schedule,
    fibonacci_schedule,
    linear_schedule,
    schedule_from_dict,
    schedule_from_json,
    snr_stats,
    timestep_subsequence,
)


def telescoped(beta: np.ndarray) -> np.ndarray:
    """sum_i beta_i * abar_t / abar_i, by explicit double loop."""
    T = len(beta)
    out = np.empty(T)
    for t in range(T):
        acc = 0.0
        for i in range(t + 1):
            ratio = 1.0
            for j in range(i + 1, t + 1):
                ratio *= 1.0 - beta[j]
            acc += beta[i] * ratio
        out[t] = acc
    return out


def test_linear_endpoints_reference_range():
    s = linear_schedule(1000, 0.0001, 0.02)
    assert s.T == 1000
    assert s.beta_at(1) == pytest.approx(0.0001, abs=1e-18)
    assert s.beta_at(1000) == pytest.approx(0.02, abs=1e-18)
    d = np.diff(s.beta)
    np.testing.assert_allclose(d, d[0], rtol=1e-9)


def test_single_step_schedule():
    s = linear_schedule(1, 0.5, 0.5)
    assert list(s.beta) == [0.5]
    assert s.alpha_bar_at(1) == 0.5
    assert s.sigma_at(1) == pytest.approx(math.sqrt(0.5), rel=1e-15)


def test_constant_schedule_product():
    s = linear_schedule(10, 0.1, 0.1)
    direct = 1.0
    for _ in range(10):
        direct *= 0.9
    assert direct == pytest.approx(0.3486784401, rel=1e-10)
    assert abs(s.alpha_bar_at(10) - direct) <= 1e-12 * direct


@pytest.mark.parametrize("T,a,b", [(0, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.1, 1.0), (10, 0.3, 0.2)])
def test_linear_rejects_bad_arguments(T, a, b):
    with pytest.raises(ValueError):
        linear_schedule(T, a, b)


def test_fibonacci_by_hand():
    s = fibonacci_schedule(5, 1e-6, 2e-6)
    np.testing.assert_allclose(s.beta, [1e-6, 2e-6, 3e-6, 5e-6, 8e-6], rtol=1e-12)


def test_fibonacci_two_steps_is_seeds():
    s = fibonacci_schedule(2, 0.01, 0.03)
    assert list(s.beta) == [0.01, 0.03]


def test_fibonacci_25_steps_increasing():
    s = fibonacci_schedule(25, 1e-6, 2e-6)
    assert np.all(np.diff(s.beta) > 0)
    assert np.all(s.beta < 1)


def test_fibonacci_clips_at_ceiling():
    s = fibonacci_schedule(40, 1e-3, 2e-3, beta_max=0.5)
    assert s.beta.max() == 0.5
    with pytest.raises(ValueError):
        fibonacci_schedule(5, 0.1, 0.2, beta_max=1.0)


def test_snr_stats_examples():
    s = linear_schedule(1000, 0.0001, 0.02)
    m, sd = snr_stats(s, 1)
    assert m == pytest.approx(math.sqrt(0.9999), rel=1e-14)
    assert sd == pytest.approx(math.sqrt(0.0001), rel=1e-9)
    m, sd = snr_stats(s, 1000)
    assert m < 0.01 and sd > 0.9999
    c = linear_schedule(10, 0.1, 0.1)
    m, sd = snr_stats(c, 10)
    assert m == pytest.approx(0.9 ** 5, rel=1e-12)
    assert sd == pytest.approx(math.sqrt(1 - 0.9 ** 10), rel=1e-12)
    for bad in (0, 11):
        with pytest.raises(ValueError):
            snr_stats(c, bad)


betas = st.lists(st.floats(1e-5, 0.5), min_size=1, max_size=40)


@given(betas)
@settings(max_examples=60, deadline=None)
def test_schedule_invariants(bs):
    s = explicit_schedule(bs)
    assert np.array_equal(s.alpha, 1.0 - s.beta)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] == s.alpha[0]
    ratio = s.alpha_bar[1:] / s.alpha_bar[:-1]
    np.testing.assert_allclose(ratio, s.alpha[1:], rtol=1e-12)
    np.testing.assert_allclose(s.sigma ** 2, s.beta, rtol=1e-15)
    for t in range(1, s.T + 1):
        m, sd = snr_stats(s, t)
        assert m * m + sd * sd == pytest.approx(1.0, abs=1e-14)


@given(betas)
@settings(max_examples=40, deadline=None)
def test_telescoping_identity(bs):
    s = explicit_schedule(bs)
    np.testing.assert_allclose(telescoped(s.beta), s.one_minus_alpha_bar, rtol=1e-12)
    np.testing.assert_allclose(s.one_minus_alpha_bar, 1.0 - s.alpha_bar, rtol=1e-9)


def test_schedule_is_immutable():
    s = linear_schedule(10, 0.01, 0.02)
    with pytest.raises(ValueError):
        s.beta[0] = 0.5
    with pytest.raises(Exception):
        s.kind = "other"


def test_json_round_trip():
    for s in (linear_schedule(50, 1e-4, 0.02), fibonacci_schedule(25, 1e-6, 2e-6),
              explicit_schedule([0.1, 0.2, 0.3])):
        back = schedule_from_json(s.to_json())
        assert back == s
        assert back.digest() == s.digest()
        assert json.loads(s.to_json())["type"] == s.kind


def test_json_rejects_inconsistent_beta():
    d = linear_schedule(5, 0.1, 0.2).to_dict()
    d["beta"][2] = 0.3
    with pytest.raises(ValueError):
        schedule_from_dict(d)
    with pytest.raises(ValueError):
        schedule_from_dict({"type": "cosine", "T": 5})


def test_invalid_beta_rejected():
    for bad in ([], [0.0], [1.0], [0.1, float("nan")]):
        with pytest.raises(ValueError):
            NoiseSchedule(np.array(bad))


def test_timestep_subsequence():
    assert timestep_subsequence(1000, 10) == list(range(100, 1001, 100))
    for T in (7, 100, 1000):
        for n in (1, 3, 6, T):
            seq = timestep_subsequence(T, n)
            assert len(seq) == n and seq[-1] == T and seq[0] >= 1
            assert all(b > a for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        timestep_subsequence(10, 11)
