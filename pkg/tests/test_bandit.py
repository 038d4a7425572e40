import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mabtestbed.bandit import (
    ArmSet,
    ContextSchema,
    ContextVariable,
    EncodingError,
    FeatureEncoding,
    NoiseParams,
    ParameterError,
    PolicyTag,
    PosteriorState,
    arm_selection_probability,
    best_arm,
    encode_features,
    init_posterior,
    noise_scale,
    sample_coefficients,
    select_arm_ts,
    select_arm_uniform,
    select_policy,
    update_posterior,
    update_posterior_batch,
)
from mabtestbed.simulation import discretize_reward

RAT = ArmSet("Rationale", 2)
ENC4 = FeatureEncoding.full(RAT, ["Mood"])


# -- noise scale ------------------------------------------------------------


def test_noise_scale_direct():
    assert noise_scale(NoiseParams(v=1.0), 4) == 1.0


def test_noise_scale_formula_d4():
    # 1 * sqrt(24 / 0.5 * 4 * ln 20)
    assert noise_scale(NoiseParams.from_bound(1, 0.5, 0.05), 4) == pytest.approx(23.98, abs=0.01)


def test_noise_scale_formula_unit_log():
    got = noise_scale(NoiseParams.from_bound(1, 0.5, math.exp(-1)), 1)
    assert got == pytest.approx(math.sqrt(48), rel=1e-12)
    assert got == pytest.approx(6.928, abs=1e-3)


@pytest.mark.parametrize(
    "params",
    [
        NoiseParams(v=0.0),
        NoiseParams(v=-1.0),
        NoiseParams.from_bound(1, 1.5, 0.05),
        NoiseParams.from_bound(1, 0.5, 0.0),
        NoiseParams.from_bound(-1, 0.5, 0.05),
    ],
)
def test_noise_scale_rejects_bad_params(params):
    with pytest.raises(ParameterError):
        noise_scale(params, 2)


# -- encoding ---------------------------------------------------------------


@pytest.mark.parametrize(
    "arm, mood, expected",
    [(1, 1, [1, 1, 1, 1]), (0, 1, [1, 0, 1, 0]), (1, 0, [1, 1, 0, 0]), (0, 0, [1, 0, 0, 0])],
)
def test_encode_features(arm, mood, expected):
    np.testing.assert_array_equal(encode_features(arm, {"Mood": mood}, ENC4), expected)


def test_encoding_term_names():
    assert ENC4.term_names == ("intercept", "Rationale", "Mood", "Rationale*Mood")
    assert ENC4.d == 4
    three = FeatureEncoding.full(ArmSet("Type", 3), ["K10"])
    assert three.term_names == ("intercept", "Type[1]", "Type[2]", "K10", "Type[1]*K10", "Type[2]*K10")
    np.testing.assert_array_equal(encode_features(2, {"K10": 3}, three), [1, 0, 1, 3, 0, 3])


def test_encoding_rejects_undeclared_interaction():
    with pytest.raises(ParameterError):
        FeatureEncoding(RAT, ("Mood",), (("Rationale", "K10"),))
    with pytest.raises(ParameterError):
        FeatureEncoding(RAT, ("Mood",), (("Link", "Mood"),))


def test_encoding_errors():
    with pytest.raises(EncodingError):
        encode_features(2, {"Mood": 0}, ENC4)
    with pytest.raises(EncodingError):
        encode_features(0, {}, ENC4)
    with pytest.raises(EncodingError):
        ENC4.design(None, np.zeros((3, 2)))


def test_schema_validate_fills_defaults():
    schema = ContextSchema((ContextVariable("Mood", default=0.0), ContextVariable("K10", (1, 2, 3, 4))))
    assert schema.validate({"K10": 2}) == {"K10": 2.0, "Mood": 0.0}
    with pytest.raises(EncodingError):
        schema.validate({"Mood": 1})  # K10 has no default
    with pytest.raises(EncodingError):
        schema.validate({"K10": 7})
    with pytest.raises(EncodingError):
        schema.validate({"K10": 1, "Other": 0})


# -- posterior --------------------------------------------------------------


def test_init_posterior():
    s = init_posterior(2, 1.0)
    np.testing.assert_array_equal(s.B, np.eye(2))
    np.testing.assert_array_equal(s.mu_hat, [0, 0])
    s4 = init_posterior(4, 0.5)
    np.testing.assert_array_equal(s4.B, np.eye(4))
    assert s4.v == 0.5
    np.testing.assert_array_equal(init_posterior(1, 1.0).B, [[1.0]])


def test_init_posterior_rejects_bad_args():
    with pytest.raises(ParameterError):
        init_posterior(0, 1.0)
    with pytest.raises(ParameterError):
        init_posterior(2, 0.0)


def test_single_update_hand_oracle():
    s = update_posterior(init_posterior(2, 1.0), np.array([1.0, 1.0]), 0.75)
    np.testing.assert_allclose(s.B, [[2, 1], [1, 2]])
    # [[2,1],[1,2]]^-1 = [[2,-1],[-1,2]]/3 ; times [.75,.75] -> [.25,.25]
    np.testing.assert_allclose(s.mu_hat, [0.25, 0.25], atol=1e-12)
    assert s.n_obs == 1


def test_zero_reward_leaves_f():
    s0 = update_posterior(init_posterior(2, 1.0), np.array([1.0, 0.0]), 0.5)
    s1 = update_posterior(s0, np.array([0.3, 1.0]), 0.0)
    np.testing.assert_array_equal(s1.f, s0.f)
    np.testing.assert_allclose(s1.B, s0.B + np.outer([0.3, 1.0], [0.3, 1.0]))


def test_null_feature_only_counts():
    s0 = update_posterior(init_posterior(3, 1.0), np.array([1.0, 1.0, 0.0]), 1.0)
    s1 = update_posterior(s0, np.zeros(3), 0.75)
    np.testing.assert_array_equal(s1.B, s0.B)
    np.testing.assert_array_equal(s1.mu_hat, s0.mu_hat)
    assert s1.n_obs == s0.n_obs + 1


def test_update_rejects_bad_shapes():
    with pytest.raises(ParameterError):
        update_posterior(init_posterior(2, 1.0), np.ones(3), 1.0)
    with pytest.raises(ParameterError):
        update_posterior(init_posterior(2, 1.0), np.ones(2), float("nan"))


def test_posterior_json_round_trip():
    s = update_posterior_batch(init_posterior(4, 0.3), np.eye(4)[[0, 1, 1, 3]], np.array([0.25, 1, 0.5, 0]))
    back = PosteriorState.from_json(s.to_json())
    np.testing.assert_array_equal(back.B, s.B)
    np.testing.assert_array_equal(back.mu_hat, s.mu_hat)
    assert back.v == s.v and back.n_obs == s.n_obs


records = st.integers(1, 5).flatmap(
    lambda d: st.tuples(
        st.just(d),
        arrays(np.float64, st.tuples(st.integers(0, 25), st.just(d)), elements=st.sampled_from([0.0, 1.0, 2.0, 3.0])),
        st.randoms(use_true_random=False),
    )
)


@given(records)
def test_sequential_equals_batch_any_order(case):
    d, X, rnd = case
    r = np.array([rnd.choice([0, 0.25, 0.5, 0.75, 1]) for _ in range(len(X))])
    batch = update_posterior_batch(init_posterior(d, 1.0), X, r)
    order = list(range(len(X)))
    rnd.shuffle(order)
    seq = init_posterior(d, 1.0)
    for i in order:
        seq = update_posterior(seq, X[i], r[i])
    assert batch.allclose(seq, atol=1e-9)
    assert seq.n_obs == batch.n_obs == len(X)


@given(records)
def test_min_eigenvalue_at_least_one(case):
    d, X, _ = case
    s = init_posterior(d, 1.0)
    for row in X:
        s = update_posterior(s, row, 0.5)
        assert np.linalg.eigvalsh(s.B).min() >= 1 - 1e-9


@given(records, st.floats(0.1, 10))
def test_reward_scaling(case, c):
    d, X, rnd = case
    r = np.array([rnd.random() for _ in range(len(X))])
    a = update_posterior_batch(init_posterior(d, 1.0), X, r)
    b = update_posterior_batch(init_posterior(d, 1.0), X, c * r)
    np.testing.assert_array_equal(a.B, b.B)
    np.testing.assert_allclose(b.f, c * a.f, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b.mu_hat, c * a.mu_hat, rtol=1e-9, atol=1e-12)


# -- sampling and arm choice ------------------------------------------------


def test_sample_degenerate_scale():
    s = update_posterior(init_posterior(2, 1e-12), np.array([1.0, 1.0]), 0.75)
    mu = sample_coefficients(s, np.random.default_rng(0))
    np.testing.assert_allclose(mu, s.mu_hat, atol=1e-9)


def test_sample_deterministic_per_seed():
    s = init_posterior(3, 1.0)
    a = sample_coefficients(s, np.random.default_rng(9))
    b = sample_coefficients(s, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_sample_covariance_monte_carlo():
    s = init_posterior(2, 1.0)
    rng = np.random.default_rng(1)
    draws = np.array([sample_coefficients(s, rng) for _ in range(100_000)])
    np.testing.assert_allclose(np.cov(draws.T), np.eye(2), atol=0.02)


def test_sample_covariance_matches_posterior():
    s = update_posterior_batch(init_posterior(2, 0.7), np.array([[1, 1], [1, 0], [1, 1.0]]), np.array([1, 0.5, 0.75]))
    rng = np.random.default_rng(2)
    draws = np.array([sample_coefficients(s, rng) for _ in range(100_000)])
    np.testing.assert_allclose(np.cov(draws.T), s.covariance(), atol=0.02)
    np.testing.assert_allclose(draws.mean(0), s.mu_hat, atol=0.01)


@pytest.mark.parametrize(
    "mu, mood, arm",
    [([0, 0.5, 0, 0], 0, 1), ([0, 0, 0, 0], 0, 0), ([0, 0.5, 0, -1], 1, 0), ([0, 0.5, 0, -1], 0, 1)],
)
def test_best_arm_dot_product(mu, mood, arm):
    assert best_arm(np.array(mu, float), {"Mood": mood}, ENC4) == arm


@given(arrays(np.float64, 4, elements=st.floats(-3, 3)), st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([0, 1]))
def test_shared_terms_never_change_argmax(mu, c_int, c_mood, mood):
    shifted = mu.copy()
    shifted[0] += c_int
    shifted[2] += c_mood
    assert best_arm(mu, {"Mood": mood}, ENC4) == best_arm(shifted, {"Mood": mood}, ENC4)


def test_select_arm_ts_checks_factor():
    with pytest.raises(EncodingError):
        select_arm_ts(init_posterior(4, 1), {"Mood": 0}, ArmSet("Link"), ENC4, np.random.default_rng(0))


def test_uniform_single_level():
    rng = np.random.default_rng(0)
    assert {select_arm_uniform(ArmSet("One", 1), rng) for _ in range(50)} == {0}


@pytest.mark.parametrize("levels", [2, 4])
def test_uniform_frequencies(levels):
    rng = np.random.default_rng(3)
    arms = ArmSet("F", levels)
    picks = np.array([select_arm_uniform(arms, rng) for _ in range(100_000)])
    np.testing.assert_allclose(np.bincount(picks, minlength=levels) / len(picks), 1 / levels, atol=0.01)


def test_select_policy():
    rng = np.random.default_rng(4)
    assert {select_policy(1.0, rng) for _ in range(100)} == {PolicyTag.CONTEXTUAL_TS}
    assert {select_policy(0.0, rng) for _ in range(100)} == {PolicyTag.UNIFORM_RANDOM}
    ts = sum(select_policy(0.5, rng) is PolicyTag.CONTEXTUAL_TS for _ in range(100_000))
    assert abs(ts / 100_000 - 0.5) <= 0.01
    with pytest.raises(ParameterError):
        select_policy(1.5, rng)


def test_selection_probability_symmetric():
    p = arm_selection_probability(init_posterior(2, 1.0), {}, RAT, FeatureEncoding(RAT), 10_000, 5)
    assert abs(p[0] - 0.5) <= 2 / math.sqrt(10_000)
    assert p.sum() == pytest.approx(1.0)


def test_selection_probability_strong_arm():
    s = init_posterior(4, 1.0)
    s = PosteriorState(s.B, s.f, np.array([0, 10.0, 0, 0]), 1.0)
    assert arm_selection_probability(s, {"Mood": 0}, RAT, ENC4, 10_000, 6)[1] > 0.99


def test_selection_probability_single_draw():
    p = arm_selection_probability(init_posterior(4, 1.0), {"Mood": 1}, RAT, ENC4, 1, 7)
    assert sorted(p.tolist()) == [0.0, 1.0]


def test_selection_probability_matches_ts_frequency():
    X = ENC4.design(np.array([0, 1, 1, 0, 1]), np.array([[0], [0], [1], [1], [0.0]]))
    s = update_posterior_batch(init_posterior(4, 0.6), X, np.array([0.5, 0.75, 0.25, 0.5, 1.0]))
    ctx = {"Mood": 0}
    p = arm_selection_probability(s, ctx, RAT, ENC4, 100_000, 11)
    rng = np.random.default_rng(12)
    picks = np.array([select_arm_ts(s, ctx, RAT, ENC4, rng) for _ in range(100_000)])
    freq = np.bincount(picks, minlength=2) / len(picks)
    np.testing.assert_allclose(freq, p, atol=0.01)
    assert 0.05 < p[1] < 0.95  # a non-degenerate case


# -- consistency against a ridge-regression oracle ---------------------------


def _expected_discretized(mean, sd=1 / 6):
    """E[round-to-grid(N(mean, sd^2))] by integrating over grid cells."""
    grid = [0, 0.25, 0.5, 0.75, 1]
    cuts = [-math.inf, 0.125, 0.375, 0.625, 0.875, math.inf]
    cdf = lambda x: 0.5 * (1 + math.erf((x - mean) / (sd * math.sqrt(2)))) if math.isfinite(x) else float(x > 0)
    return sum(g * (cdf(cuts[k + 1]) - cdf(cuts[k])) for k, g in enumerate(grid))


def test_scenario2_consistency_alternating_arms():
    rng = np.random.default_rng(2024)
    n = 10_000
    arms = np.arange(n) % 2
    raw = 0.5 + arms / 8 + rng.normal(0, 1 / 6, n)
    r = discretize_reward(raw)
    enc = FeatureEncoding(RAT)
    X = enc.design(arms, np.empty((n, 0)))
    s = update_posterior_batch(init_posterior(2, 1.0), X, r)
    ridge = np.linalg.solve(X.T @ X + np.eye(2), X.T @ r)
    np.testing.assert_allclose(s.mu_hat, ridge, atol=1e-9)
    oracle = _expected_discretized(0.625) - _expected_discretized(0.5)
    assert abs(s.mu_hat[1] - oracle) <= 0.02
    assert abs(s.mu_hat[1] - 0.125) <= 0.02
