"""Posterior-interval hypothesis tests, FPR / power and reward aggregation.

An effect counts as detected when the central credible interval of its
coefficient, estimated from posterior draws, excludes zero.  The analysis
posterior is the same conjugate model the bandit uses (prior N(0, v^2 I)),
fitted in one batch over every rewarded record regardless of policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .bandit import (
    FeatureEncoding,
    NoiseParams,
    ParameterError,
    PolicyTag,
    PosteriorState,
    coefficients_from_normals,
    init_posterior,
    noise_scale,
    update_posterior_batch,
)
from .logs import AssignmentLog
from .simulation import (
    ReplicationSet,
    as_noise,
    average_reward,
    run_replications,
    scenario_config,
)


@dataclass(frozen=True)
class EffectSpec:
    """A coefficient to test, named by its encoding term (e.g. ``Rationale*Mood``)."""

    name: str
    index: int | None = None
    null: float = 0.0
    level: float = 0.95
    draws: int = 10_000

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ParameterError("credibility level must lie in (0, 1)")
        if self.draws < 1:
            raise ParameterError("draws must be >= 1")

    def resolve(self, encoding: FeatureEncoding) -> int:
        return encoding.index(self.name) if self.index is None else self.index


@dataclass(frozen=True)
class TestResult:
    effect: str
    lo: float
    hi: float
    rejected: bool
    mean: float

    __test__ = False  # not a pytest class


def fit_analysis_posterior(
    log: AssignmentLog, encoding: FeatureEncoding, v: float
) -> PosteriorState:
    obs = log.observed
    if not obs.any():
        raise ValueError("log has no observed rewards to fit")
    names = list(encoding.context_terms)
    ctx = np.column_stack([log.column(c)[obs] for c in names]) if names else np.empty((obs.sum(), 0))
    X = encoding.design(log.arm[obs], ctx)
    return update_posterior_batch(init_posterior(encoding.d, v), X, log.reward[obs])


def _interval(samples: np.ndarray, effect: EffectSpec, mean: float) -> TestResult:
    tail = (1 - effect.level) / 2
    lo, hi = np.quantile(samples, [tail, 1 - tail])
    rejected = bool(lo > effect.null or hi < effect.null)
    return TestResult(effect.name, float(lo), float(hi), rejected, mean)


def credible_interval(
    state: PosteriorState,
    effect: EffectSpec,
    rng: np.random.Generator | int | None = None,
    encoding: FeatureEncoding | None = None,
) -> TestResult:
    """Empirical central interval of one coefficient from joint posterior draws."""
    return credible_intervals(state, [effect], rng, encoding)[0]


def credible_intervals(
    state: PosteriorState,
    effects: Sequence[EffectSpec],
    rng: np.random.Generator | int | None = None,
    encoding: FeatureEncoding | None = None,
) -> list[TestResult]:
    """Like :func:`credible_interval` for several effects sharing one set of draws."""
    rng = np.random.default_rng(rng)
    idx = []
    for e in effects:
        i = e.resolve(encoding) if encoding is not None else e.index
        if i is None or not 0 <= i < state.d:
            raise ParameterError(f"effect {e.name!r} has no valid coefficient index")
        idx.append(i)
    draws = max(e.draws for e in effects)
    samples = coefficients_from_normals(state, rng.standard_normal((state.d, draws)))
    return [
        _interval(samples[i, : e.draws], e, float(state.mu_hat[i])) for e, i in zip(effects, idx)
    ]


def _analysis_rng(master_seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(rep)], spawn_key=(1,)))


def test_replications(
    rset: ReplicationSet,
    effects: Sequence[EffectSpec],
    v: float | None = None,
    encoding: FeatureEncoding | None = None,
) -> list[list[TestResult]]:
    """Test every replication; outer list over replications.

    ``v`` and ``encoding`` default to the bandit's own.
    """
    encoding = encoding or rset.config.encoding
    v = rset.config.v if v is None else v
    out = []
    for rep, log in enumerate(rset.logs):
        state = fit_analysis_posterior(log, encoding, v)
        out.append(credible_intervals(state, effects, _analysis_rng(rset.master_seed, rep), encoding))
    return out


test_replications.__test__ = False


def estimate_fpr(
    rset: ReplicationSet, effect: EffectSpec | str, v: float | None = None
) -> float:
    """Rejection rate for an effect whose true value is zero."""
    effect = EffectSpec(effect) if isinstance(effect, str) else effect
    return estimate_power(rset, [effect], v)[effect.name]


def estimate_power(
    rset: ReplicationSet, effects: Sequence[EffectSpec | str], v: float | None = None
) -> dict[str, float]:
    effects = [EffectSpec(e) if isinstance(e, str) else e for e in effects]
    results = test_replications(rset, effects, v)
    return {
        e.name: float(np.mean([row[j].rejected for row in results])) for j, e in enumerate(effects)
    }


def mc_stderr(rate: float, reps: int) -> float:
    return math.sqrt(rate * (1 - rate) / reps)


def reward_report(
    rsets: Sequence[ReplicationSet], subgroups: Mapping[str, Mapping[str, float]] | None = None
) -> list[dict]:
    """Mean reward per policy x subgroup, averaged over replications.

    ``subgroups`` maps a label to a context filter, e.g. ``{"low mood":
    {"Mood": 0}}``.  An ``overall`` row is always included.  Replications
    with no observed reward in a cell are skipped for that cell.
    """
    groups = {"overall": {}, **(subgroups or {})}
    rows = []
    for rset in rsets:
        for policy in PolicyTag:
            if not any(log.policy_mask(policy).any() for log in rset.logs):
                continue
            for label, ctx in groups.items():
                vals = [average_reward(log, policy, ctx) for log in rset.logs]
                vals = [x for x in vals if x is not None]
                rows.append(
                    {
                        "policy": policy.value,
                        "subgroup": label,
                        "N": rset.config.n,
                        "mean_reward": float(np.mean(vals)) if vals else None,
                        "sd_across_reps": float(np.std(vals, ddof=1)) if len(vals) > 1 else None,
                        "reps": len(vals),
                        "seed": rset.master_seed,
                    }
                )
    return rows


SCENARIO_EFFECTS = {
    1: ("Rationale",),
    2: ("Rationale",),
    3: ("Rationale", "Mood", "Rationale*Mood"),
}


def evaluate_scenario(
    scenario: int,
    ns: Sequence[int] = (100, 1000),
    policies: Sequence[PolicyTag | str] = (PolicyTag.CONTEXTUAL_TS, PolicyTag.UNIFORM_RANDOM),
    effects: Sequence[str] | None = None,
    reps: int = 1000,
    seed: int = 0,
    noise: NoiseParams | float | None = None,
    analysis_noise: NoiseParams | float | None = None,
    draws: int = 10_000,
    workers: int | None = None,
) -> list[dict]:
    """FPR / power rows (policy x effect x N) for a built-in scenario.

    ``noise`` is the bandit's scale (default the calibrated table preset);
    the analysis reuses it unless ``analysis_noise`` is given.  Rows carry
    scenario, policy, N, effect, rate, mc_stderr, reps, seed, v, analysis_v.
    """
    if reps < 1:
        raise ParameterError("reps must be >= 1")
    effects = SCENARIO_EFFECTS[scenario] if effects is None else tuple(effects)
    specs = [EffectSpec(e, draws=draws) for e in effects]
    rows = []
    for policy in policies:
        policy = PolicyTag(policy)
        for n in ns:
            config = scenario_config(scenario, n, policy, noise)
            for spec in specs:
                spec.resolve(config.encoding)
            analysis_v = (
                config.v
                if analysis_noise is None
                else noise_scale(as_noise(analysis_noise), config.encoding.d)
            )
            rset = run_replications(config, reps, seed, workers)
            rates = estimate_power(rset, specs, analysis_v)
            for spec in specs:
                rate = rates[spec.name]
                rows.append(
                    {
                        "scenario": scenario,
                        "policy": policy.value,
                        "N": n,
                        "effect": spec.name,
                        "rate": rate,
                        "mc_stderr": mc_stderr(rate, reps),
                        "reps": reps,
                        "seed": seed,
                        "v": config.v,
                        "analysis_v": analysis_v,
                    }
                )
    return rows
