"""Synthetic logs that encode the published deployment summaries.

The study's raw records are not public.  Each builder here produces a log
whose aggregate counts reproduce one published table exactly, so the
analytics arithmetic can be checked against it.  Tables were encoded
independently: their totals are not mutually consistent in the source
(e.g. the response-rate table covers 1,569 assignments, the engagement
figures 8,521), so no single log satisfies all of them.

Reward distributions for the mean/SEM cells are counts over the grid
(0, .25, .5, .75, 1) found by exhaustive search so that the 3-decimal
mean and SEM match the published values.
"""

from __future__ import annotations

import numpy as np

from .bandit import PolicyTag
from .logs import REWARD_GRID, AssignmentLog

TS = PolicyTag.CONTEXTUAL_TS
UR = PolicyTag.UNIFORM_RANDOM

# factor -> (policy, arm) -> counts over REWARD_GRID
REWARD_COUNTS = {
    "Link": {
        (TS, 1): (9, 12, 29, 65, 117),
        (TS, 0): (12, 18, 25, 47, 73),
        (UR, 1): (9, 22, 34, 57, 80),
        (UR, 0): (22, 28, 36, 50, 68),
    },
    "Rationale": {
        (TS, 1): (15, 25, 43, 77, 122),
        (TS, 0): (14, 13, 21, 45, 74),
        (UR, 1): (10, 21, 34, 52, 75),
        (UR, 0): (11, 18, 30, 45, 67),
    },
}

# published (N, mean, SEM) per cell, for checks
REWARD_TARGETS = {
    "Link": {(TS, 1): (232, 0.790, 0.018), (TS, 0): (175, 0.716, 0.024),
             (UR, 1): (202, 0.719, 0.021), (UR, 0): (204, 0.640, 0.024)},
    "Rationale": {(TS, 1): (282, 0.736, 0.018), (TS, 0): (167, 0.728, 0.025),
                  (UR, 1): (192, 0.710, 0.022), (UR, 0): (171, 0.703, 0.024)},
}

# arm -> (assignments, responded) for the Link response-rate table
RESPONSE_COUNTS = {1: (781, 171), 0: (788, 160)}
RESPONSE_PCT = {1: 22, 0: 20, "total": 21}

ENGAGEMENT = {"assignments": 8521, "rated": 813, "users": 1100, "raters": 230}

# (context level, policy) -> N of rated Link records, in published bar order
SUBGROUP_COUNTS = {
    "Mood": [((0, TS), 322), ((0, UR), 316), ((1, TS), 83), ((1, UR), 87)],
    "Activity": [((1, TS), 67), ((1, UR), 75), ((0, TS), 338), ((0, UR), 329)],
}


class _Builder:
    def __init__(self, context_names=()):
        self.context_names = tuple(context_names)
        self.cols = {k: [] for k in ("user", "dp", "policy", "ctx", "arm", "reward")}

    def add(self, n, dp, policy, arm, rewards=None, users=None, ctx=None):
        rewards = [np.nan] * n if rewards is None else list(rewards)
        users = [f"u{i}" for i in range(n)] if users is None else list(users)
        ctx = ctx if ctx is not None else [[0.0] * len(self.context_names)] * n
        self.cols["user"] += users
        self.cols["dp"] += [dp] * n
        self.cols["policy"] += [policy.code] * n
        self.cols["ctx"] += list(ctx)
        self.cols["arm"] += [arm] * n
        self.cols["reward"] += rewards

    def build(self) -> AssignmentLog:
        n = len(self.cols["arm"])
        return AssignmentLog(
            self.context_names,
            t=np.arange(1, n + 1),
            user=np.array(self.cols["user"], dtype=object),
            decision_point=np.array(self.cols["dp"], dtype=object),
            policy=np.array(self.cols["policy"], dtype=np.int8),
            context=np.array(self.cols["ctx"], dtype=float).reshape(n, len(self.context_names)),
            arm=np.array(self.cols["arm"], dtype=np.int64),
            reward=np.array(self.cols["reward"], dtype=float),
        )


def _grid_values(counts) -> np.ndarray:
    return np.repeat(REWARD_GRID, counts)


def reward_summary_log(factors=("Link", "Rationale")) -> AssignmentLog:
    """Rated records only, one decision point per factor."""
    b = _Builder()
    for factor in factors:
        for (policy, arm), counts in REWARD_COUNTS[factor].items():
            vals = _grid_values(counts)
            b.add(len(vals), factor, policy, arm, vals)
    return b.build()


def response_rate_log() -> AssignmentLog:
    """Link assignments with the published responded / total counts per arm."""
    b = _Builder()
    for arm, (total, yes) in RESPONSE_COUNTS.items():
        rewards = [0.75] * yes + [np.nan] * (total - yes)
        policies = [TS, UR]
        for k, policy in enumerate(policies):
            idx = slice(k, None, 2)
            b.add(len(rewards[idx]), "Link", policy, arm, rewards[idx])
    return b.build()


def engagement_log() -> AssignmentLog:
    """The Link reward-summary records padded with unrated assignments.

    Ratings are spread over the first ``raters`` users and unrated
    assignments over all ``users`` users.
    """
    e = ENGAGEMENT
    b = _Builder()
    k = 0
    for (policy, arm), counts in REWARD_COUNTS["Link"].items():
        vals = _grid_values(counts)
        users = [f"u{(k + i) % e['raters']}" for i in range(len(vals))]
        k += len(vals)
        b.add(len(vals), "Link", policy, arm, vals, users)
    unrated = e["assignments"] - e["rated"]
    users = [f"u{i % e['users']}" for i in range(unrated)]
    arms = np.arange(unrated) % 2
    for arm in (0, 1):
        sel = [u for u, a in zip(users, arms) if a == arm]
        b.add(len(sel), "Link", UR if arm else TS, arm, None, sel)
    return b.build()


def subgroup_log(context_var: str) -> AssignmentLog:
    """Rated Link records split by one context variable.

    Only the per-bar N is published, so rewards are placeholder grid values.
    The two panels are encoded separately because their UniformRandom
    totals differ by one (403 vs 404).
    """
    b = _Builder((context_var,))
    for (level, policy), n in SUBGROUP_COUNTS[context_var]:
        rewards = np.resize(REWARD_GRID[1:], n)
        b.add(n, "Link", policy, 1, rewards, ctx=[[level]] * n)
    return b.build()
