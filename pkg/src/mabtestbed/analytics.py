"""Deployment-style summaries of assignment logs.

Engagement, response rate by arm, mean/SEM reward per policy x arm, reward by
context level, and per-period allocation counts.  Tables store counts and
sums only; percentages and means are derived on output.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bandit import PolicyTag
from .logs import REWARD_GRID, AssignmentLog, scale_rating

__all__ = [
    "SummaryTable",
    "scale_rating",
    "engagement_summary",
    "response_rate_table",
    "reward_summary_table",
    "subgroup_reward",
    "allocation_dynamics",
    "arm_share_by_period",
]


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def _pct(num: int, den: int) -> float | None:
    return 100.0 * num / den if den else None


def mean_sem(values: np.ndarray) -> tuple[int, float | None, float | None]:
    """(n, mean, sem) with the n-1 sample sd; mean is None when n == 0, sem when n < 2."""
    n = len(values)
    mean = float(np.mean(values)) if n else None
    sem = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else None
    return n, mean, sem


@dataclass
class SummaryTable:
    """Rows of plain values with a fixed column order."""

    title: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [row[name] for row in self.rows]

    def row(self, **match) -> dict:
        for row in self.rows:
            if all(row.get(k) == v for k, v in match.items()):
                return row
        raise KeyError(match)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, self.columns)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: "" if row[k] is None else row[k] for k in self.columns})

    def to_json(self) -> str:
        return json.dumps({"title": self.title, "columns": self.columns, "rows": self.rows}, indent=2)


def engagement_summary(log: AssignmentLog) -> dict:
    """Assignment and rating counts; ratios are None for an empty denominator."""
    rated = log.observed
    users = {str(u) for u in log.user}
    raters = {str(u) for u in log.user[rated]}
    return {
        "assignments": len(log),
        "rated": int(rated.sum()),
        "rate": _ratio(int(rated.sum()), len(log)),
        "unique_users": len(users),
        "unique_raters": len(raters),
        "rater_fraction": _ratio(len(raters), len(users)),
    }


def _levels(log: AssignmentLog, levels: int | None) -> range:
    if levels is None:
        levels = max(2, int(log.arm.max()) + 1) if len(log) else 2
    return range(levels)


def _factor_log(log: AssignmentLog, factor: str | None) -> AssignmentLog:
    if factor is None:
        return log
    sub = log.for_decision_point(factor)
    if len(log) and not len(sub):
        raise KeyError(f"log has no records for factor {factor!r}")
    return sub


def response_rate_table(
    log: AssignmentLog, factor: str | None = None, levels: int | None = None
) -> SummaryTable:
    """No-response / responded / total per arm, plus a total row."""
    log = _factor_log(log, factor)
    table = SummaryTable(
        f"Response rate by arm ({factor or 'all'})",
        ["arm", "no_response", "responded", "total", "pct_no_response", "pct_responded"],
    )

    def add(label, mask):
        total = int(mask.sum())
        yes = int((mask & log.observed).sum())
        table.rows.append(
            {
                "arm": label,
                "no_response": total - yes,
                "responded": yes,
                "total": total,
                "pct_no_response": _pct(total - yes, total),
                "pct_responded": _pct(yes, total),
            }
        )

    for level in _levels(log, levels):
        add(level, log.arm == level)
    add("total", np.ones(len(log), dtype=bool))
    return table


def reward_summary_table(
    log: AssignmentLog, factor: str | None = None, levels: int | None = None
) -> SummaryTable:
    """N, mean and SEM of observed rewards per policy x arm."""
    log = _factor_log(log, factor)
    table = SummaryTable(
        f"Reward summary ({factor or 'all'})", ["factor", "policy", "arm", "N", "mean", "sem"]
    )
    for policy in PolicyTag:
        for level in _levels(log, levels):
            mask = log.observed & log.policy_mask(policy) & (log.arm == level)
            n, mean, sem = mean_sem(log.reward[mask])
            table.rows.append(
                {"factor": factor, "policy": policy.value, "arm": level, "N": n, "mean": mean, "sem": sem}
            )
    return table


def subgroup_reward(
    log: AssignmentLog,
    context_var: str,
    factor: str | None = None,
    levels: Sequence[float] | None = None,
) -> SummaryTable:
    """N, mean and SEM of observed rewards per context level x policy.

    Rows are ordered by ``levels`` (default: ascending values present in the
    log), then ContextualTS before UniformRandom.
    """
    log = _factor_log(log, factor)
    if context_var not in log.context_names:
        raise KeyError(f"log has no context variable {context_var!r}")
    values = log.column(context_var)
    if levels is None:
        levels = sorted(set(values[log.observed].tolist()))
    table = SummaryTable(
        f"Reward by {context_var}", [context_var, "policy", "N", "mean", "sem"]
    )
    for level in levels:
        for policy in PolicyTag:
            mask = log.observed & log.policy_mask(policy) & (values == level)
            n, mean, sem = mean_sem(log.reward[mask])
            table.rows.append(
                {context_var: level, "policy": policy.value, "N": n, "mean": mean, "sem": sem}
            )
    return table


def _period_index(log: AssignmentLog, n_periods: int, equal_count: bool) -> np.ndarray:
    n = len(log)
    if equal_count:
        order = np.argsort(log.t, kind="stable")
        idx = np.empty(n, dtype=int)
        for k, chunk in enumerate(np.array_split(order, n_periods)):
            idx[chunk] = k
        return idx
    clock = log.timestamp if n and not np.isnan(log.timestamp).any() else log.t.astype(float)
    if not n:
        return np.zeros(0, dtype=int)
    lo, hi = clock.min(), clock.max()
    if hi == lo:
        return np.zeros(n, dtype=int)
    return np.minimum(((clock - lo) / (hi - lo) * n_periods).astype(int), n_periods - 1)


def allocation_dynamics(
    log: AssignmentLog,
    n_periods: int = 4,
    levels: int | None = None,
    grid: Sequence[float] = REWARD_GRID,
    equal_count: bool = False,
) -> SummaryTable:
    """Long-format counts of (period, arm, reward category).

    Periods are equal-width slices of the timeline (timestamps when every
    record has one, time index otherwise), or equal-count slices.  The
    category is a grid value or ``"unrated"``.
    """
    if n_periods < 1:
        raise ValueError("n_periods must be >= 1")
    period = _period_index(log, n_periods, equal_count)
    categories = [*grid, "unrated"]
    table = SummaryTable("Allocation dynamics", ["period", "arm", "reward_category", "count"])
    for p in range(n_periods):
        in_p = period == p
        for level in _levels(log, levels):
            cell = in_p & (log.arm == level)
            for cat in categories:
                if cat == "unrated":
                    count = int((cell & ~log.observed).sum())
                else:
                    count = int((cell & (log.reward == cat)).sum())
                table.rows.append({"period": p, "arm": level, "reward_category": cat, "count": count})
    return table


def arm_share_by_period(dynamics: SummaryTable, arm: int = 1) -> list[float | None]:
    """Fraction of each period's assignments that went to ``arm``."""
    periods = sorted({row["period"] for row in dynamics.rows})
    shares = []
    for p in periods:
        rows = [r for r in dynamics.rows if r["period"] == p]
        total = sum(r["count"] for r in rows)
        hit = sum(r["count"] for r in rows if r["arm"] == arm)
        shares.append(_ratio(hit, total))
    return shares
