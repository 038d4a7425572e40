"""Assignment logs: the record type, a columnar container, CSV / JSON-lines IO.

CSV layout, one assignment per row::

    t,user,decision_point,policy,<context columns...>,arm,reward[,timestamp]

``reward`` is empty when the assignment was never rated.  Imported logs may
carry a ``rating`` column (1..5) instead of ``reward``; it is scaled onto the
reward grid on read.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, TextIO

import numpy as np

from .bandit import PolicyTag

REWARD_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
_FIXED_HEAD = ("t", "user", "decision_point", "policy")


class LogParseError(ValueError):
    pass


def scale_rating(rating: int) -> float:
    """Map a 1..5 helpfulness rating onto {0, .25, .5, .75, 1}."""
    if isinstance(rating, float) and rating.is_integer():
        rating = int(rating)
    if isinstance(rating, bool) or not isinstance(rating, (int, np.integer)) or not 1 <= rating <= 5:
        raise ValueError(f"rating must be an integer in 1..5, got {rating!r}")
    return (int(rating) - 1) / 4


@dataclass
class AssignmentRecord:
    t: int
    user: str
    decision_point: str
    policy: PolicyTag
    context: dict[str, float]
    arm: int
    reward: float | None = None
    timestamp: float | None = None


@dataclass(eq=False)
class AssignmentLog:
    """Column-oriented assignment log.

    Iterating yields :class:`AssignmentRecord` objects; the arrays are what
    the simulators and analyses work on.  ``reward`` holds NaN for
    assignments without an observed reward.
    """

    context_names: tuple[str, ...]
    t: np.ndarray
    user: np.ndarray
    decision_point: np.ndarray
    policy: np.ndarray
    context: np.ndarray
    arm: np.ndarray
    reward: np.ndarray
    timestamp: np.ndarray = field(default=None)

    def __post_init__(self):
        self.context_names = tuple(self.context_names)
        n = len(self.t)
        if self.timestamp is None:
            self.timestamp = np.full(n, np.nan)
        self.context = np.asarray(self.context, dtype=float).reshape(n, len(self.context_names))

    @classmethod
    def empty(cls, context_names: Sequence[str] = ()) -> "AssignmentLog":
        return cls.from_records([], context_names)

    @classmethod
    def from_records(
        cls, records: Iterable[AssignmentRecord], context_names: Sequence[str] | None = None
    ) -> "AssignmentLog":
        records = list(records)
        if context_names is None:
            context_names = tuple(records[0].context) if records else ()
        return cls(
            context_names=tuple(context_names),
            t=np.array([r.t for r in records], dtype=np.int64),
            user=np.array([r.user for r in records], dtype=object),
            decision_point=np.array([r.decision_point for r in records], dtype=object),
            policy=np.array([PolicyTag(r.policy).code for r in records], dtype=np.int8),
            context=np.array(
                [[r.context[c] for c in context_names] for r in records], dtype=float
            ),
            arm=np.array([r.arm for r in records], dtype=np.int64),
            reward=np.array(
                [np.nan if r.reward is None else r.reward for r in records], dtype=float
            ),
            timestamp=np.array(
                [np.nan if r.timestamp is None else r.timestamp for r in records], dtype=float
            ),
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> AssignmentRecord:
        reward = self.reward[i]
        ts = self.timestamp[i]
        user = self.user[i]
        return AssignmentRecord(
            t=int(self.t[i]),
            user=str(user),
            decision_point=str(self.decision_point[i]),
            policy=PolicyTag.from_code(self.policy[i]),
            context={c: float(x) for c, x in zip(self.context_names, self.context[i])},
            arm=int(self.arm[i]),
            reward=None if np.isnan(reward) else float(reward),
            timestamp=None if np.isnan(ts) else float(ts),
        )

    def __iter__(self) -> Iterator[AssignmentRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def observed(self) -> np.ndarray:
        return ~np.isnan(self.reward)

    def policy_mask(self, policy: PolicyTag) -> np.ndarray:
        return self.policy == PolicyTag(policy).code

    def column(self, name: str) -> np.ndarray:
        try:
            return self.context[:, self.context_names.index(name)]
        except ValueError:
            raise KeyError(f"log has no context variable {name!r}") from None

    def select(self, mask: np.ndarray) -> "AssignmentLog":
        return AssignmentLog(
            self.context_names,
            self.t[mask],
            self.user[mask],
            self.decision_point[mask],
            self.policy[mask],
            self.context[mask],
            self.arm[mask],
            self.reward[mask],
            self.timestamp[mask],
        )

    def for_decision_point(self, name: str) -> "AssignmentLog":
        return self.select(self.decision_point == name)

    def equals(self, other: "AssignmentLog") -> bool:
        return (
            self.context_names == other.context_names
            and len(self) == len(other)
            and np.array_equal(self.t, other.t)
            and [str(u) for u in self.user] == [str(u) for u in other.user]
            and list(self.decision_point) == list(other.decision_point)
            and np.array_equal(self.policy, other.policy)
            and np.array_equal(self.context, other.context)
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.reward, other.reward, equal_nan=True)
            and np.array_equal(self.timestamp, other.timestamp, equal_nan=True)
        )


def concat_logs(logs: Sequence[AssignmentLog]) -> AssignmentLog:
    if not logs:
        return AssignmentLog.empty()
    names = logs[0].context_names
    if any(log.context_names != names for log in logs):
        raise ValueError("cannot concatenate logs with different context columns")
    return AssignmentLog(
        names,
        *(np.concatenate([getattr(log, col) for log in logs]) for col in (
            "t", "user", "decision_point", "policy", "context", "arm", "reward", "timestamp"
        )),
    )


def _fmt(x: float) -> str:
    if math.isnan(x):
        return ""
    if float(x).is_integer():
        return str(int(x))
    return repr(float(x))


def write_csv(log: AssignmentLog, path: str | Path | TextIO) -> None:
    """Write to a path or an already open text stream."""
    if hasattr(path, "write"):
        _write_csv_rows(log, path)
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        _write_csv_rows(log, fh)


def _write_csv_rows(log: AssignmentLog, fh: TextIO) -> None:
    writer = csv.writer(fh)
    writer.writerow([*_FIXED_HEAD, *log.context_names, "arm", "reward", "timestamp"])
    for i in range(len(log)):
        writer.writerow(
            [
                int(log.t[i]),
                log.user[i],
                log.decision_point[i],
                PolicyTag.from_code(log.policy[i]).value,
                *(_fmt(x) for x in log.context[i]),
                int(log.arm[i]),
                _fmt(log.reward[i]),
                _fmt(log.timestamp[i]),
            ]
        )


def _parse_row(row: dict, context_names, rating: bool, lineno: int) -> AssignmentRecord:
    try:
        value = row["rating" if rating else "reward"]
        if value in ("", None):
            reward = None
        elif rating:
            reward = scale_rating(int(value))
        else:
            reward = float(value)
            if reward not in REWARD_GRID:
                raise ValueError(f"reward {reward} is not on the grid {REWARD_GRID}")
        ts = row.get("timestamp")
        return AssignmentRecord(
            t=int(row["t"]),
            user=str(row["user"]),
            decision_point=str(row["decision_point"]),
            policy=PolicyTag(row["policy"]),
            context={c: float(row[c]) for c in context_names},
            arm=int(row["arm"]),
            reward=reward,
            timestamp=None if ts in ("", None) else float(ts),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise LogParseError(f"row {lineno}: {exc}") from None


def _records_to_log(records: list[AssignmentRecord], context_names, lines: list[int]) -> AssignmentLog:
    for i in range(1, len(records)):
        if records[i].t <= records[i - 1].t:
            raise LogParseError(f"row {lines[i]}: time index {records[i].t} is not increasing")
    return AssignmentLog.from_records(records, context_names)


def read_csv(path: str | Path) -> AssignmentLog:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise LogParseError(f"{path}: empty file, expected a header row")
        missing = [c for c in (*_FIXED_HEAD, "arm") if c not in header]
        rating = "reward" not in header and "rating" in header
        if missing or ("reward" not in header and not rating):
            raise LogParseError(f"{path}: header is missing {missing or ['reward']}")
        reserved = {*_FIXED_HEAD, "arm", "reward", "rating", "timestamp"}
        context_names = tuple(c for c in header if c not in reserved)
        records, lines = [], []
        for row in reader:
            lines.append(reader.line_num)
            records.append(_parse_row(row, context_names, rating, reader.line_num))
    return _records_to_log(records, context_names, lines)


def write_jsonl(log: AssignmentLog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            doc = {
                "t": rec.t,
                "user": rec.user,
                "decision_point": rec.decision_point,
                "policy": rec.policy.value,
                "context": rec.context,
                "arm": rec.arm,
                "reward": rec.reward,
                "timestamp": rec.timestamp,
            }
            fh.write(json.dumps(doc) + "\n")


def read_jsonl(path: str | Path) -> AssignmentLog:
    records, lines = [], []
    context_names = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogParseError(f"row {lineno}: {exc}") from None
            if not isinstance(doc, dict):
                raise LogParseError(f"row {lineno}: expected a JSON object")
            ctx = doc.get("context") or {}
            if context_names is None:
                context_names = tuple(ctx)
            row = {**doc, **ctx}
            rating = "reward" not in doc and "rating" in doc
            for key in ("reward", "rating", "timestamp"):
                if row.get(key) is None:
                    row[key] = ""
            records.append(_parse_row(row, context_names, rating, lineno))
            lines.append(lineno)
    if not records:
        raise LogParseError(f"{path}: no records")
    return _records_to_log(records, context_names, lines)


def read_log(path: str | Path) -> AssignmentLog:
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson"):
        return read_jsonl(path)
    return read_csv(path)
