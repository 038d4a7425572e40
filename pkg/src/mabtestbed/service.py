"""Experiment registration, assignment, rewards and batched posterior refresh.

Every state change is an event: it is appended to the durable log first and
then applied to memory by the same function that replays it after a
restart, so replayed state is identical to the state before the crash.
"""

from __future__ import annotations

import io
import itertools
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bandit import (
    EncodingError,
    PolicyTag,
    PosteriorState,
    arm_selection_probability,
    init_posterior,
    select_arm_ts,
    select_arm_uniform,
    select_policy,
    update_posterior_batch,
)
from .config import ConfigError, ExperimentConfig
from .logs import REWARD_GRID, AssignmentLog, AssignmentRecord, scale_rating, write_csv
from .store import EventStore

log = logging.getLogger(__name__)

SUMMARY_DRAWS = 4000
MAX_SAMPLE_CONTEXTS = 16


class ServiceError(Exception):
    status = 500


class NotFound(ServiceError):
    status = 404


class Conflict(ServiceError):
    status = 409


class ValidationError(ServiceError):
    status = 422


def parse_reward(value=None, *, rating=None, reward=None) -> float:
    """Normalize a posted value onto the reward grid.

    ``rating`` is a 1..5 rating and ``reward`` a grid value.  A bare
    ``value`` is read as a rating when it is an int and as a grid value
    when it is a float, so ``5`` and ``1.0`` both mean the top of the scale.
    """
    given = [x is not None for x in (value, rating, reward)]
    if sum(given) != 1:
        raise ValidationError("give exactly one of value, rating, reward")
    if value is not None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"reward value must be a number, got {value!r}")
        if isinstance(value, int):
            rating = value
        else:
            reward = value
    try:
        if rating is not None:
            return scale_rating(rating)
        reward = float(reward)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None
    if reward not in REWARD_GRID:
        raise ValidationError(f"reward {reward} is not on the grid {REWARD_GRID}")
    return reward


@dataclass
class Experiment:
    """In-memory registration.  ``posteriors`` is swapped whole on refresh."""

    id: str
    config: ExperimentConfig
    created: float
    posteriors: dict[str, PosteriorState]
    refreshed: float | None = None
    receipts: dict[str, dict] = field(default_factory=dict)
    rewards: dict[str, float] = field(default_factory=dict)
    pending: list[str] = field(default_factory=list)
    overlays: dict[str, dict[str, float]] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "config": self.config.to_dict(),
            "created": self.created,
            "refreshed": self.refreshed,
            "posteriors": {dp: s.to_dict() for dp, s in self.posteriors.items()},
            "receipts": list(self.receipts.values()),
            "rewards": self.rewards,
            "pending": self.pending,
            "overlays": self.overlays,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Experiment":
        return cls(
            id=doc["id"],
            config=ExperimentConfig.from_dict(doc["config"]),
            created=doc["created"],
            refreshed=doc["refreshed"],
            posteriors={dp: PosteriorState.from_dict(s) for dp, s in doc["posteriors"].items()},
            receipts={r["assignment_id"]: r for r in doc["receipts"]},
            rewards=dict(doc["rewards"]),
            pending=list(doc["pending"]),
            overlays={u: dict(c) for u, c in doc["overlays"].items()},
        )

    def design_rows(self, aids: list[str], dp: str) -> tuple[np.ndarray, np.ndarray]:
        enc = self.config.encoding(dp)
        rows = [self.receipts[a] for a in aids if self.receipts[a]["decision_point"] == dp]
        ctx = enc.context_matrix([r["context"] for r in rows])
        X = enc.design(np.array([r["arm"] for r in rows], dtype=int), ctx)
        r = np.array([self.rewards[row["assignment_id"]] for row in rows], dtype=float)
        return X, r


class ExperimentService:
    """The personalization engine behind the HTTP API.

    Assignments sample against whatever posterior dict is current and never
    take the experiment lock; rewards, context updates and refreshes hold
    it.  ``_commit`` serializes the log append with its in-memory effect so
    snapshots always match a log position.
    """

    def __init__(self, data_dir: str | Path, seed: int | None = None, snapshot_every: int = 1000):
        self.store = EventStore(data_dir)
        self.snapshot_every = snapshot_every
        self.experiments: dict[str, Experiment] = {}
        self._commit_lock = threading.Lock()
        self._seed = np.random.SeedSequence(seed)
        self._since_snapshot = 0
        self._load()
        n = sum(len(e.receipts) for e in self.experiments.values())
        self._draws = itertools.count(n)

    # -- persistence -------------------------------------------------------

    def _load(self) -> None:
        state, seq = self.store.read_snapshot()
        if state is not None:
            for doc in state["experiments"]:
                exp = Experiment.from_dict(doc)
                self.experiments[exp.id] = exp
        replayed = 0
        for event in self.store.events(after=seq):
            self._apply(event)
            replayed += 1
        if state is not None or replayed:
            log.info("restored %d experiments (%d events replayed)", len(self.experiments), replayed)

    def _commit(self, event: dict) -> None:
        with self._commit_lock:
            self.store.append(event)
            self._apply(event)
            self._since_snapshot += 1
            if self._since_snapshot >= self.snapshot_every:
                self._snapshot_locked()

    def _snapshot_locked(self) -> None:
        state = {"experiments": [e.to_dict() for e in self.experiments.values()]}
        self.store.write_snapshot(state, self.store.seq)
        self._since_snapshot = 0

    def snapshot(self) -> None:
        with self._commit_lock:
            self._snapshot_locked()

    def close(self) -> None:
        self.snapshot()
        self.store.close()

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "created":
            config = ExperimentConfig.from_dict(event["config"])
            self.experiments[event["experiment"]] = Experiment(
                id=event["experiment"],
                config=config,
                created=event["ts"],
                posteriors={
                    f.name: init_posterior(config.encoding(f.name).d, config.v(f.name))
                    for f in config.factors
                },
            )
            return
        exp = self.experiments[event["experiment"]]
        if kind == "assigned":
            receipt = event["receipt"]
            exp.receipts[receipt["assignment_id"]] = receipt
        elif kind == "rewarded":
            exp.rewards[event["assignment_id"]] = event["value"]
            exp.pending.append(event["assignment_id"])
        elif kind == "context":
            exp.overlays.setdefault(event["user"], {}).update(event["variables"])
        elif kind == "refreshed":
            applied = event["applied"]
            posteriors = dict(exp.posteriors)
            for dp in posteriors:
                X, r = exp.design_rows(applied, dp)
                if len(r):
                    posteriors[dp] = update_posterior_batch(posteriors[dp], X, r)
            exp.posteriors = posteriors
            done = set(applied)
            exp.pending = [a for a in exp.pending if a not in done]
            exp.refreshed = event["ts"]
        else:
            raise RuntimeError(f"unknown event type {kind!r}")

    # -- operations --------------------------------------------------------

    def experiment(self, experiment_id: str) -> Experiment:
        try:
            return self.experiments[experiment_id]
        except KeyError:
            raise NotFound(f"unknown experiment {experiment_id!r}") from None

    def create_experiment(self, config: ExperimentConfig | dict) -> str:
        try:
            if not isinstance(config, ExperimentConfig):
                config = ExperimentConfig.from_dict(config)
        except (ConfigError, EncodingError) as exc:
            raise ValidationError(str(exc)) from None
        exp_id = uuid.uuid4().hex
        self._commit(
            {"type": "created", "experiment": exp_id, "config": config.to_dict(), "ts": time.time()}
        )
        return exp_id

    def _rng(self) -> np.random.Generator:
        child = np.random.SeedSequence(self._seed.entropy, spawn_key=(next(self._draws),))
        return np.random.default_rng(child)

    def get_assignment(
        self,
        experiment_id: str,
        user: str,
        context: dict | None = None,
        decision_point: str | None = None,
    ) -> dict:
        exp = self.experiment(experiment_id)
        config = exp.config
        if not user:
            raise ValidationError("user id is required")
        if decision_point is None:
            if len(config.factors) != 1:
                raise ValidationError("decision_point is required for multi-factor experiments")
            decision_point = config.factors[0].name
        try:
            arms = config.factor(decision_point)
        except KeyError:
            raise ValidationError(f"unknown decision point {decision_point!r}") from None
        merged = {**exp.overlays.get(user, {}), **(context or {})}
        try:
            ctx = config.schema.validate(merged)
        except (EncodingError, TypeError, ValueError) as exc:
            raise ValidationError(str(exc)) from None

        rng = self._rng()
        state = exp.posteriors[decision_point]
        policy = select_policy(config.mixture_p, rng)
        if policy is PolicyTag.CONTEXTUAL_TS:
            arm = select_arm_ts(state, ctx, arms, config.encoding(decision_point), rng)
        else:
            arm = select_arm_uniform(arms, rng)
        receipt = {
            "assignment_id": uuid.uuid4().hex,
            "experiment_id": experiment_id,
            "user": str(user),
            "decision_point": decision_point,
            "arm": arm,
            "policy": policy.value,
            "context": ctx,
            "timestamp": time.time(),
        }
        self._commit({"type": "assigned", "experiment": experiment_id, "receipt": receipt})
        return receipt

    def record_reward(self, experiment_id: str, assignment_id: str, value=None, **kw) -> dict:
        exp = self.experiment(experiment_id)
        reward = parse_reward(value, **kw)
        with exp.lock:
            if assignment_id not in exp.receipts:
                raise NotFound(f"unknown assignment {assignment_id!r}")
            if assignment_id in exp.rewards:
                raise Conflict(f"assignment {assignment_id!r} already has a reward")
            self._commit(
                {
                    "type": "rewarded",
                    "experiment": experiment_id,
                    "assignment_id": assignment_id,
                    "value": reward,
                    "ts": time.time(),
                }
            )
        return {"assignment_id": assignment_id, "reward": reward, "pending": True}

    def update_context(self, experiment_id: str, user: str, variables: dict) -> dict:
        exp = self.experiment(experiment_id)
        if not user:
            raise ValidationError("user id is required")
        schema = exp.config.schema
        clean = {}
        try:
            for name, value in variables.items():
                var = schema.variable(name)
                value = float(value)
                if value not in var.values:
                    raise EncodingError(f"{name}={value} is not one of {var.values}")
                clean[name] = value
        except (EncodingError, TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(str(exc)) from None
        with exp.lock:
            self._commit(
                {"type": "context", "experiment": experiment_id, "user": str(user), "variables": clean}
            )
        return {"user": str(user), "context": dict(exp.overlays[str(user)])}

    def refresh_posteriors(self, experiment_id: str) -> dict:
        exp = self.experiment(experiment_id)
        with exp.lock:
            applied = list(exp.pending)
            if applied:
                self._commit(
                    {"type": "refreshed", "experiment": experiment_id, "applied": applied, "ts": time.time()}
                )
            return {
                "records_applied": len(applied),
                "n_obs": {dp: s.n_obs for dp, s in exp.posteriors.items()},
            }

    def refresh_all(self) -> dict[str, dict]:
        return {eid: self.refresh_posteriors(eid) for eid in list(self.experiments)}

    def export_log(self, experiment_id: str) -> AssignmentLog:
        exp = self.experiment(experiment_id)
        names = exp.config.schema.names
        records = [
            AssignmentRecord(
                t=t,
                user=r["user"],
                decision_point=r["decision_point"],
                policy=PolicyTag(r["policy"]),
                context=r["context"],
                arm=r["arm"],
                reward=exp.rewards.get(r["assignment_id"]),
                timestamp=r["timestamp"],
            )
            for t, r in enumerate(list(exp.receipts.values()), start=1)
        ]
        return AssignmentLog.from_records(records, names)

    def export_csv(self, experiment_id: str) -> str:
        buf = io.StringIO()
        write_csv(self.export_log(experiment_id), buf)
        return buf.getvalue()

    def sample_contexts(self, experiment_id: str) -> list[dict[str, float]]:
        schema = self.experiment(experiment_id).config.schema
        grid = list(itertools.product(*(v.values for v in schema.variables)))
        if len(grid) > MAX_SAMPLE_CONTEXTS:
            grid = grid[:MAX_SAMPLE_CONTEXTS]
        return [dict(zip(schema.names, combo)) for combo in grid]

    def experiment_summary(self, experiment_id: str) -> dict:
        exp = self.experiment(experiment_id)
        config = exp.config
        receipts = list(exp.receipts.values())
        posteriors = exp.posteriors
        rated = sum(1 for r in receipts if r["assignment_id"] in exp.rewards)
        contexts = self.sample_contexts(experiment_id)
        points = {}
        for k, f in enumerate(config.factors):
            state = posteriors[f.name]
            enc = config.encoding(f.name)
            counts = {p.value: [0] * f.levels for p in PolicyTag}
            for r in receipts:
                if r["decision_point"] == f.name:
                    counts[r["policy"]][r["arm"]] += 1
            # fixed seed: the summary is a pure function of persisted state
            rng = np.random.default_rng([k, state.n_obs])
            probs = [
                {
                    "context": ctx,
                    "probabilities": arm_selection_probability(
                        state, ctx, f, enc, SUMMARY_DRAWS, rng
                    ).tolist(),
                }
                for ctx in contexts
            ]
            points[f.name] = {
                "terms": list(enc.term_names),
                "n_obs": state.n_obs,
                "mu_hat": state.mu_hat.tolist(),
                "v": state.v,
                "counts": counts,
                "arm_probabilities": probs,
            }
        return {
            "experiment_id": exp.id,
            "name": config.name,
            "created": exp.created,
            "refreshed": exp.refreshed,
            "assignments": len(receipts),
            "rated": rated,
            "engagement_rate": rated / len(receipts) if receipts else None,
            "pending": len(exp.pending),
            "decision_points": points,
        }


class RefreshScheduler:
    """Background thread refreshing every experiment on a fixed cadence."""

    def __init__(self, service: ExperimentService, interval: float):
        self.service = service
        self.interval = interval
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                self.service.refresh_all()
            except Exception:
                log.exception("scheduled refresh failed")

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="refresh", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
