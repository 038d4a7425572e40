"""Linear-Gaussian contextual Thompson Sampling and uniform assignment.

Each factor of a factorial message design (Rationale, Link, ...) is its own
bandit problem.  An arm is a 0-based level index of that factor.  The reward
model is linear in a feature vector built from the arm and the user context,

    r ~ N(b(arm, context) . mu, v^2)

and the belief over ``mu`` is the conjugate Gaussian N(mu_hat, v^2 B^-1) with
B = I + sum b b^T and mu_hat = B^-1 sum b r.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

ContextVector = Mapping[str, float]


class ParameterError(ValueError):
    """Invalid algorithm or configuration parameter."""


class EncodingError(ValueError):
    """A context or arm cannot be encoded into features."""


class PolicyTag(str, Enum):
    CONTEXTUAL_TS = "ContextualTS"
    UNIFORM_RANDOM = "UniformRandom"

    @property
    def code(self) -> int:
        return _POLICY_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "PolicyTag":
        return _POLICIES[int(code)]


_POLICIES = (PolicyTag.CONTEXTUAL_TS, PolicyTag.UNIFORM_RANDOM)
_POLICY_CODES = {p: i for i, p in enumerate(_POLICIES)}


@dataclass(frozen=True)
class ContextVariable:
    """A coded covariate, e.g. binary Mood or ordinal K10 in 1..4."""

    name: str
    values: tuple[float, ...] = (0.0, 1.0)
    default: float | None = None

    def __post_init__(self):
        if not self.values:
            raise ParameterError(f"context variable {self.name!r} has no values")
        if self.default is not None and self.default not in self.values:
            raise ParameterError(
                f"default {self.default} of {self.name!r} is not one of {self.values}"
            )


@dataclass(frozen=True)
class ContextSchema:
    variables: tuple[ContextVariable, ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def variable(self, name: str) -> ContextVariable:
        for var in self.variables:
            if var.name == name:
                return var
        raise EncodingError(f"unknown context variable {name!r}")

    def validate(self, context: ContextVector) -> dict[str, float]:
        """Check names and values; fill omitted variables from defaults."""
        out = {}
        for name, value in context.items():
            var = self.variable(name)
            value = float(value)
            if value not in var.values:
                raise EncodingError(f"{name}={value} is not one of {var.values}")
            out[name] = value
        for var in self.variables:
            if var.name not in out:
                if var.default is None:
                    raise EncodingError(f"missing context variable {var.name!r}")
                out[var.name] = float(var.default)
        return out


@dataclass(frozen=True)
class ArmSet:
    """One experimental factor; its levels are the arms of one bandit."""

    name: str
    levels: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ParameterError(f"factor {self.name!r} needs at least one level")

    def validate_arm(self, arm: int) -> int:
        if not 0 <= int(arm) < self.levels:
            raise EncodingError(f"arm {arm} out of range for {self.name!r} ({self.levels} levels)")
        return int(arm)


@dataclass(frozen=True)
class FeatureEncoding:
    """Intercept, one-hot arm indicators (baseline dropped), context main
    effects, and arm x context interactions, in that order.

    A 2-level factor ``Rationale`` contributes the single term ``Rationale``;
    a k-level factor contributes ``Name[1]`` .. ``Name[k-1]``.  Interactions
    are named ``Rationale*Mood``.
    """

    arms: ArmSet
    context_terms: tuple[str, ...] = ()
    interaction_terms: tuple[tuple[str, str], ...] = ()
    intercept: bool = True
    baseline: int = 0

    def __post_init__(self):
        object.__setattr__(self, "context_terms", tuple(self.context_terms))
        object.__setattr__(
            self, "interaction_terms", tuple(tuple(p) for p in self.interaction_terms)
        )
        if not 0 <= self.baseline < self.arms.levels:
            raise ParameterError("baseline level out of range")
        for factor, var in self.interaction_terms:
            if factor != self.arms.name:
                raise ParameterError(f"interaction references undeclared factor {factor!r}")
            if var not in self.context_terms:
                raise ParameterError(f"interaction references undeclared context {var!r}")
        if self.d < 1:
            raise ParameterError("encoding has no terms")

    @classmethod
    def full(cls, arms: ArmSet, context: Sequence[str] = ()) -> "FeatureEncoding":
        """Intercept + arm + every context main effect + every arm x context term."""
        context = tuple(context)
        return cls(arms, context, tuple((arms.name, c) for c in context))

    @property
    def arm_levels(self) -> tuple[int, ...]:
        return tuple(lv for lv in range(self.arms.levels) if lv != self.baseline)

    def _arm_term(self, level: int) -> str:
        if self.arms.levels == 2:
            return self.arms.name
        return f"{self.arms.name}[{level}]"

    @property
    def term_names(self) -> tuple[str, ...]:
        names = ["intercept"] if self.intercept else []
        names += [self._arm_term(lv) for lv in self.arm_levels]
        names += list(self.context_terms)
        for _, var in self.interaction_terms:
            names += [f"{self._arm_term(lv)}*{var}" for lv in self.arm_levels]
        return tuple(names)

    @property
    def d(self) -> int:
        n_arm = self.arms.levels - 1
        return int(self.intercept) + n_arm + len(self.context_terms) + n_arm * len(
            self.interaction_terms
        )

    def index(self, term: str) -> int:
        try:
            return self.term_names.index(term)
        except ValueError:
            raise EncodingError(f"term {term!r} not in encoding {self.term_names}") from None

    def context_matrix(self, contexts: Sequence[ContextVector]) -> np.ndarray:
        """(n, len(context_terms)) array of the variables this encoding reads."""
        out = np.empty((len(contexts), len(self.context_terms)))
        for i, ctx in enumerate(contexts):
            for j, name in enumerate(self.context_terms):
                try:
                    out[i, j] = ctx[name]
                except KeyError:
                    raise EncodingError(f"missing context variable {name!r}") from None
        return out

    def design(self, arms: np.ndarray | None, context: np.ndarray) -> np.ndarray:
        """Vectorised encoding.

        ``context`` is (n, len(context_terms)).  With ``arms`` given (shape
        (n,)) the result is (n, d); with ``arms=None`` every level is encoded
        and the result is (n, levels, d).
        """
        context = np.asarray(context, dtype=float)
        if context.ndim != 2 or context.shape[1] != len(self.context_terms):
            raise EncodingError(
                f"context matrix has shape {context.shape}, expected (n, {len(self.context_terms)})"
            )
        n = context.shape[0]
        if arms is None:
            levels = np.broadcast_to(np.arange(self.arms.levels), (n, self.arms.levels))
            return self._encode(levels, context[:, None, :])
        arms = np.asarray(arms, dtype=int)
        return self._encode(arms, context)

    def _encode(self, arms: np.ndarray, context: np.ndarray) -> np.ndarray:
        cols = []
        shape = arms.shape
        if self.intercept:
            cols.append(np.ones(shape))
        indicators = [(arms == lv).astype(float) for lv in self.arm_levels]
        cols += indicators
        ctx_idx = {name: j for j, name in enumerate(self.context_terms)}
        ctx = np.broadcast_to(context, shape + (context.shape[-1],))
        cols += [ctx[..., j] for j in range(len(self.context_terms))]
        for _, var in self.interaction_terms:
            cols += [ind * ctx[..., ctx_idx[var]] for ind in indicators]
        return np.stack(cols, axis=-1)


def encode_features(arm: int, context: ContextVector, enc: FeatureEncoding) -> np.ndarray:
    arm = enc.arms.validate_arm(arm)
    return enc.design(np.array([arm]), enc.context_matrix([context]))[0]


@dataclass(frozen=True)
class NoiseParams:
    """Either a direct noise scale ``v`` or the (R, epsilon, delta) triple."""

    v: float | None = 1.0
    R: float | None = None
    epsilon: float | None = None
    delta: float | None = None

    @classmethod
    def from_bound(cls, R: float, epsilon: float, delta: float) -> "NoiseParams":
        return cls(v=None, R=R, epsilon=epsilon, delta=delta)


def noise_scale(params: NoiseParams, d: int) -> float:
    """v itself, or R * sqrt(24/eps * d * ln(1/delta))."""
    if params.R is None and params.epsilon is None and params.delta is None:
        if params.v is None or not params.v > 0:
            raise ParameterError(f"noise scale must be positive, got {params.v}")
        return float(params.v)
    R, eps, delta = params.R, params.epsilon, params.delta
    if R is None or not R > 0:
        raise ParameterError(f"R must be positive, got {R}")
    if eps is None or not 0 < eps < 1:
        raise ParameterError(f"epsilon must lie in (0, 1), got {eps}")
    if delta is None or not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if d < 1:
        raise ParameterError("dimension must be >= 1")
    return R * math.sqrt(24.0 / eps * d * math.log(1.0 / delta))


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Gaussian belief N(mu_hat, v^2 B^-1) over the reward coefficients."""

    B: np.ndarray
    f: np.ndarray
    mu_hat: np.ndarray
    v: float
    n_obs: int = 0
    chol: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.chol is None:
            object.__setattr__(self, "chol", _cholesky(self.B))

    @property
    def d(self) -> int:
        return self.f.shape[0]

    def covariance(self) -> np.ndarray:
        return self.v**2 * np.linalg.inv(self.B)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "B": self.B.ravel().tolist(),
            "f": self.f.tolist(),
            "mu_hat": self.mu_hat.tolist(),
            "v": self.v,
            "n_obs": self.n_obs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PosteriorState":
        d = int(doc["d"])
        B = np.asarray(doc["B"], dtype=float).reshape(d, d)
        return cls(
            B=B,
            f=np.asarray(doc["f"], dtype=float),
            mu_hat=np.asarray(doc["mu_hat"], dtype=float),
            v=float(doc["v"]),
            n_obs=int(doc["n_obs"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "PosteriorState":
        return cls.from_dict(json.loads(text))

    def allclose(self, other: "PosteriorState", atol: float = 1e-9) -> bool:
        return (
            self.n_obs == other.n_obs
            and self.v == other.v
            and np.allclose(self.B, other.B, rtol=0, atol=atol)
            and np.allclose(self.f, other.f, rtol=0, atol=atol)
            and np.allclose(self.mu_hat, other.mu_hat, rtol=0, atol=atol)
        )


def _cholesky(B: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(B)
    except np.linalg.LinAlgError as exc:
        raise AssertionError("posterior precision matrix is not positive definite") from exc


def _solve_spd(L: np.ndarray, f: np.ndarray) -> np.ndarray:
    return np.linalg.solve(L.T, np.linalg.solve(L, f))


def init_posterior(d: int, v: float = 1.0) -> PosteriorState:
    if d < 1:
        raise ParameterError("dimension must be >= 1")
    if not v > 0:
        raise ParameterError(f"noise scale must be positive, got {v}")
    eye = np.eye(d)
    return PosteriorState(B=eye, f=np.zeros(d), mu_hat=np.zeros(d), v=float(v), chol=eye)


def update_posterior(state: PosteriorState, b: np.ndarray, r: float) -> PosteriorState:
    """Incorporate one rewarded observation; returns a new state."""
    b = np.asarray(b, dtype=float)
    if b.shape != (state.d,):
        raise ParameterError(f"feature vector has shape {b.shape}, expected ({state.d},)")
    return update_posterior_batch(state, b[None, :], np.array([r], dtype=float))


def update_posterior_batch(
    state: PosteriorState, X: np.ndarray, r: np.ndarray
) -> PosteriorState:
    """Incorporate rows of X with rewards r in one step.

    Identical (up to float summation order) to applying update_posterior
    row by row.
    """
    X = np.asarray(X, dtype=float).reshape(-1, state.d)
    r = np.asarray(r, dtype=float).reshape(-1)
    if X.shape[0] != r.shape[0]:
        raise ParameterError("feature rows and rewards differ in length")
    if X.shape[0] == 0:
        return state
    if not (np.isfinite(X).all() and np.isfinite(r).all()):
        raise ParameterError("features and rewards must be finite")
    B = state.B + X.T @ X
    f = state.f + X.T @ r
    L = _cholesky(B)
    return PosteriorState(
        B=B, f=f, mu_hat=_solve_spd(L, f), v=state.v, n_obs=state.n_obs + X.shape[0], chol=L
    )


def coefficients_from_normals(state: PosteriorState, z: np.ndarray) -> np.ndarray:
    """mu_hat + v L^-T z; z has shape (d,) or (d, k) for k draws."""
    shift = np.linalg.solve(state.chol.T, z)
    if shift.ndim == 2:
        return state.mu_hat[:, None] + state.v * shift
    return state.mu_hat + state.v * shift


def sample_coefficients(state: PosteriorState, rng: np.random.Generator) -> np.ndarray:
    return coefficients_from_normals(state, rng.standard_normal(state.d))


def best_arm(mu_tilde: np.ndarray, context: ContextVector, enc: FeatureEncoding) -> int:
    """Arm maximising b(arm, context) . mu_tilde; ties go to the lowest level."""
    X = enc.design(None, enc.context_matrix([context]))[0]
    return int(np.argmax(X @ mu_tilde))


def select_arm_ts(
    state: PosteriorState,
    context: ContextVector,
    arms: ArmSet,
    enc: FeatureEncoding,
    rng: np.random.Generator,
) -> int:
    if enc.arms != arms:
        raise EncodingError(f"encoding is for factor {enc.arms.name!r}, not {arms.name!r}")
    return best_arm(sample_coefficients(state, rng), context, enc)


def select_arm_uniform(arms: ArmSet, rng: np.random.Generator) -> int:
    return int(rng.integers(arms.levels))


def select_policy(mixture_p: float, rng: np.random.Generator) -> PolicyTag:
    """ContextualTS with probability ``mixture_p``, else UniformRandom."""
    if not 0.0 <= mixture_p <= 1.0:
        raise ParameterError(f"mixture probability must lie in [0, 1], got {mixture_p}")
    return PolicyTag.CONTEXTUAL_TS if rng.random() < mixture_p else PolicyTag.UNIFORM_RANDOM


def arm_selection_probability(
    state: PosteriorState,
    context: ContextVector,
    arms: ArmSet,
    enc: FeatureEncoding,
    n_draws: int = 10_000,
    rng: np.random.Generator | int | None = None,
) -> np.ndarray:
    """Monte Carlo estimate of P(arm is the Thompson Sampling choice)."""
    if n_draws < 1:
        raise ParameterError("n_draws must be >= 1")
    rng = np.random.default_rng(rng)
    X = enc.design(None, enc.context_matrix([context]))[0]
    draws = coefficients_from_normals(state, rng.standard_normal((state.d, n_draws)))
    choice = np.argmax(X @ draws, axis=0)
    return np.bincount(choice, minlength=arms.levels) / n_draws
