"""Domain types and the probability kernel of the dynamic propensity model.

Time alignment used throughout the package (arrays are 0-based, days 1-based):

* ``x0`` is the prior state before day 1.
* ``s[0]`` (day 1) is ``c + phi * x0``; there are no touches before day 1.
* ``s[t]`` (day t+1) is ``c + phi * x[t-1] + alpha @ r[t-1] + beta @ m[t-1]``.
* ``y[t-1]`` (day t) is emitted from ``s[t-1]`` and ``x[t-1] = s[t-1] + noise``.
* ``s[T]`` is the prediction for the day after the horizon and emits nothing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Optional

import numpy as np

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter vector ``(c, phi, alpha, beta)``; the noise scale is fixed to 1."""

    c: float
    phi: float
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        beta = np.array(self.beta, dtype=float).reshape(-1)
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        alpha.setflags(write=False)
        beta.setflags(write=False)
        if not np.all(np.isfinite(self.to_vector())):
            raise ContractError("model parameters must be finite")

    @property
    def K(self) -> int:
        return self.alpha.shape[0]

    @property
    def L(self) -> int:
        return self.beta.shape[0]

    @property
    def stationary(self) -> bool:
        return abs(self.phi) < 1.0

    def prior_mean(self) -> float:
        """Mean of the touch-free stationary distribution, or 0 when |phi| >= 1."""
        return self.c / (1.0 - self.phi) if self.stationary else 0.0

    def prior_std(self) -> float:
        return 1.0 / math.sqrt(1.0 - self.phi**2) if self.stationary else 1.0

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.c, self.phi], self.alpha, self.beta])

    @classmethod
    def from_vector(cls, vec, K: int, L: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (2 + K + L,):
            raise ContractError(f"expected vector of length {2 + K + L}, got {vec.shape}")
        return cls(vec[0], vec[1], vec[2 : 2 + K], vec[2 + K :])

    @classmethod
    def zeros(cls, K: int, L: int) -> "ModelParams":
        return cls(0.0, 0.0, np.zeros(K), np.zeros(L))

    def names(self) -> list[str]:
        return param_names(self.K, self.L)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.K == other.K and self.L == other.L and np.array_equal(
            self.to_vector(), other.to_vector()
        )

    def __repr__(self):
        a = ", ".join(f"{v:.4g}" for v in self.alpha)
        b = ", ".join(f"{v:.4g}" for v in self.beta)
        return f"ModelParams(c={self.c:.4g}, phi={self.phi:.4g}, alpha=[{a}], beta=[{b}])"


def param_names(K: int, L: int) -> list[str]:
    return ["c", "phi"] + [f"alpha.{j + 1}" for j in range(K)] + [f"beta.{j + 1}" for j in range(L)]


def _count_matrix(values, name: str, T: int) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim == 1 and T > 0 and arr.shape[0] == T:
        arr = arr.reshape(T, 1)
    if arr.ndim != 2 or arr.shape[0] != T:
        raise ContractError(f"{name} must be a {T} x k matrix, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ContractError(f"{name} must contain integer counts")
    if np.any(arr < 0):
        raise ContractError(f"{name} must contain non-negative counts")
    return arr.astype(np.int64)


@dataclass(frozen=True, eq=False)
class CustomerHistory:
    """Daily touches and purchase flags of one customer, truncated at first purchase."""

    id: Hashable
    r: np.ndarray
    m: np.ndarray
    y: np.ndarray
    segment: Optional[Hashable] = None
    # day label of the first row; informational only (the model is shift invariant)
    start: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1 or y.shape[0] < 1:
            raise ContractError(f"customer {self.id}: y must be a non-empty vector")
        T = y.shape[0]
        if not np.all(np.isin(y, (0, 1))):
            raise ContractError(f"customer {self.id}: y must be binary")
        y = y.astype(np.int8)
        n_pos = int(y.sum())
        if n_pos > 1 or (n_pos == 1 and y[-1] != 1):
            raise ContractError(
                f"customer {self.id}: history must end at the first purchase"
            )
        r = _count_matrix(self.r, "r", T)
        m = _count_matrix(self.m, "m", T)
        for arr in (r, m, y):
            arr.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "y", y)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.r.shape[1]

    @property
    def L(self) -> int:
        return self.m.shape[1]

    @property
    def purchased(self) -> bool:
        return bool(self.y[-1] == 1)

    def __eq__(self, other):
        if not isinstance(other, CustomerHistory):
            return NotImplemented
        return (
            self.id == other.id
            and self.segment == other.segment
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.y, other.y)
        )

    def prefix(self, days: int) -> "CustomerHistory":
        """First ``days`` days of the history (still a valid history)."""
        return CustomerHistory(self.id, self.r[:days], self.m[:days], self.y[:days], self.segment)


@dataclass(frozen=True)
class PropensityPath:
    """Filtered states ``x`` (length T) and predictive states ``s`` (length T+1).

    ``x0`` is the prior anchor from which ``s[0]`` was produced.
    """

    x: np.ndarray
    s: np.ndarray
    x0: float = 0.0

    @property
    def T(self) -> int:
        return self.x.shape[0]


def _check_dims(params: ModelParams, history: CustomerHistory):
    if history.K != params.K or history.L != params.L:
        raise ContractError(
            f"dimension mismatch: params (K={params.K}, L={params.L}) vs "
            f"history (K={history.K}, L={history.L})"
        )


def predict_propensity(params: ModelParams, x_t: float, r_t, m_t) -> float:
    """Next predictive propensity ``c + phi*x_t + alpha.r_t + beta.m_t``."""
    r_t = np.asarray(r_t, dtype=float).reshape(-1)
    m_t = np.asarray(m_t, dtype=float).reshape(-1)
    if r_t.shape[0] != params.K or m_t.shape[0] != params.L:
        raise ContractError(
            f"touch vectors must have lengths K={params.K}, L={params.L}; "
            f"got {r_t.shape[0]}, {m_t.shape[0]}"
        )
    return float(params.c + params.phi * float(x_t) + _dot(r_t, params.alpha) + _dot(m_t, params.beta))


def purchase_prob(s: float) -> float:
    """Logistic function, computed without overflow for any finite ``s``."""
    s = float(s)
    if not math.isfinite(s):
        raise ContractError(f"propensity must be finite, got {s}")
    if s >= 0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def expit(s):
    """Vectorised stable logistic."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_expit(s):
    """``log(1/(1+exp(-s)))`` without overflow."""
    s = np.asarray(s, dtype=float)
    return -np.logaddexp(0.0, -s)


def _dot(counts, coef):
    # one reduction routine for vectors and row stacks keeps results bit-identical
    return (counts * coef).sum(axis=-1)


def touch_drive(params: ModelParams, history: CustomerHistory) -> np.ndarray:
    """Per-day touch contribution ``alpha.r_t + beta.m_t`` (length T)."""
    _check_dims(params, history)
    return _dot(history.r, params.alpha) + _dot(history.m, params.beta)


def predictive_states(params: ModelParams, history: CustomerHistory, x, x0: float) -> np.ndarray:
    """Recompute ``s`` (length T+1) from filtered states ``x`` and the anchor ``x0``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (history.T,):
        raise ContractError(f"path length {x.shape} does not match horizon {history.T}")
    _check_dims(params, history)
    s = np.empty(history.T + 1)
    s[0] = params.c + params.phi * x0
    s[1:] = params.c + params.phi * x + _dot(history.r, params.alpha) + _dot(history.m, params.beta)
    return s


def make_path(params: ModelParams, history: CustomerHistory, x, x0: float) -> PropensityPath:
    x = np.array(x, dtype=float)
    return PropensityPath(x=x, s=predictive_states(params, history, x, x0), x0=float(x0))


def log_joint(params: ModelParams, history: CustomerHistory, path: PropensityPath) -> float:
    """Conditional log-likelihood of one customer at a fixed latent path.

    Sum over days of the Bernoulli log-mass of ``y_t`` at ``logistic(s_t)`` and the
    unit-variance Gaussian log-density of ``x_t`` around ``s_t``. The predictive
    states are recomputed from ``path.x`` and ``path.x0`` under ``params``; the
    post-horizon state ``s_{T+1}`` carries no observation.
    """
    s = predictive_states(params, history, path.x, path.x0)[:-1]
    y = history.y
    emission = np.where(y == 1, log_expit(s), log_expit(-s)).sum()
    resid = path.x - s
    transition = -0.5 * float(resid @ resid) - history.T * LOG_SQRT_2PI
    return float(emission + transition)
