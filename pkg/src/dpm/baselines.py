"""Lagged-touch logistic regressions (glm, glm.lag1, glm.lag2) fit by IRLS."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ContractError, CustomerHistory, expit


class EmptyDesignError(ContractError):
    pass


class DegenerateDesignError(ContractError):
    pass


MODEL_NAMES = {0: "glm", 1: "glm.lag1", 2: "glm.lag2"}


def feature_names(K: int, L: int, lag: int) -> list[str]:
    """``c`` then, lag by lag, ``alpha_<lag><channel>`` and ``beta_<lag><channel>``."""
    names = ["c"]
    for l in range(lag + 1):
        names += [f"alpha_{l}{j + 1}" for j in range(K)]
        names += [f"beta_{l}{j + 1}" for j in range(L)]
    return names


@dataclass
class LaggedDesign:
    """One row per (customer, label day) with the touches of the preceding ``lag + 1`` days.

    The row for label day ``t`` (1-based) holds ``y_t`` and the touches of days
    ``t-1, ..., t-1-lag``. Day 0 is the pre-history day and has no touches, so
    day 1 is a valid label with an intercept-only row. ``keys`` holds
    ``(customer id, t)``.
    """

    X: np.ndarray
    y: np.ndarray
    lag: int
    feature_names: list
    keys: list

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def customer_rows(h: CustomerHistory, lag: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Design rows, labels and 1-based label days for one customer."""
    T = h.T
    days = np.arange(lag + 1, T + 1)
    touches = np.vstack([np.zeros((1, h.K + h.L)), np.hstack([h.r, h.m])])
    J = touches.shape[1]
    X = np.empty((days.size, 1 + (lag + 1) * J))
    X[:, 0] = 1.0
    for l in range(lag + 1):
        X[:, 1 + l * J : 1 + (l + 1) * J] = touches[days - 1 - l]
    return X, h.y[days - 1].astype(float), days


def build_lagged_design(dataset: Sequence[CustomerHistory], lag: int) -> LaggedDesign:
    if lag < 0:
        raise ContractError("lag must be non-negative")
    if len(dataset) == 0:
        raise EmptyDesignError("dataset is empty")
    K, L = dataset[0].K, dataset[0].L
    Xs, ys, keys = [], [], []
    for h in dataset:
        X, y, days = customer_rows(h, lag)
        Xs.append(X)
        ys.append(y)
        keys.extend((h.id, int(t)) for t in days)
    X = np.vstack(Xs) if Xs else np.empty((0, 1 + (lag + 1) * (K + L)))
    if X.shape[0] == 0:
        raise EmptyDesignError(f"no customer has enough history for lag {lag}")
    return LaggedDesign(X, np.concatenate(ys), lag, feature_names(K, L, lag), keys)


@dataclass
class GlmFit:
    coefficients: np.ndarray
    std_errors: np.ndarray
    p_values: np.ndarray
    converged: bool
    iterations: int
    separation_detected: bool
    feature_names: list
    log_likelihood: float = float("nan")
    lag: int = 0
    trace: list = None  # log-likelihood after each iteration

    def table(self) -> list[tuple]:
        return list(zip(self.feature_names, self.coefficients, self.std_errors, self.p_values))


def _loglik(X, y, w, beta):
    eta = X @ beta
    # y*log sigma(eta) + (1-y)*log sigma(-eta)
    return float(w @ (y * eta - np.logaddexp(0.0, eta)))


def _compress(X: np.ndarray, y: np.ndarray):
    """Collapse identical (row, label) pairs into frequency weights."""
    joint = np.column_stack([X, y])
    uniq, counts = np.unique(joint, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1], counts.astype(float)


def wald_p_values(coef: np.ndarray, se: np.ndarray) -> np.ndarray:
    """Two-sided normal p-values."""
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(coef / se)
    return np.array([math.erfc(v / math.sqrt(2.0)) if np.isfinite(v) else float("nan") for v in z])


def fit_glm(design: LaggedDesign, max_iters: int = 100, tol: float = 1e-8) -> GlmFit:
    """Newton/IRLS maximum likelihood with step-halving and Wald inference."""
    y_all = design.y
    if design.n_rows == 0:
        raise EmptyDesignError("design has no rows")
    if y_all.min() == y_all.max():
        raise DegenerateDesignError("labels contain a single class")
    X, y, w = _compress(design.X, y_all)
    d = X.shape[1]
    beta = np.zeros(d)
    rate = float(w @ y / w.sum())
    if np.all(X[:, 0] == 1.0):
        beta[0] = math.log(rate / (1 - rate))
    ll = _loglik(X, y, w, beta)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        mu = expit(X @ beta)
        score = X.T @ (w * (y - mu))
        H = (X * (w * mu * (1 - mu))[:, None]).T @ X
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        step = np.linalg.lstsq(H, score, rcond=None)[0]
        for _ in range(60):
            new_ll = _loglik(X, y, w, beta + step)
            if new_ll >= ll:
                break
            step = step / 2
        else:
            break
        beta = beta + step
        ll = new_ll
        trace.append(ll)
        if np.linalg.norm(step) < tol:
            converged = True
            break
    mu = expit(X @ beta)
    H = (X * (w * mu * (1 - mu))[:, None]).T @ X
    cond = np.linalg.cond(H)
    cov = np.linalg.pinv(H)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    singular = not np.isfinite(cond) or cond > 1e10
    if singular:
        se = np.where(np.abs(np.diag(H)) > 0, se, np.nan)
    return GlmFit(
        coefficients=beta,
        std_errors=se,
        p_values=wald_p_values(beta, se),
        converged=converged,
        iterations=it,
        separation_detected=bool(np.any(np.abs(beta) > 15) or singular),
        feature_names=list(design.feature_names),
        log_likelihood=ll,
        lag=design.lag,
        trace=trace,
    )


def predict_glm(fit: GlmFit, design_row) -> float:
    row = np.asarray(design_row, dtype=float)
    if row.shape != fit.coefficients.shape:
        raise ContractError(f"row has {row.shape} entries, model expects {fit.coefficients.shape}")
    return float(expit(np.array([row @ fit.coefficients]))[0])


def predict_design(fit: GlmFit, design: LaggedDesign) -> np.ndarray:
    if design.dim != fit.coefficients.shape[0]:
        raise ContractError("design and fit dimensions differ")
    return expit(design.X @ fit.coefficients)
