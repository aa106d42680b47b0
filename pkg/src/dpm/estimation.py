"""Stochastic-gradient fitting of the model parameters (SGDPM).

Each iteration samples one customer, estimates its latent path with the
particle filter under the current parameters and takes an ascent step on the
conditional log-likelihood evaluated at that path.

Two optional refinements of the plain update ``theta += gamma * grad`` are on
by default:

* ``centered``: steps are taken in ``(level, phi, alpha, beta)`` with
  ``level = c / (1 - phi)``. The filtered state sits near the level, so the
  ``c`` and ``phi`` gradients are nearly collinear in the raw coordinates; in
  the centered ones the ``phi`` feature becomes ``x - level``.
* ``precondition``: each coordinate is divided by the running RMS of its
  gradient (seeded by ``warmup`` draws at the initial parameters) and the
  resulting step is clipped to ``[-clip, clip]``.

With both off the update is the textbook one.
"""
from __future__ import annotations

import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field, replace
from typing import Hashable, Optional, Sequence

import numpy as np

from .model import (
    ContractError,
    CustomerHistory,
    ModelParams,
    PropensityPath,
    expit,
    log_joint,
    predictive_states,
)
from .particles import DegenerateLikelihoodError, FilterConfig, estimate_path

log = logging.getLogger(__name__)

MAX_CONSECUTIVE_SKIPS = 100


class FitAbortedError(RuntimeError):
    pass


class EmptyStratumWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SgdConfig:
    gamma0: float = 0.2
    schedule_exponent: float = 0.6
    max_iters: int = 80000
    pos_sample_prob: float = 0.5
    convergence_window: int = 2000
    convergence_tol: float = 1e-3
    filter: FilterConfig = field(default_factory=lambda: FilterConfig(particle_count=200))
    seed: int = 0
    reweight: bool = False
    centered: bool = True
    precondition: bool = True
    warmup: int = 300
    clip: float = 0.1
    init_phi: float = 0.5

    def __post_init__(self):
        if not self.gamma0 >= 0:
            raise ContractError("gamma0 must be non-negative")
        if not 0.5 < self.schedule_exponent <= 1.0:
            raise ContractError("schedule_exponent must lie in (0.5, 1]")
        if not 0.0 <= self.pos_sample_prob <= 1.0:
            raise ContractError("pos_sample_prob must lie in [0, 1]")
        if self.max_iters < 1 or self.convergence_window < 1:
            raise ContractError("max_iters and convergence_window must be positive")
        if self.warmup < 0 or not self.clip > 0:
            raise ContractError("warmup must be >= 0 and clip > 0")
        if not abs(self.init_phi) < 1:
            raise ContractError("init_phi must satisfy |phi| < 1")

    def step_size(self, v: int) -> float:
        """Robbins-Monro step for iteration ``v`` (1-based)."""
        return self.gamma0 / (1.0 + v) ** self.schedule_exponent


@dataclass
class FitReport:
    final_params: ModelParams
    trajectory: np.ndarray  # one row per update: (c, phi, alpha..., beta...)
    iterations_run: int
    converged: bool
    warnings: list = field(default_factory=list)
    initial_params: Optional[ModelParams] = None
    skipped: int = 0
    window: int = 500
    c_sampling_biased: bool = True

    @property
    def names(self) -> list[str]:
        return self.final_params.names()

    def window_mean(self) -> np.ndarray:
        return self.trajectory[-self.window :].mean(axis=0)


# --------------------------------------------------------------------------- gradient


def _features(params: ModelParams, history: CustomerHistory, path: PropensityPath) -> np.ndarray:
    """Rows ``ds_t/dtheta`` for days 1..T: (1, x_{t-1}, r_{t-1}, m_{t-1}) with day-0 touches zero."""
    T = history.T
    Z = np.zeros((T, 2 + params.K + params.L))
    Z[:, 0] = 1.0
    Z[0, 1] = path.x0
    Z[1:, 1] = path.x[:-1]
    Z[1:, 2 : 2 + params.K] = history.r[:-1]
    Z[1:, 2 + params.K :] = history.m[:-1]
    return Z


def grad_log_joint(
    params: ModelParams,
    history: CustomerHistory,
    path: PropensityPath,
    emission: bool = True,
    transition: bool = True,
) -> np.ndarray:
    """Gradient of :func:`log_joint` in ``(c, phi, alpha..., beta...)`` order.

    Every day contributes ``(y_t - sigmoid(s_t) + x_t - s_t) * ds_t/dtheta``.
    The flags mask either part of the objective.
    """
    s = predictive_states(params, history, path.x, path.x0)[:-1]
    resid = np.zeros(history.T)
    if emission:
        resid += history.y - expit(s)
    if transition:
        resid += path.x - s
    return resid @ _features(params, history, path)


# --------------------------------------------------------------------------- sampling


class CustomerSampler:
    """Stratified draws: purchasers with probability ``pos_sample_prob``."""

    def __init__(self, dataset: Sequence[CustomerHistory], pos_sample_prob: float):
        if len(dataset) == 0:
            raise ContractError("cannot sample from an empty dataset")
        self.dataset = dataset
        self.pos = np.array([i for i, h in enumerate(dataset) if h.purchased], dtype=np.int64)
        self.neg = np.array([i for i, h in enumerate(dataset) if not h.purchased], dtype=np.int64)
        self.prob = float(pos_sample_prob)
        if len(self.pos) == 0 or len(self.neg) == 0:
            which = "purchasers" if len(self.pos) == 0 else "non-purchasers"
            warnings.warn(f"no {which} in dataset; sampling the other stratum only", EmptyStratumWarning, stacklevel=2)
        n = len(dataset)
        # how much each stratum is over-represented relative to uniform sampling
        self.inflation = {
            True: (self.effective_prob / (len(self.pos) / n)) if len(self.pos) else 1.0,
            False: ((1 - self.effective_prob) / (len(self.neg) / n)) if len(self.neg) else 1.0,
        }

    @property
    def effective_prob(self) -> float:
        if len(self.pos) == 0:
            return 0.0
        if len(self.neg) == 0:
            return 1.0
        return self.prob

    def draw_index(self, rng: np.random.Generator) -> int:
        take_pos = rng.random() < self.effective_prob
        pool = self.pos if take_pos else self.neg
        return int(pool[rng.integers(len(pool))])

    def draw(self, rng: np.random.Generator) -> CustomerHistory:
        return self.dataset[self.draw_index(rng)]


def sample_customer(dataset: Sequence[CustomerHistory], pos_sample_prob: float, rng: np.random.Generator) -> CustomerHistory:
    return CustomerSampler(dataset, pos_sample_prob).draw(rng)


# --------------------------------------------------------------------------- fitting


def check_dataset(dataset: Sequence[CustomerHistory]) -> tuple[int, int]:
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    K, L = dataset[0].K, dataset[0].L
    for h in dataset:
        if h.K != K or h.L != L:
            raise ContractError(f"customer {h.id} has (K, L) = ({h.K}, {h.L}); expected ({K}, {L})")
    return K, L


def initial_params(dataset: Sequence[CustomerHistory], phi: float = 0.5) -> ModelParams:
    """Zero touch effects, damping ``phi`` and an offset whose stationary
    purchase probability equals the empirical daily purchase rate."""
    K, L = check_dataset(dataset)
    days = sum(h.T for h in dataset)
    buys = sum(int(h.purchased) for h in dataset)
    rate = min(max(buys / days, 0.5 / days), 1 - 0.5 / days)
    level = math.log(rate / (1 - rate))
    return ModelParams((1 - phi) * level, phi, np.zeros(K), np.zeros(L))


def _to_internal(theta: np.ndarray, centered: bool) -> np.ndarray:
    u = theta.copy()
    if centered:
        u[0] = theta[0] / (1 - theta[1])
    return u


def _to_params(u: np.ndarray, centered: bool) -> np.ndarray:
    theta = u.copy()
    if centered:
        theta[0] = u[0] * (1 - u[1])
    return theta


def _internal_grad(g: np.ndarray, u: np.ndarray, centered: bool) -> np.ndarray:
    if not centered:
        return g
    gu = g.copy()
    level, phi = u[0], u[1]
    gu[0] = (1 - phi) * g[0]
    gu[1] = g[1] - level * g[0]
    return gu


def _iteration_rng(seed: int, stream: int, v: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream, v]))


class _Skipper:
    def __init__(self):
        self.run = 0
        self.total = 0

    def skip(self, err: DegenerateLikelihoodError, v: int):
        self.run += 1
        self.total += 1
        log.info("iteration %d: skipping customer (%s)", v, err)
        if self.run >= MAX_CONSECUTIVE_SKIPS:
            raise FitAbortedError(f"{self.run} consecutive degenerate customers; aborting at iteration {v}")

    def ok(self):
        self.run = 0


def fit(
    dataset: Sequence[CustomerHistory],
    config: SgdConfig = SgdConfig(),
    init: Optional[ModelParams] = None,
) -> FitReport:
    """Run SGDPM on ``dataset`` and return the trajectory and averaged estimate."""
    K, L = check_dataset(dataset)
    theta0 = init if init is not None else initial_params(dataset, config.init_phi)
    if theta0.K != K or theta0.L != L:
        raise ContractError("initial parameters do not match dataset dimensions")
    sampler = CustomerSampler(dataset, config.pos_sample_prob)
    draw_rng = _iteration_rng(config.seed, 0, 0)
    fconf = config.filter
    centered = config.centered and theta0.stationary
    skipper = _Skipper()
    notes: list[str] = []

    def gradient(theta_vec: np.ndarray, v: int, stream: int):
        idx = sampler.draw_index(draw_rng)
        hist = dataset[idx]
        params = ModelParams.from_vector(theta_vec, K, L)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            path = estimate_path(params, hist, fconf, rng=_iteration_rng(config.seed, stream, v))
        g = grad_log_joint(params, hist, path)
        if config.reweight:
            g = g / sampler.inflation[hist.purchased]
        return g

    theta = theta0.to_vector()
    u = _to_internal(theta, centered)
    # running mean of squared gradients, seeded by a warm-up sample at theta0
    sq = np.zeros_like(u)
    n_sq = 0
    if config.precondition and config.gamma0 > 0:
        for w in range(config.warmup):
            try:
                g = gradient(theta, w, 1)
            except DegenerateLikelihoodError as err:
                skipper.skip(err, -w)
                continue
            skipper.ok()
            gu = _internal_grad(g, u, centered)
            sq += gu * gu
            n_sq += 1

    W = config.convergence_window
    traj = np.empty((config.max_iters, theta.shape[0]))
    prev_mean = None
    converged = False
    phi_excursions = 0
    v = 0
    while v < config.max_iters:
        try:
            g = gradient(theta, v, 2)
        except DegenerateLikelihoodError as err:
            skipper.skip(err, v)
            traj[v] = theta
            v += 1
            continue
        skipper.ok()
        gu = _internal_grad(g, u, centered)
        gamma = config.step_size(v + 1)
        if config.precondition:
            sq += gu * gu
            n_sq += 1
            scale = np.sqrt(sq / n_sq)
            step = np.clip(gamma * gu / np.where(scale > 0, scale, 1.0), -config.clip, config.clip)
        else:
            step = gamma * gu
        u = u + step
        theta = _to_params(u, centered)
        if not np.all(np.isfinite(theta)):
            raise FitAbortedError(f"non-finite parameters at iteration {v}")
        if abs(theta[1]) >= 1.0:
            phi_excursions += 1
        traj[v] = theta
        v += 1
        if v % W == 0:
            cur = traj[v - W : v].mean(axis=0)
            if prev_mean is not None:
                rel = np.linalg.norm(cur - prev_mean) / max(np.linalg.norm(prev_mean), 1e-12)
                if rel < config.convergence_tol:
                    converged = True
                    break
            prev_mean = cur
    traj = traj[:v]
    final = traj[-W:].mean(axis=0)
    if phi_excursions:
        notes.append(f"|phi| >= 1 at {phi_excursions} iterations")
    if abs(final[1]) >= 1:
        notes.append("final |phi| >= 1")
    if skipper.total:
        notes.append(f"skipped {skipper.total} degenerate customers")
    biased = (not config.reweight) and len(sampler.pos) > 0 and sampler.inflation[True] != 1.0
    if biased:
        notes.append("offset c is sampling-biased (purchaser oversampling without reweighting)")
    return FitReport(
        final_params=ModelParams.from_vector(final, K, L),
        trajectory=traj,
        iterations_run=v,
        converged=converged,
        warnings=notes,
        initial_params=theta0,
        skipped=skipper.total,
        window=W,
        c_sampling_biased=biased,
    )


def mean_log_joint(params: ModelParams, dataset: Sequence[CustomerHistory], fconf: FilterConfig) -> float:
    """Average per-customer conditional log-likelihood at filtered paths."""
    total = 0.0
    for h in dataset:
        path = estimate_path(params, h, fconf)
        total += log_joint(params, h, path)
    return total / len(dataset)


def fit_restarts(
    dataset: Sequence[CustomerHistory],
    config: SgdConfig = SgdConfig(),
    restarts: int = 1,
    eval_size: int = 500,
) -> FitReport:
    """Best of ``restarts`` fits from different initial damping factors and seeds.

    Fits are ranked by the mean conditional log-likelihood on a fixed subsample.
    """
    if restarts <= 1:
        return fit(dataset, config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 99]))
    phis = np.linspace(0.1, 0.9, restarts)
    idx = rng.choice(len(dataset), size=min(eval_size, len(dataset)), replace=False)
    subset = [dataset[i] for i in sorted(idx)]
    best, best_score = None, -np.inf
    for k, phi in enumerate(phis):
        rep = fit(dataset, replace(config, seed=config.seed + k, init_phi=float(phi)))
        score = mean_log_joint(rep.final_params, subset, config.filter)
        rep.warnings.append(f"restart {k}: init phi {phi:.2f}, mean log joint {score:.4f}")
        if score > best_score:
            best, best_score = rep, score
    return best


def segment_seed(seed: int, segment: Hashable) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(repr(segment).encode("utf-8"))) & 0x7FFFFFFF


def split_segments(dataset: Sequence[CustomerHistory]) -> dict:
    groups: dict = {}
    for h in dataset:
        groups.setdefault(h.segment, []).append(h)
    return groups


def fit_segments(dataset: Sequence[CustomerHistory], config: SgdConfig = SgdConfig(), restarts: int = 1) -> dict:
    """Independent fits per segment key, each seeded from ``(seed, segment)``."""
    return {
        seg: fit_restarts(group, replace(config, seed=segment_seed(config.seed, seg)), restarts)
        for seg, group in split_segments(dataset).items()
    }


def trajectory_drift(trajectory: np.ndarray, tail: float = 0.25) -> float:
    """Largest relative distance ``|theta_v - theta_end| / |theta_end|`` over the final ``tail`` fraction."""
    n = trajectory.shape[0]
    start = int(math.floor(n * (1 - tail)))
    end = trajectory[-1]
    seg = trajectory[start:]
    return float(np.max(np.linalg.norm(seg - end, axis=1)) / np.linalg.norm(end))
