"""Bayesian optimization over a finite parameter lattice.

The surrogate is a Gaussian process approximated by random cosine features
of a squared-exponential kernel, i.e. Bayesian linear regression with a unit
weight prior. Candidates are picked by Thompson sampling: one weight vector
is drawn from the posterior and the unevaluated lattice point with the
smallest sampled value is evaluated next.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import qmc

from .scenarios import ParameterGrid

log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-6
DEFAULT_FEATURES = 1000
LENGTH_SCALE_CANDIDATES = (0.05, 0.1, 0.2, 0.4, 0.8)
NOISE_CANDIDATES = (1e-4, 1e-2)


class FitError(RuntimeError):
    pass


class GridExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    length_scale: float = 0.2
    signal_var: float = 1.0
    noise_var: float = 1e-2
    n_features: int = DEFAULT_FEATURES

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scale, dtype=float))
        if np.any(ls <= 0) or self.signal_var <= 0 or self.noise_var <= 0 or self.n_features < 1:
            raise ValueError(f"invalid kernel config {self}")


@dataclass(frozen=True)
class FeatureMap:
    """phi(x) = sqrt(2 s / M) * cos(W x + b), W rows drawn from the kernel's spectral density."""

    W: np.ndarray
    b: np.ndarray
    signal_var: float

    @property
    def n_features(self) -> int:
        return len(self.b)

    @property
    def amplitude(self) -> float:
        return math.sqrt(2.0 * self.signal_var / self.n_features)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self.amplitude * np.cos(X @ self.W.T + self.b)


def _base_draws(n_features: int, dim: int, seed) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n_features, dim))
    b = rng.uniform(0.0, 2.0 * math.pi, n_features)
    return Z, b


def sample_feature_map(cfg: KernelConfig, seed, dim: int) -> FeatureMap:
    """Random Fourier features; the same seed gives the same base frequencies for any length scale."""
    Z, b = _base_draws(cfg.n_features, dim, seed)
    ls = np.broadcast_to(np.asarray(cfg.length_scale, dtype=float), (dim,))
    return FeatureMap(Z / ls, b, cfg.signal_var)


def exact_kernel(x: np.ndarray, x2: np.ndarray, cfg: KernelConfig) -> float:
    ls = np.asarray(cfg.length_scale, dtype=float)
    r = (np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)) / ls
    return float(cfg.signal_var * np.exp(-0.5 * np.dot(r, r)))


@dataclass(frozen=True)
class Observation:
    index: Tuple[int, ...]
    x: np.ndarray
    y: float


@dataclass
class GpPosterior:
    features: FeatureMap
    mean_w: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of the weight precision
    y_mean: float
    y_scale: float
    cfg: KernelConfig

    @property
    def noise_var(self) -> float:
        return self.cfg.noise_var

    def predict(self, X: np.ndarray, standardized: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """Predictive mean and latent variance at ``X``."""
        Phi = self.features(X)
        mu = Phi @ self.mean_w
        V = solve_triangular(self.chol, Phi.T, lower=True)
        var = np.maximum(np.sum(V * V, axis=0), 0.0)
        if standardized:
            return mu, var
        return self.y_mean + self.y_scale * mu, var * self.y_scale**2

    def sample_weights(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(len(self.mean_w))
        return self.mean_w + solve_triangular(self.chol.T, z, lower=False)

    def sample_on(self, X: np.ndarray, w: np.ndarray) -> np.ndarray:
        return self.features(X) @ w

    def sample_on_grid(self, grid: ParameterGrid, w: np.ndarray) -> np.ndarray:
        """Sampled function at every grid point, flattened row-major.

        Uses cos(sum_d a_d + b) = Re(e^{ib} prod_d e^{i a_d}) so the cost is a
        chain of small matrix products instead of one row of features per cell.
        """
        fm = self.features
        c = fm.amplitude * w * np.exp(1j * fm.b)
        axes = [np.exp(1j * np.outer(fm.W[:, d], np.arange(n) / (n - 1) if n > 1 else np.zeros(1))) for d, n in enumerate(grid.shape)]
        return _contract(c, axes).ravel()


def _contract(c: np.ndarray, axes: List[np.ndarray]) -> np.ndarray:
    if len(axes) == 1:
        return np.real(c @ axes[0])
    if len(axes) == 2:
        return np.real((c[:, None] * axes[0]).T @ axes[1])
    first, rest = axes[0], axes[1:]
    return np.stack([_contract(c * first[:, k], rest) for k in range(first.shape[1])])


def _standardize(y: np.ndarray) -> Tuple[np.ndarray, float, float]:
    mean = float(np.mean(y))
    scale = float(np.std(y))
    if not scale > 1e-12:
        scale = 1.0
    return (y - mean) / scale, mean, scale


def _as_arrays(observations: Sequence[Observation]) -> Tuple[np.ndarray, np.ndarray]:
    if not observations:
        raise FitError("no observations")
    X = np.array([o.x for o in observations], dtype=float)
    y = np.array([o.y for o in observations], dtype=float)
    if not np.all(np.isfinite(y)):
        raise FitError("non-finite objective values")
    return X, y


def _factor(Phi: np.ndarray, noise_var: float) -> np.ndarray:
    A = Phi.T @ Phi / noise_var
    A[np.diag_indices_from(A)] += 1.0
    return np.linalg.cholesky(A)


def _factor_with_retry(Phi: np.ndarray, cfg: KernelConfig) -> Tuple[np.ndarray, KernelConfig]:
    try:
        return _factor(Phi, cfg.noise_var), cfg
    except np.linalg.LinAlgError:
        if cfg.noise_var >= NOISE_FLOOR:
            raise FitError("weight precision is not positive definite")
    retry = replace(cfg, noise_var=NOISE_FLOOR)
    log.warning("Cholesky failed; retrying with noise variance %g", NOISE_FLOOR)
    try:
        return _factor(Phi, retry.noise_var), retry
    except np.linalg.LinAlgError as exc:
        raise FitError("weight precision is not positive definite") from exc


def fit(observations: Sequence[Observation], cfg: KernelConfig, seed, features: Optional[FeatureMap] = None) -> GpPosterior:
    X, y = _as_arrays(observations)
    fm = features if features is not None else sample_feature_map(cfg, seed, X.shape[1])
    ys, mean, scale = _standardize(y)
    Phi = fm(X)
    L, cfg = _factor_with_retry(Phi, cfg)
    mean_w = cho_solve((L, True), Phi.T @ ys / cfg.noise_var)
    return GpPosterior(fm, mean_w, L, mean, scale, cfg)


def log_marginal_likelihood(observations: Sequence[Observation], cfg: KernelConfig, seed, features: Optional[FeatureMap] = None) -> float:
    """Exact log evidence of the standardized targets under the feature-space linear model."""
    X, y = _as_arrays(observations)
    fm = features if features is not None else sample_feature_map(cfg, seed, X.shape[1])
    ys, _, _ = _standardize(y)
    n = len(ys)
    Phi = fm(X)
    if n < Phi.shape[1]:
        return _evidence_dual(Phi, ys, cfg)
    L, cfg = _factor_with_retry(Phi, cfg)
    r = Phi.T @ ys / cfg.noise_var
    u = solve_triangular(L, r, lower=True)
    quad = ys @ ys / cfg.noise_var - u @ u
    logdet = 2.0 * np.sum(np.log(np.diag(L))) + n * math.log(cfg.noise_var)
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * n * math.log(2.0 * math.pi))


def _evidence_dual(Phi: np.ndarray, ys: np.ndarray, cfg: KernelConfig) -> float:
    """Same evidence via the n x n marginal covariance Phi Phi^T + noise I; cheaper when n < M."""
    K = Phi @ Phi.T
    K[np.diag_indices_from(K)] += cfg.noise_var
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise FitError("marginal covariance is not positive definite") from exc
    u = solve_triangular(L, ys, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * u @ u - 0.5 * logdet - 0.5 * len(ys) * math.log(2.0 * math.pi))


def tune(
    observations: Sequence[Observation],
    candidates: Optional[Iterable[KernelConfig]] = None,
    seed=0,
    n_features: int = DEFAULT_FEATURES,
) -> KernelConfig:
    """Evidence-maximizing config; ties go to the larger length scale."""
    if candidates is None:
        candidates = [KernelConfig(ls, 1.0, nv, n_features) for ls in LENGTH_SCALE_CANDIDATES for nv in NOISE_CANDIDATES]
    candidates = list(candidates)
    if len(candidates) == 1:
        return candidates[0]
    scored = [(log_marginal_likelihood(observations, c, seed), c) for c in candidates]
    best = max(v for v, _ in scored)
    tol = 1e-9 * max(1.0, abs(best))
    tied = [c for v, c in scored if v >= best - tol]
    return max(tied, key=lambda c: (float(np.max(c.length_scale)), c.noise_var))


@dataclass
class BoState:
    grid: ParameterGrid
    budget: int
    seed: int
    observations: List[Observation] = field(default_factory=list)
    posterior: Optional[GpPosterior] = None
    evaluated: set = field(default_factory=set)
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(np.random.SeedSequence(self.seed).spawn(3)[2])

    def add(self, index: Sequence[int], y: float) -> Observation:
        index = tuple(int(k) for k in index)
        flat = self.grid.flat(index)
        if flat in self.evaluated:
            raise ValueError(f"index {index} already evaluated")
        if len(self.observations) >= self.budget:
            raise ValueError("budget exhausted")
        obs = Observation(index, self.grid.normalize(index), float(y))
        self.observations.append(obs)
        self.evaluated.add(flat)
        return obs

    @property
    def incumbent(self) -> Optional[Observation]:
        if not self.observations:
            return None
        return min(self.observations, key=lambda o: o.y)


def normalize(grid: ParameterGrid, index: Sequence[int]) -> np.ndarray:
    return grid.normalize(index)


def thompson_next(state: BoState) -> Tuple[int, ...]:
    """Minimizer of one posterior function draw over the unevaluated lattice points."""
    n = state.grid.cardinality
    if len(state.evaluated) >= n:
        raise GridExhausted("every grid index has been evaluated")
    if n - len(state.evaluated) == 1:
        remaining = next(i for i in range(n) if i not in state.evaluated)
        return state.grid.unflat(remaining)
    if state.posterior is None:
        raise FitError("no posterior fitted")
    w = state.posterior.sample_weights(state.rng)
    scores = state.posterior.sample_on_grid(state.grid, w)
    if state.evaluated:
        scores[np.fromiter(state.evaluated, dtype=np.int64)] = np.inf
    return state.grid.unflat(int(np.argmin(scores)))


def initial_indices(grid: ParameterGrid, count: int, seed) -> List[Tuple[int, ...]]:
    """Distinct lattice points from a scrambled Halton sequence."""
    count = min(count, grid.cardinality)
    d = len(grid.shape)
    sampler = qmc.Halton(d, scramble=True, seed=np.random.default_rng(seed))
    shape = np.array(grid.shape)
    out, seen = [], set()
    while len(out) < count:
        u = sampler.random(max(count, 8))
        for row in np.minimum((u * shape).astype(int), shape - 1):
            idx = tuple(int(k) for k in row)
            flat = grid.flat(idx)
            if flat not in seen:
                seen.add(flat)
                out.append(idx)
                if len(out) == count:
                    break
        if len(seen) >= grid.cardinality:
            break
    return out


@dataclass
class BoResult:
    history: List[Observation]
    incumbent: Observation
    configs: List[KernelConfig]


def run(
    objective: Callable[[Tuple[int, ...]], float],
    grid: ParameterGrid,
    budget: int,
    init_count: int = 8,
    seed: int = 0,
    n_features: int = DEFAULT_FEATURES,
    retune_every: int = 10,
    failure_value: Optional[float] = None,
    kernel: Optional[KernelConfig] = None,
    on_observation: Optional[Callable[[Observation], None]] = None,
) -> BoResult:
    """Minimize ``objective`` over ``grid`` with at most ``budget`` evaluations."""
    if not budget >= init_count >= 1:
        raise ValueError("need budget >= init_count >= 1")
    budget = min(budget, grid.cardinality)
    init_seed, feature_seed, _ = np.random.SeedSequence(seed).spawn(3)
    state = BoState(grid, budget, seed)
    cfg = kernel or KernelConfig(n_features=n_features)
    configs = []

    def evaluate(index):
        try:
            y = float(objective(index))
            if not math.isfinite(y):
                raise ValueError(f"objective returned {y}")
        except Exception:
            if failure_value is None:
                raise
            log.exception("objective failed at %s; recording %g", index, failure_value)
            y = failure_value
        obs = state.add(index, y)
        if on_observation is not None:
            on_observation(obs)

    for index in initial_indices(grid, min(init_count, budget), init_seed):
        evaluate(index)
    it = 0
    while len(state.observations) < budget:
        if it % retune_every == 0 and len(state.observations) >= 2 and kernel is None:
            cfg = tune(state.observations, seed=feature_seed, n_features=n_features)
            configs.append(cfg)
        state.posterior = fit(state.observations, cfg, feature_seed)
        evaluate(thompson_next(state))
        it += 1
    return BoResult(list(state.observations), state.incumbent, configs)

