"""Gaussian process classification surrogate modules.

One binary GP classifier per vehicle (dynamic feasibility) and one per
vehicle pair (collision avoidance), per fidelity level. Inference is a
Laplace approximation of the probit-Bernoulli posterior with a squared
exponential ARD kernel; hyperparameters maximize the approximate log
marginal likelihood by multi-start L-BFGS. Two fidelity levels are tied
by a first-order autoregressive model: the high-fidelity latent is the
scaled low-fidelity posterior mean plus an independent GP discrepancy,
with the scale chosen by a marginal-likelihood grid search.

Module inputs are time allocations normalized element-wise by the
initial solution; pair modules see the concatenation of both vehicles'
normalized allocations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import log_ndtr, ndtr

logger = logging.getLogger(__name__)

LEVEL_LOW = "low"
LEVEL_HIGH = "high"

JITTER_INIT = 1e-6
JITTER_MAX = 1e-2
NEWTON_TOL = 1e-6
NEWTON_MAX_ITER = 100
SIGMA_FLOOR = 1e-9
MIN_HIGH_RECORDS = 4
DATA_CAP = 4096
RHO_GRID = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.1), 10)

# deterministic multi-start grid: (signal variance, length-scale multiplier)
RESTART_STARTS = [(1.0, 0.3), (1.0, 1.0), (1.0, 3.0), (9.0, 0.5), (4.0, 1.5)]

# the probit link saturates beyond |f| ~ 3, so signal variances above ~25
# are unidentifiable and invite degenerate maximum-likelihood fits
THETA_BOUNDS_LOG_SV = (np.log(0.05), np.log(25.0))
THETA_BOUNDS_LOG_LS = (np.log(0.05), np.log(20.0))


class SurrogateConditioningError(RuntimeError):
    """Kernel matrix stayed non-positive-definite after jitter escalation."""


def se_kernel(Xa: np.ndarray, Xb: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Squared-exponential ARD kernel; theta = log [signal_var, ls_1..ls_d]."""
    signal_var = np.exp(theta[0])
    ls = np.exp(theta[1:])
    d = (Xa[:, None, :] - Xb[None, :, :]) / ls[None, None, :]
    return signal_var * np.exp(-0.5 * np.einsum("abk,abk->ab", d, d))


def _probit_terms(f: np.ndarray, y_pm: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Sum log-likelihood, gradient, and negative Hessian diagonal W."""
    z = y_pm * f
    log_lik = log_ndtr(z)
    log_pdf = -0.5 * z * z - 0.5 * np.log(2 * np.pi)
    ratio = np.exp(log_pdf - log_lik)
    grad = y_pm * ratio
    W = ratio * (ratio + z)
    return float(log_lik.sum()), grad, np.clip(W, 1e-12, None)


def _chol_with_escalation(K: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    while jitter <= JITTER_MAX:
        try:
            return cholesky(K + jitter * np.eye(K.shape[0]), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SurrogateConditioningError("kernel matrix not positive definite at maximum jitter")


@dataclass
class GpcModule:
    """One fitted binary GP classifier (latent values + hyperparameters).

    Uninformative modules (fewer than two records or a single class in
    the labels) fall back to the prior: zero latent mean, unit variance.
    """

    theta: np.ndarray
    X: np.ndarray | None = None
    y: np.ndarray | None = None
    prior_mean: np.ndarray | None = None
    prior_cov_extra: np.ndarray | None = None
    jitter: float = JITTER_INIT
    informative: bool = False
    log_marginal_likelihood: float = -np.inf
    _grad: np.ndarray | None = field(default=None, repr=False)
    _W_sr: np.ndarray | None = field(default=None, repr=False)
    _L: np.ndarray | None = field(default=None, repr=False)
    _f_hat: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_dims(self) -> int:
        return len(self.theta) - 1

    @property
    def n_records(self) -> int:
        return 0 if self.X is None else len(self.X)

    @classmethod
    def prior_only(cls, n_dims: int) -> "GpcModule":
        return cls(theta=np.zeros(n_dims + 1))

    @classmethod
    def fit(
        cls,
        X: np.ndarray,
        y: np.ndarray,
        n_dims: int | None = None,
        theta: np.ndarray | None = None,
        prior_mean: np.ndarray | None = None,
        prior_cov_extra: np.ndarray | None = None,
        optimize_hyperparams: bool = True,
        restarts: int = 5,
    ) -> "GpcModule":
        """Fit by Laplace approximation; returns a new immutable module.

        Hyperparameters are optimized by multi-start L-BFGS on the
        approximate log marginal likelihood unless optimize_hyperparams
        is false (the previous theta is then reused). prior_mean and
        prior_cov_extra shift the latent prior to N(m, K + extra); the
        autoregressive fidelity composition uses them to propagate the
        lower level's posterior.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=int)
        if n_dims is None:
            n_dims = X.shape[1] if X.size else (len(theta) - 1 if theta is not None else 1)
        if len(X) > DATA_CAP:
            X = X[-DATA_CAP:]
            y = y[-DATA_CAP:]
            if prior_mean is not None:
                prior_mean = prior_mean[-DATA_CAP:]
            if prior_cov_extra is not None:
                prior_cov_extra = prior_cov_extra[-DATA_CAP:, -DATA_CAP:]
        if len(y) < 2:
            module = cls.prior_only(n_dims)
            module.X = X if X.size else None
            module.y = y if y.size else None
            return module
        if len(np.unique(y)) < 2:
            # single-class data still carries evidence (no boundary to place,
            # so hyperparameter search is skipped)
            optimize_hyperparams = False

        theta0 = theta if theta is not None else np.zeros(n_dims + 1)
        best_theta, best_lml = theta0, -np.inf
        if optimize_hyperparams:
            starts = [theta0]
            for sv, ls_mult in RESTART_STARTS[: max(restarts, 0)]:
                t = np.zeros(n_dims + 1)
                t[0] = np.log(sv)
                t[1:] = theta0[1:] + np.log(ls_mult)
                starts.append(t)
            bounds = [THETA_BOUNDS_LOG_SV] + [THETA_BOUNDS_LOG_LS] * n_dims

            def neg_lml(t: np.ndarray) -> float:
                try:
                    lml, *_ = _laplace_posterior(X, y, t, prior_mean, prior_cov_extra)
                except SurrogateConditioningError:
                    return 1e10
                return -lml

            for start in starts:
                res = minimize(
                    neg_lml,
                    np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds]),
                    method="L-BFGS-B",
                    bounds=bounds,
                    options={"maxiter": 30, "eps": 1e-5},
                )
                if -res.fun > best_lml:
                    best_lml = -res.fun
                    best_theta = res.x
        else:
            best_theta = theta0

        lml, f_hat, grad, W_sr, L, jitter = _laplace_posterior(X, y, best_theta, prior_mean, prior_cov_extra)
        return cls(
            theta=best_theta,
            X=X,
            y=y,
            prior_mean=prior_mean,
            prior_cov_extra=prior_cov_extra,
            jitter=jitter,
            informative=True,
            log_marginal_likelihood=lml,
            _grad=grad,
            _W_sr=W_sr,
            _L=L,
            _f_hat=f_hat,
        )

    def predict_with_kernel(self, k_star: np.ndarray, k_ss: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Laplace predictive given explicit prior cross/self covariances.

        k_star is (n_train, n_star); k_ss the prior variance at the
        queries. Returns the GP contribution (mean excludes prior_mean).
        """
        if not self.informative:
            return np.zeros(k_star.shape[1] if k_star.ndim == 2 else 1), np.sqrt(np.clip(k_ss, SIGMA_FLOOR**2, None))
        mu = k_star.T @ self._grad
        v = solve_triangular(self._L, self._W_sr[:, None] * k_star, lower=True)
        var = np.clip(k_ss - np.einsum("ij,ij->j", v, v), SIGMA_FLOOR**2, None)
        return mu, np.sqrt(var)

    def _prior_kernel(self, X_star: np.ndarray) -> np.ndarray:
        return se_kernel(self.X, X_star, self.theta)

    def predict_latent(self, X_star: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent mean and stddev of the GP part (excludes any prior mean)."""
        X_star = np.atleast_2d(np.asarray(X_star, dtype=float))
        if X_star.shape[1] != self.n_dims:
            raise ValueError(f"query has {X_star.shape[1]} dims, module expects {self.n_dims}")
        sv = np.exp(self.theta[0])
        if not self.informative:
            return np.zeros(len(X_star)), np.full(len(X_star), np.sqrt(sv))
        k_star = self._prior_kernel(X_star)
        return self.predict_with_kernel(k_star, np.full(len(X_star), sv))

    def posterior_cov(self, Xa: np.ndarray, Xb: np.ndarray) -> np.ndarray:
        """Posterior latent covariance between two query sets."""
        Xa = np.atleast_2d(np.asarray(Xa, dtype=float))
        Xb = np.atleast_2d(np.asarray(Xb, dtype=float))
        K_ab = se_kernel(Xa, Xb, self.theta)
        if not self.informative:
            return K_ab
        ka = se_kernel(self.X, Xa, self.theta)
        kb = se_kernel(self.X, Xb, self.theta)
        va = solve_triangular(self._L, self._W_sr[:, None] * ka, lower=True)
        vb = solve_triangular(self._L, self._W_sr[:, None] * kb, lower=True)
        return K_ab - va.T @ vb

    def predict(self, X_star: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(latent mean, latent stddev, P(y=1)) at the query points."""
        mu, sigma = self.predict_latent(X_star)
        prob = ndtr(mu / np.sqrt(1.0 + sigma**2))
        return mu, sigma, prob

    def state_hash(self) -> int:
        parts = [self.theta.tobytes()]
        for arr in (self.X, self.y, self._f_hat):
            parts.append(b"" if arr is None else np.ascontiguousarray(arr).tobytes())
        return hash(tuple(parts))

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "X": None if self.X is None else self.X.tolist(),
            "y": None if self.y is None else self.y.tolist(),
            "f": None if self._f_hat is None else self._f_hat.tolist(),
            "prior_mean": None if self.prior_mean is None else self.prior_mean.tolist(),
            "prior_cov_extra": None if self.prior_cov_extra is None else self.prior_cov_extra.tolist(),
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GpcModule":
        theta = np.asarray(data["theta"], dtype=float)
        if data["X"] is None:
            return cls.prior_only(len(theta) - 1)
        X = np.asarray(data["X"], dtype=float)
        y = np.asarray(data["y"], dtype=int)
        pm = None if data.get("prior_mean") is None else np.asarray(data["prior_mean"], dtype=float)
        pc = None if data.get("prior_cov_extra") is None else np.asarray(data["prior_cov_extra"], dtype=float)
        return cls.fit(X, y, theta=theta, prior_mean=pm, prior_cov_extra=pc, optimize_hyperparams=False)


def _laplace_posterior(
    X: np.ndarray,
    y: np.ndarray,
    theta: np.ndarray,
    prior_mean: np.ndarray | None,
    prior_cov_extra: np.ndarray | None = None,
):
    """Newton iteration to the posterior mode (probit likelihood).

    Returns (log marginal likelihood, f_hat, likelihood gradient at the
    mode, sqrt W, Cholesky factor of B = I + W^1/2 K W^1/2, jitter).
    """
    n = len(y)
    y_pm = 2.0 * y - 1.0
    m0 = prior_mean if prior_mean is not None else np.zeros(n)
    K = se_kernel(X, X, theta)
    if prior_cov_extra is not None:
        K = K + prior_cov_extra
    jitter = JITTER_INIT
    # establish a PD kernel Cholesky up front (escalates jitter if needed)
    _, jitter = _chol_with_escalation(K, jitter)
    K = K + jitter * np.eye(n)

    f = m0.copy()
    g = np.zeros(n)
    a = np.zeros(n)
    psi_prev = -np.inf
    for _ in range(NEWTON_MAX_ITER):
        log_lik, grad, W = _probit_terms(f, y_pm)
        W_sr = np.sqrt(W)
        B = np.eye(n) + W_sr[:, None] * K * W_sr[None, :]
        L = cholesky(B, lower=True)
        b = W * g + grad
        a_new = b - W_sr * cho_solve((L, True), W_sr * (K @ b))
        g_new = K @ a_new

        # backtrack toward the previous iterate if the objective decreased
        step = 1.0
        for _ in range(20):
            g_try = g + step * (g_new - g)
            a_try = a + step * (a_new - a)
            f_try = m0 + g_try
            ll_try, *_ = _probit_terms(f_try, y_pm)
            psi_try = ll_try - 0.5 * float(a_try @ g_try)
            if psi_try >= psi_prev or step < 1e-4:
                break
            step *= 0.5
        delta = np.max(np.abs(f_try - f))
        f, g, a, psi_prev = f_try, g_try, a_try, psi_try
        if delta < NEWTON_TOL:
            break

    log_lik, grad, W = _probit_terms(f, y_pm)
    W_sr = np.sqrt(W)
    B = np.eye(n) + W_sr[:, None] * K * W_sr[None, :]
    L = cholesky(B, lower=True)
    lml = -0.5 * float(a @ g) + log_lik - float(np.sum(np.log(np.diag(L))))
    return lml, f, grad, W_sr, L, jitter


def variance_penalized_prob(mu: np.ndarray, sigma: np.ndarray, beta: float) -> np.ndarray:
    """P(latent discounted by beta standard deviations is positive)."""
    return ndtr((mu - beta * sigma) / np.sqrt(1.0 + sigma**2))


@dataclass
class Normalizer:
    """Element-wise scaling of time allocations by the initial solution."""

    base: np.ndarray  # (n_vehicles, n_segments), strictly positive

    def __post_init__(self):
        self.base = np.atleast_2d(np.asarray(self.base, dtype=float))
        if np.any(self.base <= 0):
            raise ValueError("normalization base must be strictly positive")

    def vehicle(self, i: int, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) / self.base[i]

    def vehicle_inverse(self, i: int, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.base[i]

    def pair(self, i: int, j: int, x_i: np.ndarray, x_j: np.ndarray) -> np.ndarray:
        return np.concatenate([self.vehicle(i, x_i), self.vehicle(j, x_j)])


def pair_keys(n_vehicles: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n_vehicles) for j in range(i + 1, n_vehicles)]


@dataclass
class Dataset:
    """Labeled evaluations per module and fidelity level (normalized inputs)."""

    n_vehicles: int
    n_segments: int
    vehicle_records: dict = field(default_factory=dict)  # (level, i) -> [X rows], [y]
    pair_records: dict = field(default_factory=dict)  # (level, (i, j)) -> [X rows], [y]

    def add_vehicle(self, level: str, i: int, x_norm: np.ndarray, label: int):
        rows, labels = self.vehicle_records.setdefault((level, i), ([], []))
        rows.append(np.asarray(x_norm, dtype=float))
        labels.append(int(label))

    def add_pair(self, level: str, key: tuple[int, int], x_norm: np.ndarray, label: int):
        rows, labels = self.pair_records.setdefault((level, key), ([], []))
        rows.append(np.asarray(x_norm, dtype=float))
        labels.append(int(label))

    def vehicle_data(self, level: str, i: int) -> tuple[np.ndarray, np.ndarray]:
        rows, labels = self.vehicle_records.get((level, i), ([], []))
        if not rows:
            return np.zeros((0, self.n_segments)), np.zeros(0, dtype=int)
        return np.vstack(rows), np.asarray(labels, dtype=int)

    def pair_data(self, level: str, key: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        rows, labels = self.pair_records.get((level, key), ([], []))
        if not rows:
            return np.zeros((0, 2 * self.n_segments)), np.zeros(0, dtype=int)
        return np.vstack(rows), np.asarray(labels, dtype=int)

    def counts(self, level: str) -> dict:
        out = {}
        for (lvl, key), (rows, _) in list(self.vehicle_records.items()) + list(self.pair_records.items()):
            if lvl == level:
                out[key] = len(rows)
        return out


@dataclass
class ModularSurrogate:
    """Independent GP classifier modules per vehicle and pair, per level."""

    n_vehicles: int
    n_segments: int
    levels: tuple[str, ...] = (LEVEL_LOW,)
    cost_weights: dict = field(default_factory=lambda: {LEVEL_LOW: 1.0, LEVEL_HIGH: 10.0})
    modules: dict = field(default_factory=dict)  # (level, key) -> GpcModule
    rho: dict = field(default_factory=dict)  # key -> float

    def __post_init__(self):
        for level in self.levels:
            for i in range(self.n_vehicles):
                self.modules.setdefault((level, i), GpcModule.prior_only(self.n_segments))
            for key in pair_keys(self.n_vehicles):
                self.modules.setdefault((level, key), GpcModule.prior_only(2 * self.n_segments))

    def module_count(self, level: str) -> int:
        return sum(1 for (lvl, _) in self.modules if lvl == level)

    def refit(self, dataset: Dataset, optimize_hyperparams: bool = True, restarts: int = 5):
        """Refit every module from the dataset (modules stay independent)."""
        for i in range(self.n_vehicles):
            X, y = dataset.vehicle_data(LEVEL_LOW, i)
            prev = self.modules[(LEVEL_LOW, i)]
            self.modules[(LEVEL_LOW, i)] = GpcModule.fit(
                X, y, n_dims=self.n_segments, theta=prev.theta,
                optimize_hyperparams=optimize_hyperparams, restarts=restarts,
            )
        for key in pair_keys(self.n_vehicles):
            X, y = dataset.pair_data(LEVEL_LOW, key)
            prev = self.modules[(LEVEL_LOW, key)]
            self.modules[(LEVEL_LOW, key)] = GpcModule.fit(
                X, y, n_dims=2 * self.n_segments, theta=prev.theta,
                optimize_hyperparams=optimize_hyperparams, restarts=restarts,
            )
        if LEVEL_HIGH in self.levels:
            for key in list(range(self.n_vehicles)) + pair_keys(self.n_vehicles):
                self._refit_high(dataset, key, optimize_hyperparams, restarts)

    def _refit_high(self, dataset: Dataset, key, optimize_hyperparams: bool, restarts: int):
        if isinstance(key, tuple):
            X, y = dataset.pair_data(LEVEL_HIGH, key)
        else:
            X, y = dataset.vehicle_data(LEVEL_HIGH, key)
        n_dims = X.shape[1] if X.size else self.modules[(LEVEL_HIGH, key)].n_dims
        if len(y) < MIN_HIGH_RECORDS:
            self.modules[(LEVEL_HIGH, key)] = GpcModule.prior_only(n_dims)
            return
        low = self.modules[(LEVEL_LOW, key)]
        mu_low, _ = low.predict_latent(X)
        cov_low = low.posterior_cov(X, X)
        fits = {}
        for rho in RHO_GRID:
            module = GpcModule.fit(
                X, y, n_dims=n_dims, theta=low.theta, prior_mean=rho * mu_low,
                prior_cov_extra=rho**2 * cov_low, optimize_hyperparams=False,
            )
            fits[float(rho)] = module
        # the likelihood is weakly identified in |rho| when the levels agree
        # (sharper consistent latents always score at least as well), so among
        # grid points within one nat of the maximum take the smallest |rho|
        best_lml = max(m.log_marginal_likelihood for m in fits.values())
        candidates = [r for r, m in fits.items() if m.log_marginal_likelihood >= best_lml - 1.0]
        best_rho = min(candidates, key=lambda r: (abs(r), r))
        best_module = fits[best_rho]
        if optimize_hyperparams:
            best_module = GpcModule.fit(
                X, y, n_dims=n_dims, theta=best_module.theta, prior_mean=best_rho * mu_low,
                prior_cov_extra=best_rho**2 * cov_low, optimize_hyperparams=True, restarts=restarts,
            )
        self.rho[key] = best_rho
        self.modules[(LEVEL_HIGH, key)] = best_module

    def predict_level(self, key, X_star: np.ndarray, level: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Latent mean/stddev and class probability at the given fidelity.

        At the high level the autoregressive composition applies; with
        fewer than MIN_HIGH_RECORDS high-fidelity records the prediction
        falls back to the low-fidelity module.
        """
        low = self.modules[(LEVEL_LOW, key)]
        mu_l, sigma_l = low.predict_latent(X_star)
        if level == LEVEL_LOW:
            mu, sigma = mu_l, sigma_l
        else:
            high = self.modules.get((LEVEL_HIGH, key))
            if high is None or not high.informative:
                logger.debug("high-fidelity module %s sparse; falling back to low fidelity", key)
                mu, sigma = mu_l, sigma_l
            else:
                # latent at the high level is rho * f_low + delta; the prior
                # covariance through the training set carries rho^2 times the
                # low level's posterior covariance plus the delta kernel
                rho = self.rho.get(key, 0.0)
                X_star2 = np.atleast_2d(np.asarray(X_star, dtype=float))
                k_star = rho**2 * low.posterior_cov(high.X, X_star2) + se_kernel(high.X, X_star2, high.theta)
                k_ss = rho**2 * sigma_l**2 + np.exp(high.theta[0])
                mu_d, sigma_h = high.predict_with_kernel(k_star, k_ss)
                mu = rho * mu_l + mu_d
                sigma = sigma_h
        prob = ndtr(mu / np.sqrt(1.0 + sigma**2))
        return mu, sigma, prob

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "n_vehicles": self.n_vehicles,
            "n_segments": self.n_segments,
            "levels": list(self.levels),
            "cost_weights": {k: float(v) for k, v in self.cost_weights.items()},
            "rho": {str(k): float(v) for k, v in self.rho.items()},
            "modules": {
                f"{level}|{key}": module.to_dict() for (level, key), module in self.modules.items()
            },
        }


def predict_mf(surrogate: ModularSurrogate, key, X_star: np.ndarray, level: str = LEVEL_HIGH):
    """Multi-fidelity prediction for one module; see ModularSurrogate.predict_level."""
    return surrogate.predict_level(key, X_star, level)
