"""Piecewise-polynomial quadratic programming core.

Assembles and solves the QPs behind smooth trajectory generation: a
piecewise monomial basis per segment, exact Gram matrices for squared
derivative costs, equality constraints (boundary conditions, interior
continuity, pinned waypoints) and linear inequality rows enforced at
collocation points through a small active-set loop.

Internally each segment uses the nondimensional coordinate s = tau/dt
(tau local segment time) for conditioning; solutions are returned as
plain monomial coefficients in local segment time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import perm

import numpy as np


class QpInfeasibleError(RuntimeError):
    """Constraint set admits no solution (e.g. corridor too tight)."""


class QpConditioningError(RuntimeError):
    """KKT system remained singular beyond regularization."""


def basis_row(order: int, deriv: int, s: float, dt: float) -> np.ndarray:
    """Row r with r @ c = d^deriv/dtau^deriv sum_k c_k (tau/dt)^k at tau = s*dt."""
    row = np.zeros(order + 1)
    for k in range(deriv, order + 1):
        row[k] = perm(k, deriv) * s ** (k - deriv) / dt**deriv
    return row


def gram_matrix(order: int, deriv: int, dt: float) -> np.ndarray:
    """G with c^T G c = integral over [0, dt] of the squared deriv-th derivative.

    Coefficients c are in the scaled basis (tau/dt)^k, so G carries the
    dt**(1 - 2*deriv) time-scaling factor explicitly.
    """
    n = order + 1
    G = np.zeros((n, n))
    for i in range(deriv, n):
        for j in range(deriv, n):
            G[i, j] = perm(i, deriv) * perm(j, deriv) / (i + j - 2 * deriv + 1)
    return G * dt ** (1 - 2 * deriv)


def gram_matrix_local(order: int, deriv: int, dt: float) -> np.ndarray:
    """Same integral as :func:`gram_matrix` but for plain tau^k coefficients."""
    n = order + 1
    G = np.zeros((n, n))
    for i in range(deriv, n):
        for j in range(deriv, n):
            p = i + j - 2 * deriv + 1
            G[i, j] = perm(i, deriv) * perm(j, deriv) * dt**p / p
    return G


def chebyshev_lobatto(n: int) -> np.ndarray:
    """n Chebyshev-Lobatto nodes on [0, 1], endpoints included."""
    return 0.5 * (1.0 - np.cos(np.pi * np.arange(n) / (n - 1)))


def scaled_to_local(coeffs: np.ndarray, dt: float, order: int) -> np.ndarray:
    """Convert coefficients of (tau/dt)^k to coefficients of tau^k."""
    powers = dt ** np.arange(order + 1)
    return coeffs / powers


def _eqp_direction(Hn: np.ndarray, C: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Direction p minimizing 0.5 (c+p)^T Hn (c+p) with C p = 0, plus multipliers.

    Solved through the KKT system with a null-space (SVD) fallback when
    working-set rows are linearly dependent.
    """
    n = Hn.shape[0]
    k = C.shape[0]
    if k == 0:
        try:
            p = np.linalg.solve(Hn, -Hn @ c)
        except np.linalg.LinAlgError as exc:
            raise QpConditioningError("Hessian singular beyond regularization") from exc
        return p, np.zeros(0)
    KKT = np.zeros((n + k, n + k))
    KKT[:n, :n] = Hn
    KKT[:n, n:] = C.T
    KKT[n:, :n] = C
    rhs = np.concatenate([-Hn @ c, np.zeros(k)])
    try:
        sol = np.linalg.solve(KKT, rhs)
        if not np.all(np.isfinite(sol)) or np.max(np.abs(C @ sol[:n])) > 1e-7:
            raise np.linalg.LinAlgError
        return sol[:n], sol[n:]
    except np.linalg.LinAlgError:
        pass
    _, sv, Vt = np.linalg.svd(C, full_matrices=True)
    rank = int(np.sum(sv > sv[0] * 1e-12)) if sv.size else 0
    Z = Vt[rank:].T
    if Z.shape[1] == 0:
        p = np.zeros(n)
    else:
        try:
            y = np.linalg.solve(Z.T @ Hn @ Z, -Z.T @ (Hn @ c))
        except np.linalg.LinAlgError as exc:
            raise QpConditioningError("reduced Hessian singular beyond regularization") from exc
        p = Z @ y
    lam, *_ = np.linalg.lstsq(C.T, -Hn @ (c + p), rcond=None)
    if not np.all(np.isfinite(p)):
        raise QpConditioningError("EQP solve produced non-finite values")
    return p, lam


def _phase_one(E: np.ndarray, e: np.ndarray, W: np.ndarray, w: np.ndarray, feas_tol: float) -> np.ndarray:
    """Feasible point via the slack LP min 1^T s, E c = e, W c - s <= w, s >= 0."""
    from scipy.optimize import linprog

    n = E.shape[1]
    k = W.shape[0]
    cost = np.concatenate([np.zeros(n), np.ones(k)])
    A_ub = np.hstack([W, -np.eye(k)])
    A_eq = np.hstack([E, np.zeros((E.shape[0], k))]) if E.shape[0] else None
    bounds = [(None, None)] * n + [(0, None)] * k
    res = linprog(cost, A_ub=A_ub, b_ub=w, A_eq=A_eq, b_eq=e if E.shape[0] else None, bounds=bounds, method="highs")
    if not res.success or res.fun > max(1e-6, feas_tol * k):
        raise QpInfeasibleError("no point satisfies the constraint set (corridor too tight)")
    return res.x[:n]


def solve_active_set(
    H: np.ndarray,
    E: np.ndarray,
    e: np.ndarray,
    W: np.ndarray | None = None,
    w: np.ndarray | None = None,
    tikhonov: float = 1e-10,
    feas_tol: float = 1e-8,
    max_iter: int = 400,
) -> np.ndarray:
    """Minimize 0.5 c^T H c subject to E c = e and W c <= w.

    Primal active-set iteration: equality-constrained KKT solves give a
    step direction, the step is clipped at the first blocking collocation
    constraint (which joins the working set), and working-set rows with
    negative multipliers are released. Infeasible instances are detected
    by a phase-one slack LP.

    The cost matrix is normalized and Tikhonov-regularized (1e-10)
    internally; the regularization perturbs the optimum by O(1e-10)
    relative, which callers must fold into optimality tolerances.

    Raises
    ------
    QpInfeasibleError
        If no point satisfies the constraints within `feas_tol`.
    QpConditioningError
        If the KKT systems are singular beyond regularization.
    """
    n = H.shape[0]
    scale = max(np.abs(H).max(), 1.0)
    Hn = H / scale + tikhonov * np.eye(n)
    if W is None:
        W = np.zeros((0, n))
        w = np.zeros(0)

    # Equality-only solve first; returns immediately when no collocation
    # constraint is violated (the common case).
    cp = np.linalg.lstsq(E, e, rcond=None)[0] if E.shape[0] else np.zeros(n)
    if E.shape[0] and np.max(np.abs(E @ cp - e)) > 1e-6:
        raise QpInfeasibleError("equality constraints are inconsistent")
    c = cp + _eqp_direction(Hn, E, cp)[0]
    if W.shape[0] == 0 or np.max(W @ c - w) <= feas_tol:
        return c

    c = _phase_one(E, e, W, w, feas_tol)
    active: list[int] = []
    for _ in range(max_iter):
        C = np.vstack([E, W[active]])
        p, lam = _eqp_direction(Hn, C, c)
        # termination threshold sits above the KKT solve noise floor
        if np.max(np.abs(p)) < 1e-7 * max(1.0, np.max(np.abs(c))):
            mult = lam[E.shape[0] :]
            if len(active) and mult.size and mult.min() < -1e-9:
                active.pop(int(np.argmin(mult)))
                continue
            return c
        # largest step along p keeping all inactive rows feasible
        alpha = 1.0
        blocking = -1
        Wp = W @ p
        gap = w - W @ c
        for i in np.flatnonzero(Wp > 1e-12):
            if i in active:
                continue
            ai = max(gap[i], 0.0) / Wp[i]
            if ai < alpha:
                alpha = ai
                blocking = int(i)
        c = c + alpha * p
        if blocking >= 0:
            active.append(blocking)
    raise QpConditioningError("active-set iteration failed to converge")


@dataclass
class PiecewisePoly:
    """Piecewise polynomial with one or more channels.

    coeffs[j, k, ch] is the tau^k coefficient of channel ch on segment j,
    tau measured from the segment start. Knots are cumulative times.
    """

    coeffs: np.ndarray
    knots: np.ndarray

    @property
    def n_segments(self) -> int:
        return self.coeffs.shape[0]

    @property
    def order(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def n_channels(self) -> int:
        return self.coeffs.shape[2]

    @property
    def duration(self) -> float:
        return float(self.knots[-1])

    def eval(self, ts: np.ndarray | float, deriv: int = 0) -> np.ndarray:
        """Evaluate the deriv-th time derivative at times ts, shape (len(ts), n_channels)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if ts.min(initial=np.inf) < -1e-9 or ts.max(initial=-np.inf) > self.duration + 1e-9:
            raise ValueError("evaluation time outside trajectory domain")
        ts = np.clip(ts, 0.0, self.duration)
        seg = np.clip(np.searchsorted(self.knots, ts, side="right") - 1, 0, self.n_segments - 1)
        tau = ts - self.knots[seg]
        out = np.zeros((len(ts), self.n_channels))
        dcoef = np.array([perm(k, deriv) for k in range(self.order + 1)], dtype=float)
        for j in np.unique(seg):
            mask = seg == j
            tj = tau[mask]
            powers = tj[:, None] ** np.arange(self.order + 1)[None, :]
            for ch in range(self.n_channels):
                shifted = np.zeros(self.order + 1)
                shifted[: self.order + 1 - deriv] = (dcoef * self.coeffs[j, :, ch])[deriv:]
                out[mask, ch] = powers[:, : self.order + 1] @ shifted
        return out

    def eval_held(self, ts: np.ndarray | float) -> np.ndarray:
        """Positions with hold-at-end semantics for times past the final knot."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        return self.eval(np.clip(ts, 0.0, self.duration), deriv=0)


@dataclass
class PolyQP:
    """Builder for a multi-channel piecewise-polynomial QP."""

    durations: np.ndarray
    n_channels: int
    order: int = 7

    _eq_rows: list[np.ndarray] = field(default_factory=list)
    _eq_rhs: list[float] = field(default_factory=list)
    _ineq_rows: list[np.ndarray] = field(default_factory=list)
    _ineq_rhs: list[float] = field(default_factory=list)
    _cost: np.ndarray | None = None

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=float)
        if np.any(self.durations <= 0):
            raise ValueError("segment durations must be strictly positive")
        self.n_seg = len(self.durations)
        self.nc = self.order + 1
        self.n_vars = self.n_channels * self.n_seg * self.nc

    def _slice(self, seg: int, channel: int) -> slice:
        start = (channel * self.n_seg + seg) * self.nc
        return slice(start, start + self.nc)

    def _point_row(self, seg: int, s: float, deriv: int, channel: int) -> np.ndarray:
        row = np.zeros(self.n_vars)
        row[self._slice(seg, channel)] = basis_row(self.order, deriv, s, self.durations[seg])
        return row

    def add_point_eq(self, seg: int, s: float, deriv: int, channel: int, value: float):
        self._eq_rows.append(self._point_row(seg, s, deriv, channel))
        self._eq_rhs.append(value)

    def add_continuity(self, channel: int, up_to_deriv: int):
        """C^k continuity for one channel at every interior knot."""
        for j in range(self.n_seg - 1):
            for d in range(up_to_deriv + 1):
                row = self._point_row(j, 1.0, d, channel)
                row -= self._point_row(j + 1, 0.0, d, channel)
                self._eq_rows.append(row)
                self._eq_rhs.append(0.0)

    def add_combination_ineq(self, seg: int, s: float, channel_coeffs: np.ndarray, rhs: float):
        """sum_ch channel_coeffs[ch] * p_ch(t) <= rhs at the given collocation point."""
        row = np.zeros(self.n_vars)
        for ch, a in enumerate(channel_coeffs):
            if a != 0.0:
                row[self._slice(seg, ch)] = a * basis_row(self.order, 0, s, self.durations[seg])
        self._ineq_rows.append(row)
        self._ineq_rhs.append(rhs)

    def set_cost(self, channel_derivs: dict[int, tuple[int, float]]):
        """Quadratic cost sum over channels of weight * integral (d^r p / dt^r)^2."""
        H = np.zeros((self.n_vars, self.n_vars))
        for ch, (deriv, weight) in channel_derivs.items():
            if weight == 0.0:
                continue
            for j in range(self.n_seg):
                sl = self._slice(j, ch)
                H[sl, sl] += weight * gram_matrix(self.order, deriv, self.durations[j])
        self._cost = H

    def solve(self, **kwargs) -> PiecewisePoly:
        if self._cost is None:
            raise RuntimeError("cost not set")
        E = np.array(self._eq_rows) if self._eq_rows else np.zeros((0, self.n_vars))
        e = np.array(self._eq_rhs)
        W = np.array(self._ineq_rows) if self._ineq_rows else None
        w = np.array(self._ineq_rhs) if self._ineq_rows else None
        c = solve_active_set(self._cost, E, e, W, w, **kwargs)
        coeffs = np.zeros((self.n_seg, self.nc, self.n_channels))
        for ch in range(self.n_channels):
            for j in range(self.n_seg):
                scaled = c[self._slice(j, ch)]
                coeffs[j, :, ch] = scaled_to_local(scaled, self.durations[j], self.order)
        knots = np.concatenate([[0.0], np.cumsum(self.durations)])
        return PiecewisePoly(coeffs=coeffs, knots=knots)
