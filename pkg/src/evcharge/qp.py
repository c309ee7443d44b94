"""Convex QP via a primal-dual interior-point method.

Solves

    minimize    1/2 x'Bx + c'x
    subject to  0 <= x <= upper      (upper optional, may contain inf)
                A x = b              (optional)

with Mehrotra predictor-corrector steps. The Hessian is either a dense
PSD matrix or an :class:`AggregateHessian` (``B = 2 S'S`` with ``S`` a
0/1 grouping matrix), which is what the fleet valley-filling problem
produces and lets each Newton solve run in O(n) via Woodbury.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import DimensionMismatch, NotSymmetric, NumericalBreakdown

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
NEWTON_REG = 1e-10
STEP_TO_BOUNDARY = 0.995
PSD_TOL = 1e-9


class DenseHessian:
    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=float)
        self.n = self.matrix.shape[0]

    def matvec(self, x):
        return self.matrix @ x

    def factor(self, diag):
        reg = NEWTON_REG
        for _ in range(6):
            k = self.matrix + np.diag(diag + reg)
            try:
                cf = scipy.linalg.cho_factor(k, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                reg *= 100.0
                continue
            return lambda rhs: scipy.linalg.cho_solve(cf, rhs, check_finite=False)
        raise NumericalBreakdown("Newton matrix is not positive definite after regularization")

    def to_dense(self):
        return self.matrix


class AggregateHessian:
    """``B = 2 S'S`` where ``S[g, j] = 1`` iff variable ``j`` is in group ``g``.

    ``1/2 x'Bx = sum_g (sum_{j in g} x_j)^2``.
    """

    def __init__(self, groups, n_groups):
        self.groups = np.asarray(groups, dtype=np.intp)
        self.n = self.groups.shape[0]
        self.n_groups = int(n_groups)
        self._s = scipy.sparse.csr_matrix(
            (np.ones(self.n), (self.groups, np.arange(self.n))), shape=(self.n_groups, self.n)
        )

    def aggregate(self, x):
        return self._s @ x

    def matvec(self, x):
        return 2.0 * self.aggregate(x)[self.groups]

    def factor(self, diag):
        dinv = 1.0 / (diag + NEWTON_REG)
        if not np.all(np.isfinite(dinv)):
            raise NumericalBreakdown("non-finite barrier diagonal")
        cap = 0.5 + np.bincount(self.groups, weights=dinv, minlength=self.n_groups)

        def solve(rhs):
            y = dinv * rhs if rhs.ndim == 1 else dinv[:, None] * rhs
            agg = self._s @ y
            corr = agg / cap if rhs.ndim == 1 else agg / cap[:, None]
            back = corr[self.groups]
            return y - (dinv * back if rhs.ndim == 1 else dinv[:, None] * back)

        return solve

    def to_dense(self):
        s = self._s.toarray()
        return 2.0 * s.T @ s


def _as_hessian(quadratic):
    if isinstance(quadratic, (DenseHessian, AggregateHessian)):
        return quadratic
    return DenseHessian(quadratic)


@dataclass(frozen=True, eq=False)
class QpProblem:
    """``min 1/2 x'Bx + c'x`` over ``x >= 0`` (plus optional bounds/equalities).

    ``offset`` is a constant carried along so that ``objective + offset``
    reproduces the original least-squares value.
    """

    quadratic: object
    linear: np.ndarray
    upper: np.ndarray | None = None
    eq_matrix: np.ndarray | None = None
    eq_rhs: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        hess = self.quadratic
        if not isinstance(hess, (DenseHessian, AggregateHessian)):
            hess = np.asarray(hess, dtype=float)
            if hess.ndim != 2 or hess.shape[0] != hess.shape[1]:
                raise DimensionMismatch(f"quadratic term must be square, got {hess.shape}")
            _check_symmetric(hess)
        c = np.asarray(self.linear, dtype=float).reshape(-1)
        n = hess.n if hasattr(hess, "n") else hess.shape[0]
        if c.shape[0] != n:
            raise DimensionMismatch(f"linear term has length {c.shape[0]}, expected {n}")
        object.__setattr__(self, "quadratic", hess)
        object.__setattr__(self, "linear", c)
        if self.upper is not None:
            u = np.asarray(self.upper, dtype=float).reshape(-1)
            if u.shape[0] != n or np.any(u <= 0):
                raise DimensionMismatch("upper bounds must be positive with one entry per variable")
            object.__setattr__(self, "upper", u)
        if (self.eq_matrix is None) != (self.eq_rhs is None):
            raise DimensionMismatch("eq_matrix and eq_rhs must be given together")
        if self.eq_matrix is not None:
            a = np.atleast_2d(np.asarray(self.eq_matrix, dtype=float))
            b = np.asarray(self.eq_rhs, dtype=float).reshape(-1)
            if a.shape != (b.shape[0], n):
                raise DimensionMismatch(f"eq_matrix shape {a.shape} incompatible with {b.shape[0]} rows, {n} vars")
            object.__setattr__(self, "eq_matrix", a)
            object.__setattr__(self, "eq_rhs", b)

    @property
    def n(self):
        return self.linear.shape[0]

    def objective(self, x):
        hess = _as_hessian(self.quadratic)
        return float(0.5 * x @ hess.matvec(x) + self.linear @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool = True
    status: str = "optimal"
    primal_residual: float = 0.0
    dual_residual: float = 0.0
    gap: float = 0.0
    gap_history: list = field(default_factory=list)


def _check_symmetric(b):
    scale = max(1.0, float(np.abs(b).max())) if b.size else 1.0
    if not np.allclose(b, b.T, rtol=0.0, atol=1e-12 * scale):
        raise NotSymmetric("matrix is not symmetric")


def verify_psd(b) -> bool:
    """True iff the symmetric matrix ``b`` has no eigenvalue below -1e-9."""
    b = np.asarray(b, dtype=float)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {b.shape}")
    _check_symmetric(b)
    if b.size == 0:
        return True
    return bool(np.linalg.eigvalsh(0.5 * (b + b.T)).min() >= -PSD_TOL)


def build_qp(gamma, p_cha) -> QpProblem:
    """Expand ``||p - G x||^2`` into ``1/2 x'Bx + c'x + ||p||^2``."""
    g = np.asarray(gamma, dtype=float)
    p = np.asarray(getattr(p_cha, "p_cha", p_cha), dtype=float).reshape(-1)
    if g.ndim != 2 or g.shape[0] != p.shape[0]:
        raise DimensionMismatch(f"gamma {g.shape} incompatible with probability vector of length {p.shape[0]}")
    b = 2.0 * g.T @ g
    c = -2.0 * g.T @ p
    return QpProblem(b, c, offset=float(p @ p))


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _natural_residual(B, c, x):
    return float(np.abs(np.minimum(x, B @ x + c)).max(initial=0.0))


def _polish(B, c, x, z, tol):
    """Re-solve on the free set guessed from the final iterate.

    Returns ``(x, kkt, dual_residual, gap)`` when the guess gives a
    feasible point whose natural residual ``|min(x, grad)|`` is within
    ``tol`` and no worse than the iterate's, else None.
    """
    free = np.flatnonzero(x > z)
    x_new = np.zeros_like(x)
    if free.size:
        sol, *_ = np.linalg.lstsq(B[np.ix_(free, free)], -c[free], rcond=None)
        x_new[free] = sol
    if np.any(x_new < 0):
        return None
    kkt = _natural_residual(B, c, x_new)
    if kkt > tol or kkt > max(_natural_residual(B, c, x), 1e-14):
        return None
    grad = B @ x_new + c
    d_inf = float(max(np.abs(grad[free]).max(initial=0.0), np.maximum(-grad, 0.0).max(initial=0.0)))
    return x_new, kkt, d_inf, float(abs(x_new @ grad))


def solve_pdipm(problem: QpProblem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> QpSolution:
    """Primal-dual interior point with Mehrotra predictor-corrector.

    Convergence requires the stationarity residual, the primal residual and
    the total complementarity gap to all be at most ``tol``. When the
    iteration cap is hit the best iterate is returned with
    ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    hess = _as_hessian(problem.quadratic)
    c = problem.linear
    n = problem.n
    A, b = problem.eq_matrix, problem.eq_rhs
    has_eq = A is not None and A.shape[0] > 0
    upper = problem.upper
    ub_idx = np.flatnonzero(np.isfinite(upper)) if upper is not None else np.zeros(0, dtype=np.intp)
    u = upper[ub_idx] if upper is not None else np.zeros(0)
    n_comp = n + ub_idx.size

    z_scale = max(1.0, float(np.abs(c).max()) if n else 1.0)
    x = np.ones(n)
    if ub_idx.size:
        x[ub_idx] = np.minimum(1.0, 0.5 * u)
    w = u - x[ub_idx]
    z = np.full(n, z_scale)
    v = np.full(ub_idx.size, z_scale)
    y = np.zeros(A.shape[0]) if has_eq else np.zeros(0)

    def residuals(x, z, w, v, y):
        rd = hess.matvec(x) + c - z
        if ub_idx.size:
            rd[ub_idx] += v
        if has_eq:
            rd -= A.T @ y
            rp = b - A @ x
        else:
            rp = np.zeros(0)
        ru = u - x[ub_idx] - w
        return rd, rp, ru

    def gap_of(x, z, w, v):
        return float(x @ z + w @ v)

    history = []
    best = None
    it = 0
    status = "max_iterations"
    converged = False
    for it in range(max_iter + 1):
        rd, rp, ru = residuals(x, z, w, v, y)
        gap = gap_of(x, z, w, v)
        history.append(gap)
        p_inf = max(np.abs(rp).max(initial=0.0), np.abs(ru).max(initial=0.0))
        d_inf = np.abs(rd).max(initial=0.0)
        kkt = max(p_inf, d_inf, gap)
        if not np.isfinite(kkt):
            raise NumericalBreakdown("non-finite iterate")
        if best is None or kkt < best[0]:
            best = (kkt, x.copy(), p_inf, d_inf, gap)
        if kkt <= tol:
            converged = True
            status = "optimal"
            break
        if it == max_iter:
            break
        mu = gap / n_comp

        d = z / x
        if ub_idx.size:
            np.add.at(d, ub_idx, v / w)
        solve = hess.factor(d)
        if has_eq:
            kinv_at = solve(A.T)
            schur = A @ kinv_at
            try:
                schur_cf = scipy.linalg.cho_factor(
                    schur + NEWTON_REG * np.eye(schur.shape[0]), lower=True, check_finite=False
                )
            except np.linalg.LinAlgError:
                raise NumericalBreakdown("equality Schur complement is singular") from None

        def direction(r_xz, r_wv):
            g = -rd + r_xz / x
            if ub_idx.size:
                g[ub_idx] -= (r_wv - v * ru) / w
            kg = solve(g)
            if has_eq:
                dy = scipy.linalg.cho_solve(schur_cf, rp - A @ kg, check_finite=False)
                dx = kg + kinv_at @ dy
            else:
                dy = np.zeros(0)
                dx = kg
            dz = (r_xz - z * dx) / x
            dw = ru - dx[ub_idx]
            dv = (r_wv - v * dw) / w if ub_idx.size else np.zeros(0)
            return dx, dz, dw, dv, dy

        def step_length(dx, dz, dw, dv):
            a_p = min(_max_step(x, dx), _max_step(w, dw))
            a_d = min(_max_step(z, dz), _max_step(v, dv))
            return min(1.0, STEP_TO_BOUNDARY * min(a_p, a_d))

        # predictor
        dx, dz, dw, dv, dy = direction(-x * z, -w * v)
        if not np.all(np.isfinite(dx)):
            raise NumericalBreakdown("non-finite Newton direction")
        a_aff = step_length(dx, dz, dw, dv)
        gap_aff = gap_of(x + a_aff * dx, z + a_aff * dz, w + a_aff * dw, v + a_aff * dv)
        sigma = min(1.0, (gap_aff / gap) ** 3) if gap > 0 else 0.0
        # corrector
        dx, dz, dw, dv, dy = direction(sigma * mu - x * z - dx * dz, sigma * mu - w * v - dw * dv)
        alpha = step_length(dx, dz, dw, dv)
        if gap_of(x + alpha * dx, z + alpha * dz, w + alpha * dw, v + alpha * dv) > gap:
            # safeguarded centering step: the gap is a descent function along it
            dx, dz, dw, dv, dy = direction(0.5 * mu - x * z, 0.5 * mu - w * v)
            alpha = step_length(dx, dz, dw, dv)
            for _ in range(60):
                if gap_of(x + alpha * dx, z + alpha * dz, w + alpha * dw, v + alpha * dv) <= gap:
                    break
                alpha *= 0.5
        x = x + alpha * dx
        z = z + alpha * dz
        w = w + alpha * dw
        v = v + alpha * dv
        y = y + alpha * dy

    kkt, x_best, p_inf, d_inf, gap = best
    if converged:
        x_best = x
    x_out = np.maximum(x_best, 0.0)
    if converged and upper is None and not has_eq and isinstance(hess, DenseHessian):
        polished = _polish(hess.matrix, c, x_out, z, tol)
        if polished is not None:
            x_out, kkt, d_inf, gap = polished
    return QpSolution(
        x=x_out,
        objective=problem.objective(x_out),
        iterations=it,
        kkt_residual=float(kkt),
        converged=converged,
        status=status,
        primal_residual=float(p_inf),
        dual_residual=float(d_inf),
        gap=float(gap),
        gap_history=history,
    )
