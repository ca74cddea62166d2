"""Reduced-order data-driven predictive controller and the dense convex QP
solver shared with the constraint guard.

The solver is an operator-splitting (ADMM) method over the canonical form

    min ½ x'Hx + f'x   s.t.   A_eq x = b_eq,  lb ≤ A_in x ≤ ub

with a single cached factorization per problem structure, over-relaxation,
a primal-infeasibility certificate, and an active-set polish step that
refines converged iterates to near machine precision. Only the linear data
(f, b_eq, boxes) may change between solves of one structure, which is what
a receding-horizon loop needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .errors import ConfigError, DimensionError
from .hankel import HankelSet

_RHO = 0.1          # base step for inequality rows
_RHO_EQ_SCALE = 1e3  # equality rows get a stiffer step
_SIGMA = 1e-6
_ALPHA = 1.6         # over-relaxation
_CHECK_EVERY = 10
_EPS_INF = 1e-6      # relative infeasibility-certificate threshold


class QpResult(NamedTuple):
    x: np.ndarray
    status: str                 # solved | max_iter | infeasible | diverged
    iterations: int
    primal_res: float
    dual_res: float
    dual: np.ndarray


@dataclass(frozen=True)
class QpProblem:
    """One dense convex QP in canonical form. Empty constraint blocks are
    allowed (pass None)."""

    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    lb_in: np.ndarray | None = None
    ub_in: np.ndarray | None = None

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        f = np.asarray(self.f, dtype=float)
        n = f.shape[0]
        if H.shape != (n, n):
            raise DimensionError(f"H is {H.shape}, f has {n} entries")
        if np.abs(H - H.T).max() > 1e-12:
            raise DimensionError("H is not symmetric to 1e-12")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "f", f)
        for mat, vecs in (("A_eq", ("b_eq",)), ("A_in", ("lb_in", "ub_in"))):
            A = getattr(self, mat)
            if A is None:
                if any(getattr(self, v) is not None for v in vecs):
                    raise DimensionError(f"{vecs} given without {mat}")
                continue
            A = np.atleast_2d(np.asarray(A, dtype=float))
            if A.shape[1] != n:
                raise DimensionError(f"{mat} has {A.shape[1]} columns, expected {n}")
            object.__setattr__(self, mat, A)
            for v in vecs:
                vec = getattr(self, v)
                if vec is None:
                    raise DimensionError(f"{mat} given without {v}")
                vec = np.asarray(vec, dtype=float)
                if vec.shape != (A.shape[0],):
                    raise DimensionError(f"{v} has shape {vec.shape}, expected ({A.shape[0]},)")
                object.__setattr__(self, v, vec)
        if self.A_in is not None and (self.lb_in > self.ub_in).any():
            raise DimensionError("inequality bounds have lb > ub")


class QpSolver:
    """Factor once, solve many: H, A_eq, A_in are fixed at construction."""

    def __init__(self, H, A_eq=None, A_in=None,
                 sigma: float = _SIGMA, rho: float = _RHO):
        self.H = np.asarray(H, dtype=float)
        self.n = self.H.shape[0]
        self.m_eq = 0 if A_eq is None else np.atleast_2d(A_eq).shape[0]
        blocks = []
        if A_eq is not None:
            blocks.append(np.atleast_2d(np.asarray(A_eq, dtype=float)))
        if A_in is not None:
            blocks.append(np.atleast_2d(np.asarray(A_in, dtype=float)))
        self.A = np.vstack(blocks) if blocks else np.zeros((0, self.n))
        self.m = self.A.shape[0]
        self.rho = np.full(self.m, rho)
        self.rho[: self.m_eq] *= _RHO_EQ_SCALE
        self._rho0 = self.rho.copy()
        self.sigma = sigma
        self._refactor()

    def _refactor(self) -> None:
        K = self.H + self.sigma * np.eye(self.n)
        if self.m:
            K = K + (self.A.T * self.rho) @ self.A
        self._chol = linalg.cho_factor(K)

    def solve(self, f, b_eq=None, lb_in=None, ub_in=None, tol: float = 1e-6,
              max_iter: int = 20000, warm=None, polish: bool = True) -> QpResult:
        f = np.asarray(f, dtype=float)
        low = np.empty(self.m)
        upp = np.empty(self.m)
        if self.m_eq:
            low[: self.m_eq] = upp[: self.m_eq] = np.asarray(b_eq, dtype=float)
        if self.m > self.m_eq:
            low[self.m_eq:] = -np.inf if lb_in is None else np.asarray(lb_in, dtype=float)
            upp[self.m_eq:] = np.inf if ub_in is None else np.asarray(ub_in, dtype=float)

        if warm is not None:
            x = warm[0].copy()
            y = warm[1].copy()
        else:
            x = np.zeros(self.n)
            y = np.zeros(self.m)
        z = np.clip(self.A @ x, low, upp)
        f_inf = float(np.abs(f).max()) if f.size else 0.0

        status = "max_iter"
        iters = max_iter
        r_prim = r_dual = np.inf
        eps_p = eps_d = tol
        y_prev = y.copy()
        adapt = True        # rho rescaling enabled until a restart
        next_adapt = 5 * _CHECK_EVERY   # doubles after each rescale so the
        restarted = False               # operator eventually stays put
        k = 0
        while k < max_iter:
            k += 1
            with np.errstate(over="ignore", invalid="ignore"):
                rhs = self.sigma * x - f + self.A.T @ (self.rho * z - y)
                try:
                    x_hat = linalg.cho_solve(self._chol, rhs)
                    blown = False
                except ValueError:
                    # overflow from a runaway iterate reached the rhs
                    blown = True
                if not blown:
                    x = _ALPHA * x_hat + (1 - _ALPHA) * x
                    Ax = self.A @ x_hat
                    relaxed = _ALPHA * Ax + (1 - _ALPHA) * z
                    z = np.clip(relaxed + y / self.rho, low, upp)
                    y = y + self.rho * (relaxed - z)

            if blown or k % _CHECK_EVERY == 0 or k == max_iter:
                if blown or not (np.isfinite(x).all() and np.isfinite(y).all()):
                    # a rho step made the factorization numerically useless;
                    # restart cold at the initial rho with adaptation off
                    if restarted:
                        return QpResult(np.zeros(self.n), "diverged", k,
                                        float("inf"), float("inf"),
                                        np.zeros(self.m))
                    restarted, adapt = True, False
                    self.rho = self._rho0.copy()
                    self._refactor()
                    x, y = np.zeros(self.n), np.zeros(self.m)
                    z = np.clip(self.A @ x, low, upp)
                    y_prev = y.copy()
                    continue
                Ax_cur = self.A @ x
                Hx = self.H @ x
                Aty = self.A.T @ y
                r_prim = float(np.abs(Ax_cur - z).max()) if self.m else 0.0
                r_dual = float(np.abs(Hx + f + Aty).max())
                # feasibility is absolute (that is the guarantee callers get);
                # stationarity scales with the data (floor at scale 1) since
                # it cannot be evaluated below the matvec rounding noise once
                # |Hx| or |f| is large
                scale_d = max(1.0, float(np.abs(Hx).max()),
                              float(np.abs(Aty).max()), f_inf)
                eps_p, eps_d = tol, tol * scale_d
                if r_prim < eps_p and r_dual < eps_d:
                    status, iters = "solved", k
                    break
                dy = y - y_prev
                if self._is_infeasibility_certificate(dy, low, upp):
                    return QpResult(x, "infeasible", k, r_prim, r_dual, y)
                y_prev = y.copy()
                # once the duals have identified the active set a direct KKT
                # solve can finish the job even though the first-order
                # iteration is still grinding down its residuals; rejected
                # attempts are cheap relative to thousands of iterations
                if polish and r_prim < 1e3 * eps_p and k % (10 * _CHECK_EVERY) == 0:
                    px, py, pr_p, pr_d, ok = self._polish(
                        x, y, f, low, upp, r_prim, r_dual)
                    if ok and pr_p < eps_p and pr_d < eps_d:
                        return QpResult(px, "solved", k, pr_p, pr_d, py)
                # step-size rescue: a large residual imbalance means rho is
                # badly scaled for this data (huge or tiny optimal duals).
                # Raw residuals, not normalized ones: without equilibration
                # the scale ratio would bias the trigger permanently.
                if adapt and k >= next_adapt:
                    next_adapt = 2 * k
                    ratio = (r_prim + 1e-30) / (r_dual + 1e-30)
                    if ratio > 1e2 or ratio < 1e-2:
                        scale = np.clip(np.sqrt(ratio), 1e-2, 1e2)
                        old_rho = self.rho
                        self.rho = np.clip(self.rho * scale, 1e-6, 1e6)
                        try:
                            self._refactor()
                        except np.linalg.LinAlgError:
                            # extreme rho can push K out of numerical positive
                            # definiteness; keep the old splitting instead
                            self.rho = old_rho
                            self._refactor()

        if polish:
            x, y, r_prim, r_dual, improved = self._polish(
                x, y, f, low, upp, r_prim, r_dual)
            if improved and r_prim < eps_p and r_dual < eps_d:
                status = "solved"
        return QpResult(x, status, iters, r_prim, r_dual, y)

    def _is_infeasibility_certificate(self, dy, low, upp) -> bool:
        norm = np.abs(dy).max() if dy.size else 0.0
        if norm < 1e-14:
            return False
        if np.abs(self.A.T @ dy).max() > _EPS_INF * norm:
            return False
        pos = np.maximum(dy, 0.0)
        neg = np.minimum(dy, 0.0)
        if np.any(np.isinf(upp[pos > 1e-14 * norm])):
            return False
        if np.any(np.isinf(low[neg < -1e-14 * norm])):
            return False
        support = upp[pos > 0] @ pos[pos > 0] + low[neg < 0] @ neg[neg < 0]
        return support < -_EPS_INF * norm

    def _polish(self, x, y, f, low, upp, r_prim, r_dual):
        """Direct solve of the KKT system on the active set read off the duals.

        Inactive inequality duals are exactly zero after an unclipped ADMM
        projection, so sign thresholds can be tight. The equality-pinned QP
        is solved by the nullspace method with a rank-revealing QR of the
        active rows, which tolerates both redundant active constraints and
        the near-flat curvature directions a tiny Tikhonov term leaves
        behind. The polished iterate is kept only if it is KKT-consistent
        (dual signs correct) and does not worsen either residual.
        """
        act = np.zeros(self.m, dtype=bool)
        act[: self.m_eq] = True
        y_in = y[self.m_eq:]
        act[self.m_eq:] = (y_in < -1e-12) | (y_in > 1e-12)
        bound = np.where(y >= 0, upp, low)
        act &= np.isfinite(bound)   # a one-sided row cannot pin to infinity
        A_act = self.A[act]
        k = A_act.shape[0]
        if k:
            x_p, *_ = np.linalg.lstsq(A_act, bound[act], rcond=None)
            Q, R = linalg.qr(A_act.T)  # full: columns of Q past rank span ker
            diag = np.abs(np.diag(R))
            rank = int((diag > diag.max() * max(A_act.shape) * 1e-14).sum()) if diag.size else 0
            Z = Q[:, rank:]
        else:
            x_p = np.zeros(self.n)
            Z = np.eye(self.n)
        if Z.shape[1]:
            M = Z.T @ self.H @ Z
            rhs = -Z.T @ (self.H @ x_p + f)
            try:
                cho = linalg.cho_factor(M)
                w = linalg.cho_solve(cho, rhs)
                # a couple of refinement sweeps recover the digits the
                # factorization loses when H is badly scaled
                for _ in range(2):
                    w = w + linalg.cho_solve(cho, rhs - M @ w)
            except (np.linalg.LinAlgError, ValueError):
                w, *_ = np.linalg.lstsq(M, rhs, rcond=None)
            x_new = x_p + Z @ w
        else:
            x_new = x_p
        y_new = np.zeros(self.m)
        if k:
            y_act, *_ = np.linalg.lstsq(A_act.T, -(self.H @ x_new + f), rcond=None)
            y_new[act] = y_act
        # dual sign consistency on the assumed active set
        sign_ok = True
        for i in np.flatnonzero(act[self.m_eq:]) + self.m_eq:
            if y[i] > 0 and y_new[i] < -1e-9:
                sign_ok = False
            if y[i] < 0 and y_new[i] > 1e-9:
                sign_ok = False
        Ax = self.A @ x_new
        viol = float(max(np.concatenate([[0.0], low - Ax, Ax - upp]).max(), 0.0)) \
            if self.m else 0.0
        r_d_new = float(np.abs(self.H @ x_new + f + self.A.T @ y_new).max())
        if sign_ok and viol <= max(r_prim, 1e-300) and r_d_new <= max(r_dual, 1e-300):
            return x_new, y_new, viol, r_d_new, True
        return x, y, r_prim, r_dual, False


def solve_qp(problem: QpProblem, tol: float = 1e-6,
             max_iter: int = 20000) -> QpResult:
    """One-shot interface over :class:`QpSolver`."""
    solver = QpSolver(problem.H, problem.A_eq, problem.A_in)
    return solver.solve(problem.f, problem.b_eq, problem.lb_in, problem.ub_in,
                        tol=tol, max_iter=max_iter)


@dataclass(frozen=True)
class DeePCConfig:
    """Weights, horizons, boxes, and solver knobs of the receding-horizon QP.

    q_weight / r_weight may be scalars (scalar times identity) or full
    diagonals of length n_y*N_p / n_u*N_p.
    """

    T: int
    T_ini: int
    N_p: int
    u_lb: np.ndarray
    u_ub: np.ndarray
    y_lb: np.ndarray
    y_ub: np.ndarray
    q_weight: float | np.ndarray = 5.0
    r_weight: float | np.ndarray = 1.0
    p_u: float = 10.0
    p_y: float = 10.0
    reg_eps: float = 1e-8
    qp_tol: float = 1e-6
    qp_max_iter: int = 20000

    def __post_init__(self):
        if self.T < self.T_ini + self.N_p:
            raise ConfigError(f"T={self.T} shorter than T_ini+N_p={self.T_ini + self.N_p}")
        if self.T_ini < 1 or self.N_p < 1:
            raise ConfigError("T_ini and N_p must be >= 1")
        for name in ("u_lb", "u_ub", "y_lb", "y_ub"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        if (self.u_lb >= self.u_ub).any() or (self.y_lb >= self.y_ub).any():
            raise ConfigError("box bounds must satisfy lb < ub componentwise")
        if self.u_lb.shape != self.u_ub.shape or self.y_lb.shape != self.y_ub.shape:
            raise ConfigError("box bound shapes disagree")
        for name in ("p_u", "p_y", "reg_eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if np.any(np.asarray(self.q_weight) < 0) or np.any(np.asarray(self.r_weight) < 0):
            raise ConfigError("q_weight and r_weight must be >= 0")
        if self.qp_tol <= 0 or self.qp_max_iter < 1:
            raise ConfigError("qp_tol must be > 0 and qp_max_iter >= 1")

    @property
    def n_u(self) -> int:
        return self.u_lb.shape[0]

    @property
    def n_y(self) -> int:
        return self.y_lb.shape[0]


def _diag(weight, size: int, name: str) -> np.ndarray:
    w = np.atleast_1d(np.asarray(weight, dtype=float))
    if w.size == 1:
        return np.full(size, float(w[0]))
    if w.shape != (size,):
        raise ConfigError(f"{name} must be scalar or length {size}, got shape {w.shape}")
    return w


class DeepcStepResult(NamedTuple):
    g: np.ndarray
    u_seq: np.ndarray
    y_pred: np.ndarray
    u_next: np.ndarray
    status: str
    iterations: int
    fallback: bool


class DeepcController:
    """Receding-horizon QP controller over one offline data record.

    All matrices and the solver factorization are built once; each step
    only rewrites the linear term and the equality right-hand side. If the
    step is infeasible (process noise can push the output box out of
    reach), the output box is re-solved as a soft quadratic penalty with
    weight 1e3 * p_y and the step is flagged.
    """

    def __init__(self, hankel: HankelSet, cfg: DeePCConfig):
        if (hankel.T, hankel.T_ini, hankel.N_p) != (cfg.T, cfg.T_ini, cfg.N_p):
            raise DimensionError(
                f"data record dims {(hankel.T, hankel.T_ini, hankel.N_p)} "
                f"do not match config {(cfg.T, cfg.T_ini, cfg.N_p)}")
        if hankel.n_u != cfg.n_u or hankel.n_y != cfg.n_y:
            raise DimensionError("channel counts of data record and config disagree")
        self.hankel = hankel
        self.cfg = cfg
        n = hankel.width
        q = _diag(cfg.q_weight, hankel.n_y * cfg.N_p, "q_weight")
        r = _diag(cfg.r_weight, hankel.n_u * cfg.N_p, "r_weight")
        self._q, self._r = q, r
        Yf, Uf = hankel.Y_f, hankel.U_f
        self.H = 2.0 * ((Yf.T * q) @ Yf + (Uf.T * r) @ Uf + cfg.reg_eps * np.eye(n))
        self.H = 0.5 * (self.H + self.H.T)
        self.A_eq = np.vstack([hankel.U_p, hankel.Y_p])
        self.A_in = np.vstack([Uf, Yf])
        self.u_box = (np.tile(cfg.u_lb, cfg.N_p), np.tile(cfg.u_ub, cfg.N_p))
        self.y_box = (np.tile(cfg.y_lb, cfg.N_p), np.tile(cfg.y_ub, cfg.N_p))
        self.lb = np.concatenate([self.u_box[0], self.y_box[0]])
        self.ub = np.concatenate([self.u_box[1], self.y_box[1]])
        self._solver = QpSolver(self.H, self.A_eq, self.A_in)
        self._soft: QpSolver | None = None
        self._warm = None
        self._warm_soft = None
        self.last_result: QpResult | None = None

    def _linear_term(self, u_ref_win, y_ref_win):
        return -2.0 * (self.hankel.Y_f.T @ (self._q * y_ref_win)
                       + self.hankel.U_f.T @ (self._r * u_ref_win))

    def step(self, ctx, u_ref_win, y_ref_win) -> DeepcStepResult:
        cfg = self.cfg
        u_ref_win = np.asarray(u_ref_win, dtype=float)
        y_ref_win = np.asarray(y_ref_win, dtype=float)
        nu, ny = cfg.n_u * cfg.N_p, cfg.n_y * cfg.N_p
        if u_ref_win.shape != (nu,) or y_ref_win.shape != (ny,):
            raise DimensionError(
                f"reference windows must be ({nu},) and ({ny},), "
                f"got {u_ref_win.shape} and {y_ref_win.shape}")
        u_ini = np.asarray(ctx.u_ini, dtype=float)
        y_ini = np.asarray(ctx.y_ini, dtype=float)
        b_eq = np.concatenate([u_ini, y_ini])
        f = self._linear_term(u_ref_win, y_ref_win)

        res = self._solver.solve(f, b_eq, self.lb, self.ub, tol=cfg.qp_tol,
                                 max_iter=cfg.qp_max_iter, warm=self._warm)
        fallback = False
        if res.status in ("infeasible", "diverged"):
            if res.status == "diverged":
                self._warm = None   # stale warm start is what blew up
            res = self._solve_soft(f, b_eq)
            fallback = True
        elif res.status == "solved":
            self._warm = (res.x, res.dual)
        self.last_result = res
        g = res.x[: self.hankel.width]
        u_seq = self.hankel.U_f @ g
        y_pred = self.hankel.Y_f @ g
        return DeepcStepResult(g, u_seq, y_pred, u_seq[: cfg.n_u],
                               res.status, res.iterations, fallback)

    def _solve_soft(self, f, b_eq) -> QpResult:
        """Re-solve with the output box as a quadratic slack penalty."""
        cfg = self.cfg
        n = self.hankel.width
        ny = cfg.n_y * cfg.N_p
        if self._soft is None:
            w = 1e3 * cfg.p_y
            H = np.zeros((n + ny, n + ny))
            H[:n, :n] = self.H
            H[n:, n:] = 2.0 * w * np.eye(ny)
            A_eq = np.hstack([self.A_eq, np.zeros((self.A_eq.shape[0], ny))])
            Uf = np.hstack([self.hankel.U_f, np.zeros((cfg.n_u * cfg.N_p, ny))])
            Yf_up = np.hstack([self.hankel.Y_f, -np.eye(ny)])   # Yf g - s <= ub
            Yf_lo = np.hstack([self.hankel.Y_f, np.eye(ny)])    # Yf g + s >= lb
            slack = np.hstack([np.zeros((ny, n)), np.eye(ny)])  # s >= 0
            A_in = np.vstack([Uf, Yf_up, Yf_lo, slack])
            self._soft = QpSolver(H, A_eq, A_in)
            inf = np.full(ny, np.inf)
            self._soft_lb = np.concatenate([self.u_box[0], -inf, self.y_box[0], np.zeros(ny)])
            self._soft_ub = np.concatenate([self.u_box[1], self.y_box[1], inf, inf])
        f_soft = np.concatenate([f, np.zeros(ny)])
        res = self._soft.solve(f_soft, b_eq, self._soft_lb, self._soft_ub,
                               tol=cfg.qp_tol, max_iter=cfg.qp_max_iter,
                               warm=self._warm_soft)
        if res.status == "solved":
            self._warm_soft = (res.x, res.dual)
        elif res.status == "diverged":
            self._warm_soft = None
        return res


def deepc_step(hankel: HankelSet, cfg: DeePCConfig, ctx, u_ref_win,
               y_ref_win) -> DeepcStepResult:
    """Single uncached solve; loops should hold a DeepcController instead."""
    return DeepcController(hankel, cfg).step(ctx, u_ref_win, y_ref_win)
