"""Event-based constraint handling for the learned operator.

The operator network knows nothing about the boxes at inference time, so
each emitted g is screened: if the planned inputs/outputs it implies stay
inside the boxes, it is used as-is; otherwise g is replaced by its nearest
box-feasible point (a small strictly convex QP). Projection deliberately
re-imposes only the boxes; whatever initial-window consistency g carried is
not re-enforced, and its drift after projection is logged as a diagnostic.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .deepc import DeePCConfig, QpSolver
from .errors import ConvergenceError, DimensionError
from .hankel import HankelSet

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9


def _boxes(hankel: HankelSet, cfg: DeePCConfig):
    lb = np.concatenate([np.tile(cfg.u_lb, cfg.N_p), np.tile(cfg.y_lb, cfg.N_p)])
    ub = np.concatenate([np.tile(cfg.u_ub, cfg.N_p), np.tile(cfg.y_ub, cfg.N_p)])
    return np.vstack([hankel.U_f, hankel.Y_f]), lb, ub


def violates(hankel: HankelSet, g_hat: np.ndarray, cfg: DeePCConfig,
             feas_tol: float = FEAS_TOL) -> bool:
    """True iff the planned window leaves a box by more than feas_tol."""
    g_hat = np.asarray(g_hat, dtype=float)
    if g_hat.shape != (hankel.width,):
        raise DimensionError(f"operator has shape {g_hat.shape}, expected ({hankel.width},)")
    A, lb, ub = _boxes(hankel, cfg)
    w = A @ g_hat
    return bool((w < lb - feas_tol).any() or (w > ub + feas_tol).any())


class ConstraintGuard:
    """Screen-and-project wrapper with a cached projection solver."""

    def __init__(self, hankel: HankelSet, cfg: DeePCConfig):
        self.hankel = hankel
        self.cfg = cfg
        self.A, self.lb, self.ub = _boxes(hankel, cfg)
        n = hankel.width
        self._solver = QpSolver(2.0 * np.eye(n), None, self.A)
        self._warm = None
        self.events = 0
        self.last_drift: float | None = None

    def project(self, g_hat: np.ndarray) -> np.ndarray:
        """Nearest g (Euclidean) whose planned window satisfies the boxes."""
        g_hat = np.asarray(g_hat, dtype=float)
        if g_hat.shape != (self.hankel.width,):
            raise DimensionError(
                f"operator has shape {g_hat.shape}, expected ({self.hankel.width},)")
        res = self._solver.solve(-2.0 * g_hat, None, self.lb, self.ub,
                                 tol=self.cfg.qp_tol, max_iter=self.cfg.qp_max_iter,
                                 warm=self._warm)
        if res.status == "infeasible":
            raise ConvergenceError("projection boxes admit no feasible plan",
                                   residual=res.primal_res)
        if res.status != "solved":
            raise ConvergenceError("projection did not converge",
                                   residual=max(res.primal_res, res.dual_res))
        self._warm = (res.x, res.dual)
        return res.x

    def guarded(self, g_hat: np.ndarray, ctx=None) -> tuple[np.ndarray, bool]:
        """Eq.-style dispatch: returns (g, event). Projects only on violation.

        When ctx (with u_ini/y_ini) is given, the post-projection drift of
        the initial-window consistency is logged as a diagnostic.
        """
        if not violates(self.hankel, g_hat, self.cfg):
            self.last_drift = None
            return np.asarray(g_hat, dtype=float), False
        g_star = self.project(g_hat)
        self.events += 1
        if ctx is not None:
            drift = max(
                float(np.abs(self.hankel.U_p @ g_star - np.asarray(ctx.u_ini)).max()),
                float(np.abs(self.hankel.Y_p @ g_star - np.asarray(ctx.y_ini)).max()),
            )
            self.last_drift = drift
            logger.debug("projection consistency drift %.3e", drift)
        return g_star, True


def project(hankel: HankelSet, g_hat: np.ndarray, cfg: DeePCConfig) -> np.ndarray:
    """One-shot projection; loops should hold a ConstraintGuard instead."""
    return ConstraintGuard(hankel, cfg).project(g_hat)


class GuardedPlan(NamedTuple):
    u_seq: np.ndarray
    y_pred: np.ndarray
    event: bool
    g: np.ndarray


def guarded_control(net, hankel: HankelSet, cfg: DeePCConfig, ctx,
                    guard: ConstraintGuard | None = None) -> GuardedPlan:
    """Full inference path: context -> operator -> screen/project -> plan."""
    from .operator_net import build_context  # local import breaks a cycle

    from .dataset import TrainingSample
    if isinstance(ctx, TrainingSample):
        sample = ctx
    else:
        sample = TrainingSample(
            u_ini=np.asarray(ctx.u_ini, dtype=float),
            y_ini=np.asarray(ctx.y_ini, dtype=float),
            e_u=np.asarray(getattr(ctx, "e_u", np.zeros(cfg.n_u)), dtype=float),
            e_y=np.asarray(getattr(ctx, "e_y", np.zeros(cfg.n_y)), dtype=float),
            u_ref=np.zeros(cfg.n_u * cfg.N_p),
            y_ref=np.zeros(cfg.n_y * cfg.N_p),
        )
    g_hat = net.forward(build_context(sample, net.variant))
    if guard is None:
        guard = ConstraintGuard(hankel, cfg)
    g, event = guard.guarded(g_hat, ctx=sample)
    return GuardedPlan(hankel.U_f @ g, hankel.Y_f @ g, event, g)
