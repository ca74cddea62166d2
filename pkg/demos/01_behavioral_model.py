"""Behavioral modeling from raw data: every trajectory of an LTI system
lives in the column span of a Hankel-partitioned data record.

Builds a random controllable system, collects one persistently exciting
record, and checks that a completely fresh trajectory (new start state,
new inputs) is reproduced exactly, first by least squares on the stacked
blocks and then through the predictive-control step itself.

Run: python demos/01_behavioral_model.py
"""

from types import SimpleNamespace

import numpy as np

from deepc_lab.deepc import deepc_step, DeePCConfig
from deepc_lab.hankel import is_persistently_exciting, partition, Trajectory
from deepc_lab.plants import random_controllable_lti

T, T_INI, N_P = 120, 4, 6
L = T_INI + N_P


def flat(cols):
    return np.asarray(cols).flatten(order="F")


def main():
    plant = random_controllable_lti(7, n_x=3, n_u=2, n_y=2)
    rng = np.random.default_rng(8)

    # one excitation record from the origin
    u_data = rng.uniform(-1, 1, (2, T))
    x = np.zeros(3)
    y_data = np.empty((2, T))
    for t in range(T):
        y_data[:, t] = plant.output(x)
        x = plant.step(x, u_data[:, t], None)
    u, y = Trajectory(u_data), Trajectory(y_data)
    print(f"record: T={T}, persistently exciting of order {L + 3}:",
          is_persistently_exciting(u, L + 3))

    hs = partition(u, y, T_INI, N_P)
    print(f"blocks: U_p {hs.U_p.shape}, Y_p {hs.Y_p.shape}, "
          f"U_f {hs.U_f.shape}, Y_f {hs.Y_f.shape}")

    # a fresh trajectory the record has never seen
    x0 = rng.standard_normal(3)
    u_new = rng.uniform(-1, 1, (2, L))
    ys, xk = [], x0.copy()
    for t in range(L):
        ys.append(plant.output(xk))
        xk = plant.step(xk, u_new[:, t], None)
    y_new = np.array(ys).T

    M = np.vstack([hs.U_p, hs.Y_p, hs.U_f, hs.Y_f])
    w = np.concatenate([flat(u_new[:, :T_INI]), flat(y_new[:, :T_INI]),
                        flat(u_new[:, T_INI:]), flat(y_new[:, T_INI:])])
    g, *_ = np.linalg.lstsq(M, w, rcond=None)
    print(f"fresh window residual through the record: "
          f"{np.abs(M @ g - w).max():.2e}")

    # the same exactness through one controller step
    cfg = DeePCConfig(T=T, T_ini=T_INI, N_p=N_P,
                      u_lb=np.full(2, -1e6), u_ub=np.full(2, 1e6),
                      y_lb=np.full(2, -1e6), y_ub=np.full(2, 1e6),
                      reg_eps=1e-12, qp_tol=1e-9)
    ctx = SimpleNamespace(u_ini=flat(u_new[:, :T_INI]),
                          y_ini=flat(y_new[:, :T_INI]))
    res = deepc_step(hs, cfg, ctx, flat(u_new[:, T_INI:]),
                     flat(y_new[:, T_INI:]))
    print(f"controller step: status={res.status}, "
          f"|y_pred - y_true| = {np.abs(res.y_pred - flat(y_new[:, T_INI:])).max():.2e}")


if __name__ == "__main__":
    main()
