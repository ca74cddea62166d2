"""Block-Hankel matrices and their past/future partition.

Everything in this module is pure matrix algebra over offline trajectories:
building the depth-L block-Hankel matrix of a multichannel signal, splitting
it into past/future data blocks, and rank-testing persistent excitation.

Trajectory CSV format: header row ``t,u1..u{n}`` (or ``y1..y{n}``), one row
per time step, UTF-8, '.' decimal separator.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, NumericError


@dataclass(frozen=True)
class Trajectory:
    """A finite multichannel signal, one column per time step.

    ``data`` has shape (channels, length); column t is the sample at step t,
    in plant units.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.data, dtype=float))
        if arr.ndim != 2:
            raise DimensionError(f"trajectory data must be 2-D, got shape {arr.shape}")
        if arr.shape[1] < 1:
            raise DimensionError("trajectory must contain at least one step")
        if not np.isfinite(arr).all():
            raise NumericError("trajectory contains non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.data[:, start:stop])


@dataclass(frozen=True)
class HankelSet:
    """Past/future partitioned data matrices of one input/output record.

    The stacked [U_p; U_f] is the depth-L block-Hankel matrix of the input
    trajectory (and [Y_p; Y_f] of the output), with L = T_ini + N_p. Block
    rows keep the channels of one step contiguous.
    """

    U_p: np.ndarray
    Y_p: np.ndarray
    U_f: np.ndarray
    Y_f: np.ndarray
    T: int
    T_ini: int
    N_p: int
    n_u: int
    n_y: int

    @property
    def L(self) -> int:
        return self.T_ini + self.N_p

    @property
    def width(self) -> int:
        """Number of columns, which is also the dimension of the operator g."""
        return self.T - self.L + 1

    def __post_init__(self):
        w = self.width
        expected = {
            "U_p": (self.n_u * self.T_ini, w),
            "Y_p": (self.n_y * self.T_ini, w),
            "U_f": (self.n_u * self.N_p, w),
            "Y_f": (self.n_y * self.N_p, w),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, expected {shape}")

    def fingerprint(self) -> str:
        """Digest of the problem dimensions, used to pair artifacts."""
        return dimension_fingerprint(self.T, self.T_ini, self.N_p, self.n_u, self.n_y)

    def save(self, path) -> None:
        # write through a handle so numpy honors the exact filename
        with open(path, "wb") as fh:
            np.savez(
                fh,
                U_p=self.U_p, Y_p=self.Y_p, U_f=self.U_f, Y_f=self.Y_f,
                dims=np.array([self.T, self.T_ini, self.N_p, self.n_u, self.n_y]),
            )

    @staticmethod
    def load(path) -> "HankelSet":
        with np.load(path) as z:
            T, T_ini, N_p, n_u, n_y = (int(v) for v in z["dims"])
            return HankelSet(z["U_p"], z["Y_p"], z["U_f"], z["Y_f"],
                             T, T_ini, N_p, n_u, n_y)


def dimension_fingerprint(T: int, T_ini: int, N_p: int, n_u: int, n_y: int) -> str:
    key = f"T={T},T_ini={T_ini},N_p={N_p},n_u={n_u},n_y={n_y}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def build_hankel(seq: Trajectory, depth: int) -> np.ndarray:
    """Depth-``depth`` block-Hankel matrix of a trajectory.

    Block row i (0-based), column j holds sample i+j of the signal; the
    result has shape (channels * depth, length - depth + 1).
    """
    if depth < 1:
        raise DimensionError(f"Hankel depth must be >= 1, got {depth}")
    if seq.length < depth:
        raise DimensionError(
            f"trajectory length {seq.length} is shorter than Hankel depth {depth}"
        )
    cols = seq.length - depth + 1
    return np.vstack([seq.data[:, i:i + cols] for i in range(depth)])


def partition(u: Trajectory, y: Trajectory, T_ini: int, N_p: int) -> HankelSet:
    """Split depth-(T_ini+N_p) Hankel matrices into past and future blocks.

    U_p/Y_p are the first T_ini block rows, U_f/Y_f the last N_p block rows,
    of the input/output Hankel matrices.
    """
    if T_ini < 1 or N_p < 1:
        raise DimensionError(f"T_ini and N_p must be >= 1, got {T_ini}, {N_p}")
    if u.length != y.length:
        raise DimensionError(
            f"input length {u.length} does not match output length {y.length}"
        )
    L = T_ini + N_p
    T = u.length
    if T < L:
        raise DimensionError(f"record length {T} is shorter than window {L}")
    H_u = build_hankel(u, L)
    H_y = build_hankel(y, L)
    n_u, n_y = u.channels, y.channels
    return HankelSet(
        U_p=H_u[: n_u * T_ini],
        Y_p=H_y[: n_y * T_ini],
        U_f=H_u[n_u * T_ini:],
        Y_f=H_y[n_y * T_ini:],
        T=T, T_ini=T_ini, N_p=N_p, n_u=n_u, n_y=n_y,
    )


def is_persistently_exciting(u: Trajectory, order: int, rank_tol: float = 1e-10) -> bool:
    """Full-row-rank test on the depth-``order`` Hankel matrix of ``u``.

    Rank is judged by singular values: the smallest must exceed
    ``rank_tol`` times the largest. A sequence exciting at order k is
    exciting at every order below k.
    """
    H = build_hankel(u, order)
    if H.shape[0] > H.shape[1]:
        return False
    s = np.linalg.svd(H, compute_uv=False)
    return bool(s[-1] > rank_tol * s[0])


def write_trajectory_csv(path, traj: Trajectory, prefix: str) -> None:
    """Write a trajectory with header ``t,{prefix}1..{prefix}n``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"{prefix}{i + 1}" for i in range(traj.channels)])
        for t in range(traj.length):
            w.writerow([t] + [repr(float(v)) for v in traj.data[:, t]])


def read_trajectory_csv(path) -> Trajectory:
    """Read a trajectory written by :func:`write_trajectory_csv`."""
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise DimensionError(f"{path}: expected header starting with 't'")
    n = len(rows[0]) - 1
    data = np.empty((n, len(rows) - 1))
    for j, row in enumerate(rows[1:]):
        if len(row) != n + 1:
            raise DimensionError(f"{path}: row {j + 1} has {len(row)} fields, expected {n + 1}")
        data[:, j] = [float(v) for v in row[1:]]
    return Trajectory(data)
