"""Sliding-window training samples and min-max output scaling.

Dataset file layout (little-endian): 8-byte magic ``DDPCDS01``, then five
uint32 header words (n_u, n_y, T_ini, N_p, count), then ``count`` float64
rows. Each row concatenates one sample's fields in the order
u_ini, y_ini, e_u, e_y, u_ref, y_ref; windows are step-major (all channels
of the oldest step first).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DegenerateChannelError, DimensionError
from .hankel import Trajectory

MAGIC = b"DDPCDS01"


class TrainingSample(NamedTuple):
    u_ini: np.ndarray
    y_ini: np.ndarray
    e_u: np.ndarray
    e_y: np.ndarray
    u_ref: np.ndarray
    y_ref: np.ndarray


def extract_samples(u: Trajectory, y: Trajectory, T_ini: int, N_p: int) -> list[TrainingSample]:
    """All length-(T_ini+N_p) windows of one record as training samples.

    Window s covers steps [s, s+T_ini+N_p): the first T_ini steps fill
    u_ini/y_ini, the rest fill u_ref/y_ref. e_u is the jump from the newest
    past input to the first reference input; e_y is the first difference of
    the reference outputs (the window's step-k output acts as the newest
    measurement, see the runtime module for the live-loop counterpart).
    """
    if T_ini < 1 or N_p < 1:
        raise DimensionError(f"T_ini and N_p must be >= 1, got {T_ini}, {N_p}")
    if u.length != y.length:
        raise DimensionError(f"length mismatch: u {u.length}, y {y.length}")
    L = T_ini + N_p
    if u.length < L:
        raise DimensionError(f"record length {u.length} < window {L}")

    samples = []
    for s in range(u.length - L + 1):
        u_win = u.data[:, s:s + L]
        y_win = y.data[:, s:s + L]
        u_ref = u_win[:, T_ini:]
        y_ref = y_win[:, T_ini:]
        e_u = u_ref[:, 0] - u_win[:, T_ini - 1]
        e_y = (y_ref[:, 1] - y_ref[:, 0]) if N_p >= 2 else np.zeros(y.channels)
        samples.append(TrainingSample(
            u_ini=u_win[:, :T_ini].flatten(order="F"),
            y_ini=y_win[:, :T_ini].flatten(order="F"),
            e_u=e_u.copy(),
            e_y=e_y,
            u_ref=u_ref.flatten(order="F"),
            y_ref=y_ref.flatten(order="F"),
        ))
    return samples


@dataclass(frozen=True)
class Scaler:
    """Per-channel min-max map onto [0, 1]."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError(f"bounds mismatch: {lo.shape} vs {hi.shape}")
        if not (hi > lo).all():
            flat = np.flatnonzero(hi <= lo)
            raise DegenerateChannelError(f"channel(s) {flat.tolist()} have max <= min")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def channels(self) -> int:
        return self.lo.shape[0]

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Scale channel-major data; accepts (n,), (n, T), or stacked (n*k,)."""
        v = np.asarray(values, dtype=float)
        lo, hi = self._tiled(v)
        return (v - lo) / (hi - lo)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        lo, hi = self._tiled(v)
        return v * (hi - lo) + lo

    def apply_delta(self, values: np.ndarray) -> np.ndarray:
        """Scale differences of data (tracking errors): offsets cancel."""
        v = np.asarray(values, dtype=float)
        lo, hi = self._tiled(v)
        return v / (hi - lo)

    def _tiled(self, v: np.ndarray):
        n = self.channels
        lo, hi = self.lo, self.hi
        if v.ndim == 1:
            if v.shape[0] % n:
                raise DimensionError(f"vector of {v.shape[0]} is not a multiple of {n} channels")
            lo = np.tile(lo, v.shape[0] // n)
            hi = np.tile(hi, v.shape[0] // n)
        elif v.ndim == 2:
            if v.shape[0] != n:
                raise DimensionError(f"expected {n} rows, got {v.shape[0]}")
            lo, hi = lo[:, None], hi[:, None]
        else:
            raise DimensionError(f"expected 1-D or 2-D data, got shape {v.shape}")
        return lo, hi

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"lo": self.lo.tolist(), "hi": self.hi.tolist()}), encoding="utf-8")

    @staticmethod
    def load(path) -> "Scaler":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return Scaler(np.asarray(obj["lo"]), np.asarray(obj["hi"]))


def fit_scaler(y: Trajectory) -> Scaler:
    return Scaler(y.data.min(axis=1), y.data.max(axis=1))


@dataclass(frozen=True)
class Dataset:
    """A bag of training samples plus the dimensions needed to unpack them."""

    n_u: int
    n_y: int
    T_ini: int
    N_p: int
    samples: list[TrainingSample]

    @property
    def row_length(self) -> int:
        return ((self.n_u + self.n_y) * (self.T_ini + self.N_p)
                + self.n_u + self.n_y)

    def __len__(self) -> int:
        return len(self.samples)

    def to_matrix(self) -> np.ndarray:
        """count x row_length matrix, one packed sample per row."""
        if not self.samples:
            return np.empty((0, self.row_length))
        return np.stack([np.concatenate(s) for s in self.samples])

    def save(self, path) -> None:
        rows = self.to_matrix()
        with Path(path).open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<5I", self.n_u, self.n_y,
                                 self.T_ini, self.N_p, len(self.samples)))
            fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())

    @staticmethod
    def load(path) -> "Dataset":
        raw = Path(path).read_bytes()
        if raw[:8] != MAGIC:
            raise DimensionError(f"{path}: bad magic {raw[:8]!r}")
        n_u, n_y, T_ini, N_p, count = struct.unpack("<5I", raw[8:28])
        ds = Dataset(n_u, n_y, T_ini, N_p, [])
        body = np.frombuffer(raw[28:], dtype="<f8")
        if body.size != count * ds.row_length:
            raise DimensionError(
                f"{path}: payload holds {body.size} values, "
                f"expected {count * ds.row_length}")
        rows = body.reshape(count, ds.row_length)
        bounds = np.cumsum([n_u * T_ini, n_y * T_ini, n_u, n_y, n_u * N_p])
        samples = [TrainingSample(*np.split(row, bounds)) for row in rows]
        return Dataset(n_u, n_y, T_ini, N_p, samples)


def build_dataset(episodes, T_ini: int, N_p: int) -> Dataset:
    """Extract and pool samples from (u, y) trajectory pairs."""
    episodes = list(episodes)
    if not episodes:
        raise DimensionError("need at least one episode")
    n_u = episodes[0][0].channels
    n_y = episodes[0][1].channels
    samples = []
    for u, y in episodes:
        if u.channels != n_u or y.channels != n_y:
            raise DimensionError("episodes disagree on channel counts")
        samples.extend(extract_samples(u, y, T_ini, N_p))
    return Dataset(n_u, n_y, T_ini, N_p, samples)


def train_val_split(dataset: Dataset, val_fraction: float = 0.1,
                    seed: int = 0) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled split; validation gets round(frac * count)."""
    if not 0 <= val_fraction < 1:
        raise DimensionError(f"val_fraction must be in [0, 1), got {val_fraction}")
    count = len(dataset.samples)
    order = np.random.default_rng(seed).permutation(count)
    n_val = int(round(val_fraction * count))
    pick = lambda idx: [dataset.samples[i] for i in idx]  # noqa: E731
    dims = (dataset.n_u, dataset.n_y, dataset.T_ini, dataset.N_p)
    return (Dataset(*dims, pick(order[n_val:])),
            Dataset(*dims, pick(order[:n_val])))
