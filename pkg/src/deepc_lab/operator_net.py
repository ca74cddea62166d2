"""Learned operator network: a rectifier MLP that maps the controller
context straight to the data-driven operator g, plus its training loss,
analytic gradients, and an Adam loop.

Variant I consumes [u_ini; y_ini; e_u; e_y] and is trained with both the
output-tracking and input-tracking terms. Variant II consumes
[u_ini; y_ini; e_y] and drops the input-tracking term, so it needs no
steady-state input reference; the box penalty keeps acting on both the
planned inputs and outputs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, TrainingSample
from .errors import ConfigError, DimensionError, TrainingError
from .hankel import HankelSet, dimension_fingerprint

VARIANTS = ("I", "II")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch: int = 200
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class LossWeights:
    """Tracking weights and broadcast box bounds of the training objective.

    q and r may be scalars or full window diagonals; p_u and p_y are the
    scalar penalty weights of the squared-hinge box terms. Bounds are full
    window vectors (per-step boxes tiled over the horizon).
    """

    q: float | np.ndarray
    r: float | np.ndarray
    p_u: float
    p_y: float
    u_lb: np.ndarray
    u_ub: np.ndarray
    y_lb: np.ndarray
    y_ub: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.q) < 0) or np.any(np.asarray(self.r) < 0):
            raise ConfigError("q and r must be >= 0")
        if self.p_u < 0 or self.p_y < 0:
            raise ConfigError("p_u and p_y must be >= 0")
        for name in ("u_lb", "u_ub", "y_lb", "y_ub"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.u_lb.shape != self.u_ub.shape or self.y_lb.shape != self.y_ub.shape:
            raise DimensionError("bound shapes disagree")

    @staticmethod
    def from_config(cfg) -> "LossWeights":
        """Broadcast a DeePCConfig's per-step boxes over the horizon."""
        return LossWeights(
            q=cfg.q_weight, r=cfg.r_weight, p_u=cfg.p_u, p_y=cfg.p_y,
            u_lb=np.tile(cfg.u_lb, cfg.N_p), u_ub=np.tile(cfg.u_ub, cfg.N_p),
            y_lb=np.tile(cfg.y_lb, cfg.N_p), y_ub=np.tile(cfg.y_ub, cfg.N_p),
        )


def context_dim(variant: str, n_u: int, n_y: int, T_ini: int) -> int:
    if variant == "I":
        return (n_u + n_y) * (T_ini + 1)
    if variant == "II":
        return (n_u + n_y) * T_ini + n_y
    raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")


def build_context(sample: TrainingSample, variant: str) -> np.ndarray:
    """Network input vector of one sample, in the documented field order."""
    if variant == "I":
        return np.concatenate([sample.u_ini, sample.y_ini, sample.e_u, sample.e_y])
    if variant == "II":
        return np.concatenate([sample.u_ini, sample.y_ini, sample.e_y])
    raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")


def context_matrix(samples, variant: str) -> np.ndarray:
    return np.stack([build_context(s, variant) for s in samples])


class OperatorNetwork:
    """Stack of affine layers with rectifier activations, linear output.

    weights[l] has shape (fan_out, fan_in); the operator value may be
    negative, hence no rectifier after the last layer.
    """

    def __init__(self, variant: str, weights, biases, fingerprint: str = ""):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        if len(weights) != len(biases) or not weights:
            raise DimensionError("weights and biases must pair up")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise DimensionError(f"layer {i}: W {W.shape} incompatible with b {b.shape}")
            if i and W.shape[1] != weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i} expects {W.shape[1]} inputs, "
                    f"previous layer emits {weights[i - 1].shape[0]}")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise DimensionError(f"layer {i} has non-finite parameters")
        self.variant = variant
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.fingerprint = fingerprint

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def create(cls, variant: str, n_u: int, n_y: int, T_ini: int, N_p: int,
               width: int, hidden=(150, 150), seed: int = 0) -> "OperatorNetwork":
        """Fresh network with uniform fan-in initialization (fixed seed)."""
        sizes = [context_dim(variant, n_u, n_y, T_ini), *hidden, width]
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, (fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        T = width + T_ini + N_p - 1
        fp = dimension_fingerprint(T, T_ini, N_p, n_u, n_y)
        return cls(variant, weights, biases, fp)

    def forward(self, ctx_vec: np.ndarray) -> np.ndarray:
        ctx_vec = np.asarray(ctx_vec, dtype=float)
        if ctx_vec.shape != (self.input_dim,):
            raise DimensionError(
                f"context vector has shape {ctx_vec.shape}, expected ({self.input_dim},)")
        return self.forward_batch(ctx_vec[None, :])[0]

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise DimensionError(
                f"context batch has shape {X.shape}, expected (*, {self.input_dim})")
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i != last:
                h = np.maximum(h, 0.0)
        return h

    def _forward_trace(self, X):
        # keeps pre-activation signs for backprop
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i != last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def check_fingerprint(self, hankel: HankelSet) -> None:
        if self.fingerprint and self.fingerprint != hankel.fingerprint():
            raise ConfigError(
                f"model fingerprint {self.fingerprint} does not match "
                f"data record fingerprint {hankel.fingerprint()}")

    def save(self, path) -> None:
        obj = {
            "variant": self.variant,
            "layer_sizes": self.layer_sizes,
            "fingerprint": self.fingerprint,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }
        Path(path).write_text(json.dumps(obj), encoding="utf-8")

    @staticmethod
    def load(path) -> "OperatorNetwork":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        net = OperatorNetwork(
            obj["variant"],
            [np.asarray(W, dtype=float) for W in obj["weights"]],
            [np.asarray(b, dtype=float) for b in obj["biases"]],
            obj.get("fingerprint", ""),
        )
        if net.layer_sizes != obj["layer_sizes"]:
            raise DimensionError(f"{path}: stored layer_sizes disagree with arrays")
        return net


def soft_penalty(u_hat: np.ndarray, y_hat: np.ndarray, w: LossWeights) -> float:
    """Squared-hinge box penalty on a planned input/output window."""
    ul = np.maximum(0.0, w.u_lb - u_hat)
    uu = np.maximum(0.0, u_hat - w.u_ub)
    yl = np.maximum(0.0, w.y_lb - y_hat)
    yu = np.maximum(0.0, y_hat - w.y_ub)
    return float(w.p_u * (ul @ ul + uu @ uu) + w.p_y * (yl @ yl + yu @ yu))


def _batch_terms(net, X, U_ref, Y_ref, hankel, w):
    """Shared forward pass: returns (acts, g, u_hat, y_hat, residuals)."""
    acts = net._forward_trace(X)
    G = acts[-1]
    U_hat = G @ hankel.U_f.T
    Y_hat = G @ hankel.Y_f.T
    return acts, G, U_hat, Y_hat


def loss(net: OperatorNetwork, batch, hankel: HankelSet, w: LossWeights) -> float:
    """Mean training objective over a batch of samples."""
    batch = list(batch)
    if not batch:
        raise DimensionError("batch must be nonempty")
    if net.output_dim != hankel.width:
        raise DimensionError(
            f"network emits {net.output_dim} entries, data record width is {hankel.width}")
    X = context_matrix(batch, net.variant)
    U_ref = np.stack([s.u_ref for s in batch])
    Y_ref = np.stack([s.y_ref for s in batch])
    _, _, U_hat, Y_hat = _batch_terms(net, X, U_ref, Y_ref, hankel, w)
    ry = Y_hat - Y_ref
    total = float(np.sum((ry * w.q) * ry))
    if net.variant == "I":
        ru = U_hat - U_ref
        total += float(np.sum((ru * w.r) * ru))
    ul = np.maximum(0.0, w.u_lb - U_hat)
    uu = np.maximum(0.0, U_hat - w.u_ub)
    yl = np.maximum(0.0, w.y_lb - Y_hat)
    yu = np.maximum(0.0, Y_hat - w.y_ub)
    total += float(w.p_u * (np.sum(ul * ul) + np.sum(uu * uu)))
    total += float(w.p_y * (np.sum(yl * yl) + np.sum(yu * yu)))
    return total / len(batch)


def grad(net: OperatorNetwork, batch, hankel: HankelSet, w: LossWeights):
    """Exact reverse-mode gradient of `loss`; returns (dW list, db list)."""
    batch = list(batch)
    if not batch:
        raise DimensionError("batch must be nonempty")
    X = context_matrix(batch, net.variant)
    U_ref = np.stack([s.u_ref for s in batch])
    Y_ref = np.stack([s.y_ref for s in batch])
    acts, G, U_hat, Y_hat = _batch_terms(net, X, U_ref, Y_ref, hankel, w)
    B = len(batch)

    dY = 2.0 * (w.q * (Y_hat - Y_ref))
    dY += 2.0 * w.p_y * (np.maximum(0.0, Y_hat - w.y_ub)
                         - np.maximum(0.0, w.y_lb - Y_hat))
    dU = 2.0 * w.p_u * (np.maximum(0.0, U_hat - w.u_ub)
                        - np.maximum(0.0, w.u_lb - U_hat))
    if net.variant == "I":
        dU += 2.0 * (w.r * (U_hat - U_ref))
    dG = (dY @ hankel.Y_f + dU @ hankel.U_f) / B

    dWs = [None] * len(net.weights)
    dbs = [None] * len(net.weights)
    delta = dG
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            delta = delta * (acts[i + 1] > 0)
        dWs[i] = delta.T @ acts[i]
        dbs[i] = delta.sum(axis=0)
        if i:
            delta = delta @ net.weights[i]
    return dWs, dbs


@dataclass
class TrainHistory:
    train_loss: list[float]
    val_loss: list[float]
    wall_ms: list[float]

    def write_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_loss,wall_ms"]
        for i, (tr, va, ms) in enumerate(zip(self.train_loss, self.val_loss, self.wall_ms)):
            lines.append(f"{i},{tr!r},{'' if va is None else repr(va)},{ms:.3f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(net: OperatorNetwork, dataset: Dataset, hankel: HankelSet,
          w: LossWeights, tc: TrainConfig, val: Dataset | None = None) -> TrainHistory:
    """Minibatch Adam on `loss`; mutates `net` in place.

    Shuffling and batching are driven by tc.seed only, so a rerun with the
    same inputs reproduces parameters exactly. Raises a training error with
    the epoch index if the loss stops being finite.
    """
    samples = dataset.samples
    if not samples:
        raise DimensionError("dataset is empty")
    if net.output_dim != hankel.width:
        raise DimensionError(
            f"network emits {net.output_dim} entries, data record width is {hankel.width}")
    if context_dim(net.variant, dataset.n_u, dataset.n_y, dataset.T_ini) != net.input_dim:
        raise DimensionError("network input dim does not match dataset dims")

    rng = np.random.default_rng(tc.seed)
    m_w = [np.zeros_like(W) for W in net.weights]
    v_w = [np.zeros_like(W) for W in net.weights]
    m_b = [np.zeros_like(b) for b in net.biases]
    v_b = [np.zeros_like(b) for b in net.biases]
    t = 0
    history = TrainHistory([], [], [])
    for epoch in range(tc.epochs):
        tic = time.perf_counter()
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(samples), tc.batch):
            batch = [samples[i] for i in order[start:start + tc.batch]]
            dWs, dbs = grad(net, batch, hankel, w)
            t += 1
            bc1 = 1.0 - tc.beta1**t
            bc2 = 1.0 - tc.beta2**t
            for i in range(len(net.weights)):
                m_w[i] = tc.beta1 * m_w[i] + (1 - tc.beta1) * dWs[i]
                v_w[i] = tc.beta2 * v_w[i] + (1 - tc.beta2) * dWs[i] ** 2
                net.weights[i] -= tc.learning_rate * (m_w[i] / bc1) / (
                    np.sqrt(v_w[i] / bc2) + tc.adam_eps)
                m_b[i] = tc.beta1 * m_b[i] + (1 - tc.beta1) * dbs[i]
                v_b[i] = tc.beta2 * v_b[i] + (1 - tc.beta2) * dbs[i] ** 2
                net.biases[i] -= tc.learning_rate * (m_b[i] / bc1) / (
                    np.sqrt(v_b[i] / bc2) + tc.adam_eps)
            epoch_losses.append(loss(net, batch, hankel, w))
        mean_loss = float(np.mean(epoch_losses))
        if not np.isfinite(mean_loss):
            raise TrainingError("training loss is no longer finite", epoch=epoch)
        history.train_loss.append(mean_loss)
        history.val_loss.append(
            loss(net, val.samples, hankel, w) if val and len(val) else None)
        history.wall_ms.append((time.perf_counter() - tic) * 1e3)
    return history
