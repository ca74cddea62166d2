"""Simulated plants: a three-gene regulatory network, generic LTI systems,
and a wrapper for externally supplied step functions.

A plant exposes ``n_x``, ``n_u``, ``n_y``, ``step(x, u, rng=None)`` and
``output(x, u=None)``. Stepping is a pure function of (state, input, noise
draw), so independent rollouts may run concurrently with separate RNGs.

Note on the bundled GRN benchmark: operating-point tables circulating for
this three-gene network are not self-consistent with the model at the
default rates (steady mRNA-channel inputs disagree by roughly 5x, and some
protein entries by roughly 10x with the protein balance beta*x/c). The
benchmark therefore hard-codes only the steady *inputs* and recomputes each
set-point state with :func:`find_steady_state`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .errors import ConfigError, ConvergenceError, DimensionError, NumericError
from .hankel import Trajectory

logger = logging.getLogger(__name__)

# mRNA channel i is repressed by protein channel GRN_REPRESSOR[i] (0-based
# state indices); protein channel 3+i is translated from mRNA channel i.
GRN_REPRESSOR = (5, 3, 4)


@dataclass(frozen=True)
class GrnParams:
    """Rates of the three-gene regulatory network.

    K: dissociation constants; a: max promoter strengths; gamma: mRNA
    degradation rates (1/min); beta: protein production rates (1/min);
    c: protein degradation rates (1/min); delta: uniform noise half-width;
    dt: sampling period (min).
    """

    K: np.ndarray = field(default_factory=lambda: np.ones(3))
    a: np.ndarray = field(default_factory=lambda: np.full(3, 1.6))
    gamma: np.ndarray = field(default_factory=lambda: np.full(3, 0.16))
    beta: np.ndarray = field(default_factory=lambda: np.full(3, 0.16))
    c: np.ndarray = field(default_factory=lambda: np.full(3, 0.06))
    delta: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        for name in ("K", "a", "gamma", "beta", "c"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (3,):
                raise ConfigError(f"{name} must have 3 entries, got shape {arr.shape}")
            if not (arr > 0).all():
                raise ConfigError(f"{name} entries must be positive")
            object.__setattr__(self, name, arr)
        if self.delta < 0:
            raise ConfigError("noise half-width delta must be >= 0")
        if self.dt <= 0:
            raise ConfigError("sampling period dt must be > 0")


def grn_step(x: np.ndarray, u: np.ndarray, p: GrnParams, noise: np.ndarray) -> np.ndarray:
    """One explicit-Euler step of the three-gene network.

    mRNA channels (0..2) see Hill repression by their paired protein plus
    the light input; protein channels (3..5) follow first-order
    production/degradation from their mRNA. Noise is added componentwise;
    the caller draws it from U(-delta, delta). Concentrations are clamped
    at zero.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x.shape != (6,) or u.shape != (3,) or noise.shape != (6,):
        raise DimensionError(
            f"expected x(6), u(3), noise(6); got {x.shape}, {u.shape}, {noise.shape}"
        )
    if not (np.isfinite(x).all() and np.isfinite(u).all()):
        raise NumericError("non-finite state or input passed to grn_step")

    m, prot = x[:3], x[3:]
    repressors = x[list(GRN_REPRESSOR)]
    dm = -p.gamma * m + p.a / (p.K + repressors**2) + u
    dp = -p.c * prot + p.beta * m
    nxt = x + np.concatenate([dm, dp]) * p.dt + noise
    if (nxt < 0).any():
        logger.warning("clamping %d negative concentration(s) to zero", int((nxt < 0).sum()))
        nxt = np.maximum(nxt, 0.0)
    return nxt


def grn_output(x: np.ndarray) -> np.ndarray:
    """Measured outputs: the three protein concentrations."""
    x = np.asarray(x, dtype=float)
    if x.shape != (6,):
        raise DimensionError(f"expected state of 6 entries, got shape {x.shape}")
    return x[3:6].copy()


class GrnPlant:
    """Three-gene regulatory network as a steppable plant."""

    n_x, n_u, n_y = 6, 3, 3

    def __init__(self, params: GrnParams | None = None):
        self.params = params or GrnParams()

    def step(self, x, u, rng: np.random.Generator | None = None):
        p = self.params
        if rng is not None and p.delta > 0:
            noise = rng.uniform(-p.delta, p.delta, size=6)
        else:
            noise = np.zeros(6)
        return grn_step(x, u, p, noise)

    def output(self, x, u=None):
        return grn_output(x)


@dataclass(frozen=True)
class LtiPlant:
    """x' = Ax + Bu, y = Cx + Du, with optional uniform state noise."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray | None = None
    noise_delta: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        D = self.D
        D = np.zeros((C.shape[0], B.shape[1])) if D is None else np.atleast_2d(np.asarray(D, float))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionError(f"A {A.shape} and B {B.shape} are inconsistent")
        if C.shape[1] != A.shape[0] or D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError(f"C {C.shape} / D {D.shape} inconsistent with A, B")
        for name, val in (("A", A), ("B", B), ("C", C), ("D", D)):
            object.__setattr__(self, name, val)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    def step(self, x, u, rng: np.random.Generator | None = None):
        nxt = self.A @ np.asarray(x, float) + self.B @ np.asarray(u, float)
        if rng is not None and self.noise_delta > 0:
            nxt = nxt + rng.uniform(-self.noise_delta, self.noise_delta, size=self.n_x)
        return nxt

    def output(self, x, u=None):
        y = self.C @ np.asarray(x, float)
        if np.any(self.D):
            if u is None:
                raise DimensionError("plant has direct feedthrough; output needs the input")
            y = y + self.D @ np.asarray(u, float)
        return y


class FunctionPlant:
    """User-registered step/output functions with declared dimensions."""

    def __init__(self, n_x: int, n_u: int, n_y: int, step_fn, output_fn):
        self.n_x, self.n_u, self.n_y = n_x, n_u, n_y
        self._step, self._output = step_fn, output_fn

    def step(self, x, u, rng=None):
        return np.asarray(self._step(x, u, rng), dtype=float)

    def output(self, x, u=None):
        return np.asarray(self._output(x), dtype=float)


def is_controllable(plant: LtiPlant, rank_tol: float = 1e-10) -> bool:
    """Rank test on the controllability matrix [B, AB, ..., A^{n-1}B]."""
    n = plant.n_x
    blocks, M = [], plant.B
    for _ in range(n):
        blocks.append(M)
        M = plant.A @ M
    ctrb = np.hstack(blocks)
    s = np.linalg.svd(ctrb, compute_uv=False)
    return bool(s.min() > rank_tol * s.max())


def random_controllable_lti(seed: int, n_x: int = 3, n_u: int = 2, n_y: int = 2,
                            spectral_radius: float = 0.9) -> LtiPlant:
    """Random stable controllable LTI plant (D = 0) for oracle tests."""
    rng = np.random.default_rng(seed)
    for _ in range(32):
        A = rng.standard_normal((n_x, n_x))
        A *= spectral_radius / max(abs(np.linalg.eigvals(A)))
        plant = LtiPlant(A, rng.standard_normal((n_x, n_u)),
                         rng.standard_normal((n_y, n_x)))
        if is_controllable(plant):
            return plant
    raise ConvergenceError("failed to draw a controllable system", residual=float("nan"))


def find_steady_state(plant, u_ss, x_guess, tol: float = 1e-9,
                      max_iter: int = 200) -> np.ndarray:
    """Solve step(x, u_ss, 0) = x for a deterministic plant.

    Uses a Newton-type root solve on the one-step residual and verifies the
    fixed point by an explicit plant step before returning.
    """
    u_ss = np.asarray(u_ss, dtype=float)
    x_guess = np.asarray(x_guess, dtype=float)

    def residual(x):
        return plant.step(x, u_ss, None) - x

    sol = optimize.root(residual, x_guess, method="hybr",
                        options={"maxfev": max_iter * (len(x_guess) + 1)})
    x_star = sol.x
    res = float(np.max(np.abs(plant.step(x_star, u_ss, None) - x_star)))
    if not sol.success or res >= tol:
        raise ConvergenceError(f"no steady state found for input {u_ss}", residual=res)
    return x_star


def generate_open_loop(plant, x0, steps: int, hold: int, input_box, seed: int,
                       ) -> tuple[Trajectory, Trajectory]:
    """Piecewise-constant random excitation rollout.

    Each input level is drawn uniformly inside ``input_box = (lb, ub)`` and
    held for ``hold`` steps. Returns synchronized input and output
    trajectories of ``steps`` samples: y_t is measured at state x_t, then
    u_t is applied. Deterministic for a fixed seed.
    """
    lb = np.asarray(input_box[0], dtype=float)
    ub = np.asarray(input_box[1], dtype=float)
    if lb.shape != (plant.n_u,) or ub.shape != (plant.n_u,):
        raise ConfigError(f"input box must have {plant.n_u} entries per bound")
    if (lb > ub).any():
        raise ConfigError(f"input box has lb > ub: {lb} vs {ub}")
    if hold < 1:
        raise ConfigError(f"hold must be >= 1, got {hold}")

    rng = np.random.default_rng(seed)
    x = np.asarray(x0, dtype=float).copy()
    u_rec = np.empty((plant.n_u, steps))
    y_rec = np.empty((plant.n_y, steps))
    level = None
    for t in range(steps):
        if t % hold == 0:
            level = rng.uniform(lb, ub)
        u_rec[:, t] = level
        y_rec[:, t] = plant.output(x, level)
        x = plant.step(x, level, rng)
    return Trajectory(u_rec), Trajectory(y_rec)


# Steady inputs of the four bundled GRN benchmark operating points. The
# matching set-point states are recomputed from these (see module docstring).
GRN_BENCHMARK_STEADY_INPUTS = np.array([
    [0.7189, 0.5536, 0.3725],
    [0.5070, 0.4620, 0.4989],
    [0.5332, 0.2266, 0.4233],
    [0.1998, 0.2632, 0.5783],
])

GRN_BENCHMARK_WARMUP_INPUT = np.full(3, 0.5)
GRN_INPUT_BOX = (np.zeros(3), np.ones(3))
GRN_OUTPUT_BOX = (np.zeros(3), np.full(3, 50.0))


def grn_benchmark_setpoints(params: GrnParams | None = None,
                            tol: float = 1e-10) -> list[tuple[np.ndarray, np.ndarray]]:
    """(u_ss, x_ss) pairs for the four benchmark operating points."""
    plant = GrnPlant(params)
    pairs = []
    for u_ss in GRN_BENCHMARK_STEADY_INPUTS:
        x_guess = np.concatenate([u_ss / plant.params.gamma,
                                  u_ss / plant.params.gamma * 2.0])
        pairs.append((u_ss, find_steady_state(plant, u_ss, x_guess, tol=tol)))
    return pairs


def grn_benchmark_initial_state(params: GrnParams | None = None) -> np.ndarray:
    """Benchmark start state: the fixed point under the warm-up input."""
    plant = GrnPlant(params)
    u0 = GRN_BENCHMARK_WARMUP_INPUT
    x_guess = np.concatenate([u0 / plant.params.gamma, u0 / plant.params.gamma * 2.0])
    return find_steady_state(plant, u0, x_guess, tol=1e-10)


def load_plant_config(path):
    """Load a plant config file.

    JSON with keys: kind (grn|lti|external), params, input_box, output_box,
    noise. Returns (plant_or_none, input_box, output_box); ``external``
    declares bounds only, the simulator must be registered in code.
    """
    cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    kind = cfg.get("kind")
    input_box = _parse_box(cfg.get("input_box"))
    output_box = _parse_box(cfg.get("output_box"))
    noise = cfg.get("noise", {})

    if kind == "grn":
        params = cfg.get("params", {})
        grn = GrnParams(
            K=np.asarray(params.get("K", [1.0] * 3)),
            a=np.asarray(params.get("a", [1.6] * 3)),
            gamma=np.asarray(params.get("gamma", [0.16] * 3)),
            beta=np.asarray(params.get("beta", [0.16] * 3)),
            c=np.asarray(params.get("c", [0.06] * 3)),
            delta=float(noise.get("delta", params.get("delta", 0.0))),
            dt=float(params.get("dt", 1.0)),
        )
        if input_box is None:
            input_box = GRN_INPUT_BOX
        if output_box is None:
            output_box = GRN_OUTPUT_BOX
        return GrnPlant(grn), input_box, output_box
    if kind == "lti":
        params = cfg["params"]
        plant = LtiPlant(
            np.asarray(params["A"], dtype=float),
            np.asarray(params["B"], dtype=float),
            np.asarray(params["C"], dtype=float),
            np.asarray(params["D"], dtype=float) if "D" in params else None,
            noise_delta=float(noise.get("delta", 0.0)),
        )
        return plant, input_box, output_box
    if kind == "external":
        return None, input_box, output_box
    raise ConfigError(f"unknown plant kind {kind!r} in {path}")


def _parse_box(value):
    if value is None:
        return None
    lb = np.asarray(value["lb"], dtype=float)
    ub = np.asarray(value["ub"], dtype=float)
    if lb.shape != ub.shape or (lb > ub).any():
        raise ConfigError(f"invalid box: lb={lb}, ub={ub}")
    return lb, ub
