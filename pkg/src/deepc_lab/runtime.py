"""Closed-loop execution: rolling context windows, set-point schedules,
controller adapters, per-step records, the scaled tracking metric, and the
timing study.

Timeline convention (one iteration at time k, after warm-up): the windows
hold steps k-T_ini .. k-1; the newest output y_k is measured first and only
feeds the tracking-error inputs e_u,k = u^r_k - u_{k-1} and
e_y,k = y^r_{k+1} - y_k; the controller then plans from step k onward, its
first input block is applied, and the windows roll forward by one.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .constraint_guard import ConstraintGuard
from .dataset import Scaler, TrainingSample
from .deepc import DeepcController, DeePCConfig
from .errors import ConfigError, ConvergenceError, DimensionError
from .hankel import HankelSet
from .operator_net import OperatorNetwork, build_context

logger = logging.getLogger(__name__)

CONTROLLER_KINDS = ("deepc", "deep_deepc_I", "deep_deepc_II",
                    "guarded_I", "guarded_II", "open_loop")


class ControllerContext:
    """Rolling T_ini-step input/output windows plus the tracking errors."""

    def __init__(self, n_u: int, n_y: int, T_ini: int):
        self.n_u, self.n_y, self.T_ini = n_u, n_y, T_ini
        self.u_win = np.zeros((n_u, T_ini))
        self.y_win = np.zeros((n_y, T_ini))
        self.e_u = np.zeros(n_u)
        self.e_y = np.zeros(n_y)
        self.k = 0
        self._filled = 0

    @property
    def ready(self) -> bool:
        return self._filled >= self.T_ini

    @property
    def u_ini(self) -> np.ndarray:
        return self.u_win.flatten(order="F")

    @property
    def y_ini(self) -> np.ndarray:
        return self.y_win.flatten(order="F")

    @property
    def last_input(self) -> np.ndarray:
        return self.u_win[:, -1].copy()

    def push(self, u: np.ndarray, y: np.ndarray) -> None:
        u = np.asarray(u, dtype=float)
        y = np.asarray(y, dtype=float)
        if u.shape != (self.n_u,) or y.shape != (self.n_y,):
            raise DimensionError(f"push expects ({self.n_u},) and ({self.n_y},), "
                                 f"got {u.shape} and {y.shape}")
        self.u_win = np.roll(self.u_win, -1, axis=1)
        self.y_win = np.roll(self.y_win, -1, axis=1)
        self.u_win[:, -1] = u
        self.y_win[:, -1] = y
        self._filled = min(self._filled + 1, self.T_ini)
        self.k += 1

    def as_sample(self) -> TrainingSample:
        """Network-facing view; reference fields are not meaningful here."""
        return TrainingSample(self.u_ini, self.y_ini, self.e_u.copy(),
                              self.e_y.copy(), np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class SetpointSchedule:
    """Piecewise-constant (u_ss, y_ss) targets; the last segment persists."""

    inputs: np.ndarray    # (segments, n_u)
    outputs: np.ndarray   # (segments, n_y)
    durations: np.ndarray  # (segments,) steps each

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        durations = np.atleast_1d(np.asarray(self.durations, dtype=int))
        if not (len(inputs) == len(outputs) == len(durations)) or len(inputs) == 0:
            raise ConfigError("schedule segments must align and be nonempty")
        if (durations < 1).any():
            raise ConfigError("every segment must last at least one step")
        for name, val in (("inputs", inputs), ("outputs", outputs),
                          ("durations", durations)):
            object.__setattr__(self, name, val)

    @property
    def n_u(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_y(self) -> int:
        return self.outputs.shape[1]

    @property
    def total_steps(self) -> int:
        return int(self.durations.sum())

    def _segment(self, k: int) -> int:
        edges = np.cumsum(self.durations)
        return int(min(np.searchsorted(edges, k, side="right"), len(edges) - 1))

    def u_ref_at(self, k: int) -> np.ndarray:
        return self.inputs[self._segment(k)]

    def y_ref_at(self, k: int) -> np.ndarray:
        return self.outputs[self._segment(k)]

    def u_window(self, k: int, N_p: int) -> np.ndarray:
        return np.concatenate([self.u_ref_at(k + i) for i in range(N_p)])

    def y_window(self, k: int, N_p: int) -> np.ndarray:
        return np.concatenate([self.y_ref_at(k + i) for i in range(N_p)])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({
            "segments": [
                {"u": self.inputs[i].tolist(), "y": self.outputs[i].tolist(),
                 "steps": int(self.durations[i])}
                for i in range(len(self.durations))
            ]
        }), encoding="utf-8")

    @staticmethod
    def load(path) -> "SetpointSchedule":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        segs = obj["segments"]
        return SetpointSchedule(
            inputs=np.array([s["u"] for s in segs], dtype=float),
            outputs=np.array([s["y"] for s in segs], dtype=float),
            durations=np.array([s["steps"] for s in segs], dtype=int),
        )


def grn_benchmark_schedule(steps_per: int = 100) -> SetpointSchedule:
    """Four-target schedule over the bundled gene-network operating points."""
    from .plants import grn_benchmark_setpoints

    pairs = grn_benchmark_setpoints()
    return SetpointSchedule(
        inputs=np.array([u for u, _ in pairs]),
        outputs=np.array([x[3:] for _, x in pairs]),
        durations=np.full(len(pairs), steps_per, dtype=int),
    )


class StepDecision(NamedTuple):
    u_next: np.ndarray
    event: bool = False
    status: str = "ok"
    fallback: bool = False


def _scaled_cfg(cfg: DeePCConfig, scaler: Scaler | None) -> DeePCConfig:
    # Output boxes move into scaled units along with the data record.
    if scaler is None:
        return cfg
    return replace(cfg, y_lb=scaler.apply(cfg.y_lb), y_ub=scaler.apply(cfg.y_ub))


class DeepcAdapter:
    """Conventional receding-horizon QP controller.

    With a scaler the controller works in scaled output units: the data
    record is expected to be scaled already, and measured windows, output
    references, and output boxes are scaled on the way in. Inputs and the
    record of the run stay in plant units.
    """

    def __init__(self, hankel: HankelSet, cfg: DeePCConfig,
                 schedule: SetpointSchedule, scaler: Scaler | None = None):
        self.kind = "deepc"
        self.scaler = scaler
        self.controller = DeepcController(hankel, _scaled_cfg(cfg, scaler))
        self.schedule = schedule
        self.hankel = hankel
        self.cfg = cfg
        self.N_p = cfg.N_p

    def decide(self, ctx: ControllerContext, k: int) -> StepDecision:
        y_win = self.schedule.y_window(k, self.N_p)
        if self.scaler is None:
            step_ctx = ctx
        else:
            y_win = self.scaler.apply(y_win)
            step_ctx = TrainingSample(ctx.u_ini, self.scaler.apply(ctx.y_ini),
                                      ctx.e_u, ctx.e_y, np.zeros(0), np.zeros(0))
        res = self.controller.step(step_ctx, self.schedule.u_window(k, self.N_p),
                                   y_win)
        return StepDecision(res.u_next, False, res.status, res.fallback)


class DeepAdapter:
    """Learned-operator controller, optionally guarded by projection.

    The scaler (if any) must match the one the network was trained with;
    it scales y_ini and e_y before they enter the context vector.
    """

    def __init__(self, kind: str, net: OperatorNetwork, hankel: HankelSet,
                 cfg: DeePCConfig, guarded: bool, scaler: Scaler | None = None):
        variant = kind.rsplit("_", 1)[-1]
        if net.variant != variant:
            raise ConfigError(f"controller kind {kind} needs a variant {variant} "
                              f"network, got variant {net.variant}")
        net.check_fingerprint(hankel)
        self.kind = kind
        self.net = net
        self.hankel = hankel
        self.cfg = cfg
        self.scaler = scaler
        self.guard = (ConstraintGuard(hankel, _scaled_cfg(cfg, scaler))
                      if guarded else None)

    def decide(self, ctx: ControllerContext, k: int) -> StepDecision:
        sample = ctx.as_sample()
        if self.scaler is not None:
            sample = sample._replace(y_ini=self.scaler.apply(sample.y_ini),
                                     e_y=self.scaler.apply_delta(sample.e_y))
        g = self.net.forward(build_context(sample, self.net.variant))
        event = False
        if self.guard is not None:
            g, event = self.guard.guarded(g, ctx=sample)
        u_seq = self.hankel.U_f @ g
        return StepDecision(u_seq[: self.cfg.n_u], event, "ok")


class OpenLoopAdapter:
    """Applies the schedule's steady input; no feedback."""

    def __init__(self, schedule: SetpointSchedule):
        self.kind = "open_loop"
        self.schedule = schedule

    def decide(self, ctx: ControllerContext, k: int) -> StepDecision:
        return StepDecision(self.schedule.u_ref_at(k).copy(), False, "ok")


def make_controller(kind: str, schedule: SetpointSchedule,
                    hankel: HankelSet | None = None,
                    cfg: DeePCConfig | None = None,
                    net: OperatorNetwork | None = None,
                    scaler: Scaler | None = None):
    if kind == "deepc":
        if hankel is None or cfg is None:
            raise ConfigError("deepc controller needs a data record and config")
        return DeepcAdapter(hankel, cfg, schedule, scaler)
    if kind in ("deep_deepc_I", "deep_deepc_II", "guarded_I", "guarded_II"):
        if hankel is None or cfg is None or net is None:
            raise ConfigError(f"{kind} needs a data record, config, and network")
        return DeepAdapter(kind, net, hankel, cfg,
                           guarded=kind.startswith("guarded"), scaler=scaler)
    if kind == "open_loop":
        return OpenLoopAdapter(schedule)
    raise ConfigError(f"unknown controller kind {kind!r}, expected one of {CONTROLLER_KINDS}")


@dataclass
class RunRecord:
    """One row per simulated step (warm-up rows flagged), plus metadata."""

    n_u: int
    n_y: int
    kind: str
    meta: dict = field(default_factory=dict)
    ks: list = field(default_factory=list)
    warmup: list = field(default_factory=list)
    u_applied: list = field(default_factory=list)
    y_measured: list = field(default_factory=list)
    u_ref: list = field(default_factory=list)
    y_ref: list = field(default_factory=list)
    event: list = field(default_factory=list)
    status: list = field(default_factory=list)
    fallback: list = field(default_factory=list)
    solve_s: list = field(default_factory=list)

    def add(self, k, warm, u, y, u_r, y_r, event=False, status="", fb=False, dt=0.0):
        if dt < 0:
            raise ConfigError("solve time must be non-negative")
        self.ks.append(int(k))
        self.warmup.append(bool(warm))
        self.u_applied.append(np.asarray(u, dtype=float).copy())
        self.y_measured.append(np.asarray(y, dtype=float).copy())
        self.u_ref.append(np.asarray(u_r, dtype=float).copy())
        self.y_ref.append(np.asarray(y_r, dtype=float).copy())
        self.event.append(bool(event))
        self.status.append(status)
        self.fallback.append(bool(fb))
        self.solve_s.append(float(dt))

    def __len__(self) -> int:
        return len(self.ks)

    @property
    def controlled(self) -> np.ndarray:
        return ~np.asarray(self.warmup, dtype=bool)

    def outputs(self, controlled_only: bool = True) -> np.ndarray:
        arr = np.asarray(self.y_measured).T
        return arr[:, self.controlled] if controlled_only else arr

    def output_refs(self, controlled_only: bool = True) -> np.ndarray:
        arr = np.asarray(self.y_ref).T
        return arr[:, self.controlled] if controlled_only else arr

    def inputs(self, controlled_only: bool = True) -> np.ndarray:
        arr = np.asarray(self.u_applied).T
        return arr[:, self.controlled] if controlled_only else arr

    @property
    def event_rate(self) -> float:
        mask = self.controlled
        if not mask.any():
            return 0.0
        return float(np.asarray(self.event)[mask].mean())

    @property
    def mean_solve_s(self) -> float:
        mask = self.controlled
        if not mask.any():
            return 0.0
        return float(np.asarray(self.solve_s)[mask].mean())

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["k", "warmup"]
                + [f"u{i+1}" for i in range(self.n_u)]
                + [f"y{i+1}" for i in range(self.n_y)]
                + [f"ur{i+1}" for i in range(self.n_u)]
                + [f"yr{i+1}" for i in range(self.n_y)]
                + ["event", "status", "fallback", "solve_s", "kind"])
            for i in range(len(self.ks)):
                w.writerow(
                    [self.ks[i], int(self.warmup[i])]
                    + [repr(float(v)) for v in self.u_applied[i]]
                    + [repr(float(v)) for v in self.y_measured[i]]
                    + [repr(float(v)) for v in self.u_ref[i]]
                    + [repr(float(v)) for v in self.y_ref[i]]
                    + [int(self.event[i]), self.status[i],
                       int(self.fallback[i]), repr(self.solve_s[i]), self.kind])

    def summary(self, scaler: Scaler | None = None) -> dict:
        out = {
            "kind": self.kind,
            "steps": int(self.controlled.sum()),
            "event_rate": self.event_rate,
            "mean_solve_s": self.mean_solve_s,
            "fallback_steps": int(np.asarray(self.fallback)[self.controlled].sum()),
            **self.meta,
        }
        if scaler is not None:
            out["rmse_scaled"] = rmse(self, scaler)
        return out

    def save_summary(self, path, scaler: Scaler | None = None) -> None:
        Path(path).write_text(json.dumps(self.summary(scaler), indent=2),
                              encoding="utf-8")


def rmse(record: RunRecord, scaler: Scaler) -> float:
    """Root mean square tracking error over scaled outputs, post warm-up."""
    if len(record) == 0 or not record.controlled.any():
        raise DimensionError("record holds no controlled steps")
    y = scaler.apply(record.outputs())
    y_r = scaler.apply(record.output_refs())
    diff = y_r - y
    n_y, n_k = diff.shape
    return float(np.sqrt(np.sum(diff * diff) / (n_y * n_k)))


def run_closed_loop(plant, controller, schedule: SetpointSchedule, steps: int,
                    seed: int = 0, x0=None, T_ini: int | None = None,
                    warmup_input=None) -> RunRecord:
    """Warm-up then feedback loop; fail-operational on controller errors.

    The warm-up holds the schedule's first steady input for T_ini steps to
    fill the context windows. A controller failure (projection or QP
    infeasibility that survives its own fallback) keeps the previous input
    and is recorded, so one bad step cannot kill a run.
    """
    if x0 is None:
        raise ConfigError("run_closed_loop needs the initial plant state x0")
    if T_ini is None:
        T_ini = getattr(getattr(controller, "cfg", None), "T_ini", None)
        if T_ini is None:
            hankel = getattr(controller, "hankel", None)
            T_ini = hankel.T_ini if hankel is not None else 1
    rng = np.random.default_rng(seed)
    ctx = ControllerContext(schedule.n_u, schedule.n_y, T_ini)
    record = RunRecord(schedule.n_u, schedule.n_y, controller.kind,
                       meta={"seed": seed, "T_ini": T_ini})

    x = np.asarray(x0, dtype=float).copy()
    u_warm = np.asarray(schedule.u_ref_at(0) if warmup_input is None
                        else warmup_input, dtype=float)
    for t in range(T_ini):
        y_t = plant.output(x, u_warm)
        record.add(t, True, u_warm, y_t, schedule.u_ref_at(t),
                   schedule.y_ref_at(t), status="warmup")
        ctx.push(u_warm, y_t)
        x = plant.step(x, u_warm, rng)

    u_prev = u_warm.copy()
    for k in range(T_ini, T_ini + steps):
        y_k = plant.output(x, u_prev)
        ctx.e_u = schedule.u_ref_at(k) - u_prev
        ctx.e_y = schedule.y_ref_at(k + 1) - y_k
        tic = time.perf_counter()
        try:
            decision = controller.decide(ctx, k)
            status, event, fb = decision.status, decision.event, decision.fallback
            u_k = np.asarray(decision.u_next, dtype=float)
            if status in ("infeasible", "diverged") or not np.isfinite(u_k).all():
                raise ConvergenceError("controller produced no usable input",
                                       residual=float("nan"))
        except ConvergenceError as exc:
            logger.warning("step %d: controller failed (%s); holding input", k, exc)
            u_k, status, event, fb = u_prev.copy(), "failed", False, False
        dt = time.perf_counter() - tic
        record.add(k, False, u_k, y_k, schedule.u_ref_at(k),
                   schedule.y_ref_at(k), event=event, status=status,
                   fb=fb, dt=dt)
        x = plant.step(x, u_k, rng)
        ctx.push(u_k, y_k)
        u_prev = u_k
    return record


def time_comparison(factories: dict[str, Callable[[], object]], plant, x0,
                    schedule: SetpointSchedule, trials: int = 10,
                    steps: int = 100, seed: int = 0,
                    perturb: float = 0.05) -> dict:
    """Per-controller mean step time over trials with jittered start states.

    Every trial rebuilds each controller from its factory (fresh caches) and
    starts the plant from x0 scaled componentwise by up to +-perturb.
    Reports per-controller mean/std seconds per step, event rate, and the
    speed ratio against the conventional QP controller when present.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    times: dict[str, list[float]] = {name: [] for name in factories}
    events: dict[str, list[float]] = {name: [] for name in factories}
    for t in range(trials):
        jitter = np.random.default_rng(seed + 1000 + t).uniform(
            -perturb, perturb, x0.shape)
        x_t = x0 * (1.0 + jitter)
        for name, make in factories.items():
            controller = make()
            rec = run_closed_loop(plant, controller, schedule, steps,
                                  seed=seed + t, x0=x_t)
            times[name].append(rec.mean_solve_s)
            events[name].append(rec.event_rate)
    table: dict[str, dict] = {}
    for name in factories:
        table[name] = {
            "mean_step_s": float(np.mean(times[name])),
            "std_step_s": float(np.std(times[name])),
            "event_rate": float(np.mean(events[name])),
            "trials": trials,
            "steps": steps,
        }
    if "deepc" in table:
        base = table["deepc"]["mean_step_s"]
        for name in table:
            table[name]["speedup_vs_deepc"] = float(
                base / max(table[name]["mean_step_s"], 1e-12))
    return table
