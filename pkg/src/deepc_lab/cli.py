"""Command-line front end: data generation through closed-loop benchmarking.

Every subcommand validates dimension fingerprints across its input artifacts
and fails fast, naming the mismatched pair. Exit code 0 means all
post-conditions held; any failure prints one machine-parsable line
``error: <Kind>: <message>`` on stderr and returns 1.
"""

import os

# honor the thread cap before numpy initializes its BLAS pools
_cap = os.environ.get("DEEPC_LAB_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import Dataset, build_dataset, fit_scaler, Scaler, train_val_split
from .deepc import DeePCConfig
from .errors import ConfigError, DeepcLabError
from .hankel import (HankelSet, Trajectory, is_persistently_exciting,
                     partition, read_trajectory_csv, write_trajectory_csv)
from .operator_net import LossWeights, OperatorNetwork, TrainConfig, train
from .plants import (GrnPlant, LtiPlant, generate_open_loop,
                     grn_benchmark_initial_state, load_plant_config)
from .runtime import (CONTROLLER_KINDS, SetpointSchedule,
                      grn_benchmark_schedule, make_controller, rmse,
                      run_closed_loop, time_comparison)

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------- plumbing

def _load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8")) if path else {}


def _cfg_dict(cfg) -> dict:
    out = {}
    for field in dataclasses.fields(cfg):
        v = getattr(cfg, field.name)
        out[field.name] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


def _write_meta(out_path, effective: dict) -> None:
    """Sidecar metadata for outputs whose own format has no config slot."""
    Path(str(out_path) + ".meta.json").write_text(
        json.dumps(effective, indent=2), encoding="utf-8")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _deepc_config(hankel: HankelSet, cfg_json: dict, input_box, output_box,
                  overrides: dict | None = None) -> DeePCConfig:
    """Boxes come from the plant config unless the JSON config pins them."""
    section = dict(cfg_json.get("deepc", {}))
    kw = {
        "T": hankel.T, "T_ini": hankel.T_ini, "N_p": hankel.N_p,
    }
    if input_box is not None:
        kw["u_lb"], kw["u_ub"] = input_box
    if output_box is not None:
        kw["y_lb"], kw["y_ub"] = output_box
    for key, val in section.items():
        if key in ("T", "T_ini", "N_p"):
            continue  # dimensions always come from the data record
        kw[key] = np.asarray(val, dtype=float) if key.endswith(("_lb", "_ub")) else val
    for key, val in (overrides or {}).items():
        if val is not None:
            kw[key] = val
    for bound in ("u_lb", "u_ub", "y_lb", "y_ub"):
        _require(bound in kw, f"no {bound} available: pass a plant config or "
                              f"set deepc.{bound} in the config file")
        kw[bound] = np.broadcast_to(
            np.atleast_1d(np.asarray(kw[bound], dtype=float)),
            ((hankel.n_u if bound[0] == "u" else hankel.n_y),)).copy()
    return DeePCConfig(**kw)


def _train_config(cfg_json: dict, args) -> TrainConfig:
    section = dict(cfg_json.get("train", {}))
    section.pop("val_fraction", None)
    section.pop("hidden", None)
    allowed = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(section) - allowed
    _require(not unknown, f"unknown train config keys: {sorted(unknown)}")
    for key in ("epochs", "batch", "learning_rate", "seed"):
        val = getattr(args, key if key != "learning_rate" else "lr", None)
        if val is not None:
            section[key] = val
    return TrainConfig(**section)


def _loss_weights(cfg: DeePCConfig, cfg_json: dict) -> LossWeights:
    w = LossWeights.from_config(cfg)
    section = cfg_json.get("loss", {})
    unknown = set(section) - {"q", "r", "p_u", "p_y"}
    _require(not unknown, f"unknown loss config keys: {sorted(unknown)}")
    if section:
        w = dataclasses.replace(w, **{k: float(v) for k, v in section.items()})
    return w


def _plant_and_boxes(args):
    _require(getattr(args, "plant", None) is not None,
             "this subcommand needs --plant <config.json>")
    plant, input_box, output_box = load_plant_config(args.plant)
    return plant, input_box, output_box


def _initial_state(plant, plant_cfg_path):
    raw = _load_json(plant_cfg_path)
    if "x0" in raw:
        return np.asarray(raw["x0"], dtype=float)
    if isinstance(plant, GrnPlant):
        return grn_benchmark_initial_state(plant.params)
    if isinstance(plant, LtiPlant):
        return np.zeros(plant.n_x)
    raise ConfigError("plant config must provide x0 for this plant kind")


def _load_schedule(spec: str) -> SetpointSchedule:
    if spec == "grn-benchmark":
        return grn_benchmark_schedule()
    return SetpointSchedule.load(spec)


def _check_model_record(net: OperatorNetwork, model_path, hankel: HankelSet,
                        hankel_path) -> None:
    _require(net.fingerprint == hankel.fingerprint(),
             f"model {model_path} (fingerprint {net.fingerprint}) does not "
             f"match data record {hankel_path} "
             f"(fingerprint {hankel.fingerprint()})")


def _check_dataset_record(ds: Dataset, data_path, hankel: HankelSet,
                          hankel_path) -> None:
    got = (ds.n_u, ds.n_y, ds.T_ini, ds.N_p)
    want = (hankel.n_u, hankel.n_y, hankel.T_ini, hankel.N_p)
    _require(got == want,
             f"dataset {data_path} dims (n_u,n_y,T_ini,N_p)={got} do not "
             f"match data record {hankel_path} dims {want}")


def _check_schedule_record(sched: SetpointSchedule, sched_path,
                           hankel: HankelSet, hankel_path) -> None:
    _require((sched.n_u, sched.n_y) == (hankel.n_u, hankel.n_y),
             f"schedule {sched_path} channels (n_u,n_y)=({sched.n_u},{sched.n_y}) "
             f"do not match data record {hankel_path} "
             f"({hankel.n_u},{hankel.n_y})")


# -------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    plant, input_box, _ = _plant_and_boxes(args)
    _require(plant is not None, "external plants cannot be simulated; "
                                "use kind grn or lti")
    _require(input_box is not None, "plant config must declare input_box")
    x0 = _initial_state(plant, args.plant)
    u, y = generate_open_loop(plant, x0, args.steps, args.hold, input_box,
                              args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trajectory_csv(out / "u.csv", u, "u")
    write_trajectory_csv(out / "y.csv", y, "y")

    # richest excitation order this record certifies (monotone in the order)
    max_order = 0
    cap = (args.steps + 1) // (plant.n_u + 1)
    for order in range(1, cap + 1):
        if not is_persistently_exciting(u, order):
            break
        max_order = order
    report = {
        "T": args.steps, "n_u": plant.n_u, "n_y": plant.n_y,
        "max_pe_order": max_order,
        "config": {"plant": args.plant, "steps": args.steps,
                   "hold": args.hold, "seed": args.seed},
    }
    (out / "pe_report.json").write_text(json.dumps(report, indent=2),
                                        encoding="utf-8")
    print(f"wrote {out}/u.csv {out}/y.csv (T={args.steps}, "
          f"max PE order {max_order})")
    return 0


def cmd_build_hankel(args) -> int:
    u = read_trajectory_csv(args.u)
    y = read_trajectory_csv(args.y)
    _require(u.length == y.length,
             f"input record {args.u} has T={u.length} but output record "
             f"{args.y} has T={y.length}")
    if args.scaler:
        # same output units as the training windows the network will see
        y = Trajectory(Scaler.load(args.scaler).apply(y.data))
    if args.T is not None:
        _require(args.T <= u.length,
                 f"requested T={args.T} exceeds the {u.length} samples in {args.u}")
        u = u.slice(0, args.T)
        y = y.slice(0, args.T)
    hs = partition(u, y, args.tini, args.np)
    order = args.tini + args.np + args.nx
    if not is_persistently_exciting(u, order):
        logger.warning("input data is not persistently exciting at order "
                       "%d (T_ini+N_p+n_x); downstream guarantees are void", order)
    hs.save(args.out)
    _write_meta(args.out, {"fingerprint": hs.fingerprint(),
                           "config": {"u": args.u, "y": args.y, "T": hs.T,
                                      "tini": args.tini, "np": args.np}})
    print(f"wrote {args.out} (width {hs.width}, fingerprint {hs.fingerprint()})")
    return 0


def cmd_make_dataset(args) -> int:
    u = read_trajectory_csv(args.u)
    y = read_trajectory_csv(args.y)
    _require(u.length == y.length,
             f"input record {args.u} has T={u.length} but output record "
             f"{args.y} has T={y.length}")
    scaler = fit_scaler(y)
    ds = build_dataset([(u, Trajectory(scaler.apply(y.data)))],
                       args.tini, args.np)
    ds.save(args.out)
    scaler_path = args.scaler or str(args.out) + ".scaler.json"
    scaler.save(scaler_path)
    _write_meta(args.out, {"config": {"u": args.u, "y": args.y,
                                      "tini": args.tini, "np": args.np,
                                      "samples": len(ds.samples),
                                      "scaled_outputs": True,
                                      "scaler": str(scaler_path)}})
    print(f"wrote {args.out} ({len(ds.samples)} samples) and {scaler_path}")
    return 0


def cmd_train(args) -> int:
    cfg_json = _load_json(args.cfg)
    hs = HankelSet.load(args.hankel)
    ds = Dataset.load(args.data)
    _check_dataset_record(ds, args.data, hs, args.hankel)

    input_box = output_box = None
    if args.plant:
        _, input_box, output_box = load_plant_config(args.plant)
    cfg = _deepc_config(hs, cfg_json, input_box, output_box)
    weights = _loss_weights(cfg, cfg_json)
    tc = _train_config(cfg_json, args)
    hidden = tuple(cfg_json.get("train", {}).get("hidden", (150, 150)))
    val_fraction = float(cfg_json.get("train", {}).get("val_fraction", 0.0))

    net = OperatorNetwork.create(args.variant, hs.n_u, hs.n_y, hs.T_ini,
                                 hs.N_p, hs.width, hidden=hidden, seed=tc.seed)
    val = None
    if val_fraction > 0:
        ds, val = train_val_split(ds, val_fraction, seed=tc.seed)
    history = train(net, ds, hs, weights, tc, val=val)
    net.save(args.out)
    log_path = args.log or str(args.out) + ".log.csv"
    history.write_csv(log_path)
    effective = {"variant": args.variant, "hidden": list(hidden),
                 "val_fraction": val_fraction, "train": _cfg_dict(tc),
                 "loss": {"q": weights.q if np.isscalar(weights.q) else np.asarray(weights.q).tolist(),
                          "r": weights.r if np.isscalar(weights.r) else np.asarray(weights.r).tolist(),
                          "p_u": weights.p_u, "p_y": weights.p_y},
                 "deepc": _cfg_dict(cfg), "fingerprint": hs.fingerprint()}
    _write_meta(args.out, effective)
    final = history.train_loss[-1] if history.train_loss else float("nan")
    print(f"wrote {args.out} (final training loss {final:.6g}) and {log_path}")
    return 0


_CLI_KINDS = {"deepc": "deepc", "deep": "deep_deepc", "guarded": "guarded",
              "open": "open_loop"}


def _resolve_kind(controller: str, variant: str) -> str:
    _require(controller in _CLI_KINDS,
             f"unknown controller {controller!r}, expected one of "
             f"{sorted(_CLI_KINDS)}")
    if controller in ("deep", "guarded"):
        return f"{_CLI_KINDS[controller]}_{variant}"
    return _CLI_KINDS[controller]


def cmd_run(args) -> int:
    cfg_json = _load_json(args.cfg)
    plant, input_box, output_box = _plant_and_boxes(args)
    _require(plant is not None, "external plants cannot be simulated")
    hs = HankelSet.load(args.hankel)
    sched = _load_schedule(args.schedule)
    _check_schedule_record(sched, args.schedule, hs, args.hankel)
    cfg = _deepc_config(hs, cfg_json, input_box, output_box)

    kind = _resolve_kind(args.controller, args.variant)
    net = None
    if kind not in ("deepc", "open_loop"):
        _require(args.model is not None,
                 f"controller {args.controller} needs --model")
        net = OperatorNetwork.load(args.model)
        _check_model_record(net, args.model, hs, args.hankel)
    scaler = Scaler.load(args.scaler) if args.scaler else None
    controller = make_controller(kind, sched, hankel=hs, cfg=cfg, net=net,
                                 scaler=scaler)

    steps = args.steps if args.steps is not None else sched.total_steps
    x0 = _initial_state(plant, args.plant)
    record = run_closed_loop(plant, controller, sched, steps,
                             seed=args.seed, x0=x0)
    record.meta.update({
        "controller": kind, "schedule": args.schedule, "steps": steps,
        "model": args.model, "scaler": args.scaler,
        "fingerprint": hs.fingerprint(),
        "config": {"deepc": _cfg_dict(cfg)},
    })
    record.to_csv(args.out)
    summary_path = args.summary or str(args.out) + ".summary.json"
    record.save_summary(summary_path, scaler)
    summary = record.summary(scaler)
    tail = (f", scaled RMSE {summary['rmse_scaled']:.5f}"
            if "rmse_scaled" in summary else "")
    print(f"wrote {args.out} and {summary_path} "
          f"(event rate {record.event_rate:.3f}{tail})")
    return 0


def cmd_bench(args) -> int:
    cfg_json = _load_json(args.cfg)
    plant, input_box, output_box = _plant_and_boxes(args)
    _require(plant is not None, "external plants cannot be simulated")
    hs = HankelSet.load(args.hankel)
    sched = _load_schedule(args.schedule)
    _check_schedule_record(sched, args.schedule, hs, args.hankel)
    cfg = _deepc_config(hs, cfg_json, input_box, output_box)

    nets: list[tuple[str, OperatorNetwork]] = []
    for path in args.model or []:
        net = OperatorNetwork.load(path)
        _check_model_record(net, path, hs, args.hankel)
        nets.append((path, net))

    kinds = [k.strip() for k in args.controllers.split(",") if k.strip()]
    _require(bool(kinds), "no controllers requested")
    scaler = Scaler.load(args.scaler) if args.scaler else None
    factories = {}
    for kind in kinds:
        _require(kind in CONTROLLER_KINDS,
                 f"unknown controller kind {kind!r}, expected one of "
                 f"{CONTROLLER_KINDS}")
        net = None
        if kind.startswith(("deep_deepc", "guarded")):
            variant = kind.rsplit("_", 1)[-1]
            match = [n for _, n in nets if n.variant == variant]
            _require(bool(match), f"controller {kind} needs a variant "
                                  f"{variant} model; pass it via --model")
            net = match[0]
        factories[kind] = (lambda k=kind, n=net:
                           make_controller(k, sched, hankel=hs, cfg=cfg, net=n,
                                           scaler=scaler))

    x0 = _initial_state(plant, args.plant)
    table = time_comparison(factories, plant, x0, sched, trials=args.trials,
                            steps=args.steps, seed=args.seed)
    payload = {"table": table,
               "config": {"controllers": kinds, "trials": args.trials,
                          "steps": args.steps, "seed": args.seed,
                          "schedule": args.schedule,
                          "fingerprint": hs.fingerprint(),
                          "deepc": _cfg_dict(cfg)}}
    Path(args.out).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    lines = [f"{name}: {row['mean_step_s']:.6f} s/step"
             for name, row in table.items()]
    print(f"wrote {args.out} ({'; '.join(lines)})")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="deepc-lab",
        description="Data-driven predictive control pipeline")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true",
                   help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate open-loop excitation data")
    g.add_argument("--plant", required=True)
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--hold", type=int, default=5)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-hankel", help="partition a record into past/future blocks")
    b.add_argument("--u", required=True)
    b.add_argument("--y", required=True)
    b.add_argument("--T", type=int, default=None,
                   help="use only the first T samples")
    b.add_argument("--tini", type=int, required=True)
    b.add_argument("--np", type=int, required=True)
    b.add_argument("--nx", type=int, default=0,
                   help="state dimension for the excitation-order warning")
    b.add_argument("--scaler", default=None,
                   help="scale outputs with this fitted scaler first")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_hankel)

    m = sub.add_parser("make-dataset", help="extract training windows and fit the output scaler")
    m.add_argument("--u", required=True)
    m.add_argument("--y", required=True)
    m.add_argument("--tini", type=int, required=True)
    m.add_argument("--np", type=int, required=True)
    m.add_argument("--scaler", default=None)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_dataset)

    t = sub.add_parser("train", help="fit the operator network")
    t.add_argument("--variant", choices=("I", "II"), required=True)
    t.add_argument("--hankel", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--cfg", default=None, help="JSON config file")
    t.add_argument("--plant", default=None,
                   help="plant config supplying default boxes")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--log", default=None, help="training-log CSV path")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", help="closed-loop run with record export")
    r.add_argument("--controller", choices=sorted(_CLI_KINDS), required=True)
    r.add_argument("--variant", choices=("I", "II"), default="I")
    r.add_argument("--model", default=None)
    r.add_argument("--hankel", required=True)
    r.add_argument("--plant", required=True)
    r.add_argument("--schedule", required=True,
                   help="schedule JSON, or the literal grn-benchmark")
    r.add_argument("--cfg", default=None)
    r.add_argument("--scaler", default=None,
                   help="output scaler JSON; the controller then works in "
                        "scaled output units (pass it whenever the data "
                        "record was built with one) and the summary "
                        "reports scaled RMSE")
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--summary", default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    n = sub.add_parser("bench", help="per-step timing comparison")
    n.add_argument("--controllers", default="deepc,deep_deepc_I",
                   help="comma-separated controller kinds")
    n.add_argument("--model", action="append", default=None,
                   help="model file; repeat for multiple variants")
    n.add_argument("--hankel", required=True)
    n.add_argument("--plant", required=True)
    n.add_argument("--schedule", required=True)
    n.add_argument("--cfg", default=None)
    n.add_argument("--scaler", default=None,
                   help="output scaler JSON matching the data record")
    n.add_argument("--trials", type=int, default=10)
    n.add_argument("--steps", type=int, default=100)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if _cap is not None and (not _cap.isdigit() or int(_cap) < 1):
        print(f"error: ConfigError: DEEPC_LAB_THREADS must be a positive "
              f"integer, got {_cap!r}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except DeepcLabError as exc:
        line = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        print(f"error: {line}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: OSError: {exc}".replace("\n", " "), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
