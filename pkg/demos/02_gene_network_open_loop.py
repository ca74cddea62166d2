"""The benchmark plant: a three-gene repressilator-style network.

Shows the regulatory structure, regenerates the four benchmark operating
points from the model equations, and runs the open-loop baseline (apply
each operating point's steady input, let the plant settle) to get the
reference tracking score every controller has to beat.

Run: python demos/02_gene_network_open_loop.py
"""

import logging

import numpy as np

from deepc_lab.dataset import fit_scaler
from deepc_lab.plants import (
    GRN_INPUT_BOX,
    GrnPlant,
    generate_open_loop,
    grn_benchmark_initial_state,
    grn_benchmark_setpoints,
)
from deepc_lab.runtime import grn_benchmark_schedule, make_controller, rmse, run_closed_loop

logging.basicConfig(level=logging.WARNING)


def main():
    plant = GrnPlant()
    print("mRNA channel i is repressed by protein channel r(i):",
          dict(enumerate((5, 3, 4))))

    print("\nbenchmark operating points (steady input -> protein levels):")
    for i, (u_ss, x_ss) in enumerate(grn_benchmark_setpoints()):
        print(f"  {i}: u_ss={np.round(u_ss, 3)}  proteins={np.round(x_ss[3:], 3)}")

    x0 = grn_benchmark_initial_state()
    print(f"\nstart state (equilibrium at u=0.5): proteins={np.round(x0[3:], 3)}")

    # excitation episode only to fit the output scaler used by the metric
    u, y = generate_open_loop(plant, x0, 2019, 30, GRN_INPUT_BOX, seed=1)
    scaler = fit_scaler(y)
    print(f"output scaler from a {u.length}-step excitation record: "
          f"lo={np.round(scaler.lo, 2)}, hi={np.round(scaler.hi, 2)}")

    sched = grn_benchmark_schedule(100)
    ctl = make_controller("open_loop", sched)
    rec = run_closed_loop(plant, ctl, sched, sched.total_steps, seed=0,
                          x0=x0, T_ini=10, warmup_input=sched.u_ref_at(0))
    print(f"\nopen-loop baseline over {sched.total_steps} steps: "
          f"scaled RMSE = {rmse(rec, scaler):.5f}")
    err = scaler.apply(rec.outputs()) - scaler.apply(rec.output_refs())
    for i in range(4):
        tail = np.abs(err[:, 100 * i + 80:100 * (i + 1)]).mean(axis=1)
        print(f"  segment {i}: last-20-step per-channel |error| "
              f"{np.round(tail, 4)} (scaled)")


if __name__ == "__main__":
    main()
