"""Data-enabled predictive control with a learned operator network.

The pipeline: record open-loop data from a plant, partition it into
past/future block-Hankel sections, either solve the receding-horizon QP
directly (conventional route) or train a network that maps the current
context to the operator vector (learned route), and close the loop with an
optional event-triggered projection guard.
"""

__version__ = "0.1.0"

from .constraint_guard import ConstraintGuard, guarded_control, project, violates
from .dataset import (Dataset, Scaler, TrainingSample, build_dataset,
                      extract_samples, fit_scaler, train_val_split)
from .deepc import (DeePCConfig, DeepcController, QpProblem, QpSolver,
                    deepc_step, solve_qp)
from .errors import (ConfigError, ConvergenceError, DeepcLabError,
                     DegenerateChannelError, DimensionError, NumericError,
                     TrainingError)
from .hankel import (HankelSet, Trajectory, build_hankel,
                     dimension_fingerprint, is_persistently_exciting,
                     partition, read_trajectory_csv, write_trajectory_csv)
from .operator_net import (LossWeights, OperatorNetwork, TrainConfig,
                           build_context, loss, soft_penalty, train)
from .plants import (GrnParams, GrnPlant, LtiPlant, find_steady_state,
                     generate_open_loop, grn_benchmark_initial_state,
                     grn_benchmark_setpoints, is_controllable,
                     load_plant_config, random_controllable_lti)
from .runtime import (ControllerContext, RunRecord, SetpointSchedule,
                      grn_benchmark_schedule, make_controller, rmse,
                      run_closed_loop, time_comparison)
