"""Constrained LQR on maximal-coordinate rigid-body dynamics."""

from .bodies import (Body, Joint, Mechanism, MechanismState, Multipliers,
                     default_state, load_mechanism, mechanism_from_dict,
                     mechanism_to_dict, retract, save_mechanism,
                     tangent_error)
from .dynamics import (constraint_jacobian, evaluate_constraints,
                       gravity_compensation, project_to_constraints,
                       project_velocities, step, step_residual, total_energy)
from .errors import (AssemblyFailure, ChartSingularity, InconsistentNominal,
                     MaxlqrError, NewtonDivergence, NoConvergence,
                     SingularDynamicsJacobian, SingularGC,
                     SingularInnerMatrix, SingularKKT, SingularSaddle,
                     Unactuatable)
from .experiments import (BasinConfig, Outcome, TrackingConfig,
                          TrajectoryRecord, basin_config,
                          basin_of_attraction, load_trajectory,
                          make_open_loop_nominal, perturb_mechanism,
                          regulator, regulator_gains, save_trajectory,
                          simulate_closed_loop, swing_nominal, tracker,
                          tracking_config, tracking_experiment,
                          tracking_gains, validate_nominal)
from .linearize import (LinearizedSystem, finite_difference_jacobians,
                        linearize, linearize_trajectory)
from .lqr import GainSet, finite_horizon, infinite_horizon, riccati_step
from .minimal import (MinimalModel, coordinate_map, linearize_minimal,
                      make_minimal, matched_cost_matrix, minimal_gains,
                      minimal_step)
from .systems import System, chart_jacobian, make, matched_cost

__version__ = "0.1.0"
