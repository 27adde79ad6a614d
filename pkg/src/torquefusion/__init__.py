"""Joint-torque estimation for robots without torque sensors.

The library fuses encoder, motor-current, force-torque, accelerometer and
gyroscope streams through an unscented Kalman filter over rigid-body
dynamics, and ships a two-level torque-control loop plus a simulated plant
to validate the estimates end to end.
"""

from .model import (KinematicModel, ModelError, ModelSemanticError,
                    ModelSyntaxError, load_model, parse_model,
                    serialize_model, validate_model)
from .dynamics import (DynamicsError, RigidTransform, RobotState, Wrench,
                       forward_dynamics, mass_matrix, rnea)
from .friction import (FrictionFit, FrictionParams, FrictionSample,
                       IdentifiabilityError, friction_torque,
                       identify_friction, load_samples_csv,
                       save_samples_csv)
from .ukf import GaussianBelief, NoiseModel, UkfConfig, UkfError
from .estimator import (EstimatorError, EstimatorOutput, NoiseConfig,
                        TorqueEstimator, TuneReport, rnea_baseline,
                        tune_covariances)
from .control import (CartesianTask, ControlError, HlcOptions, HlcSolution,
                      JointRegularizationTask, LowLevelGains, solve_hlc,
                      low_level_step)
from .simulation import (ContactEvent, RunLog, Scenario, ScenarioError,
                         ScenarioResult, SensorNoiseSpec, SimulationError,
                         compute_rmse, load_scenario, run_scenario)

__version__ = "0.1.0"

__all__ = [
    "KinematicModel", "ModelError", "ModelSemanticError", "ModelSyntaxError",
    "load_model", "parse_model", "serialize_model", "validate_model",
    "DynamicsError", "RigidTransform", "RobotState", "Wrench",
    "forward_dynamics", "mass_matrix", "rnea",
    "FrictionFit", "FrictionParams", "FrictionSample", "IdentifiabilityError",
    "friction_torque", "identify_friction", "load_samples_csv",
    "save_samples_csv",
    "GaussianBelief", "NoiseModel", "UkfConfig", "UkfError",
    "EstimatorError", "EstimatorOutput", "NoiseConfig", "TorqueEstimator",
    "TuneReport", "rnea_baseline", "tune_covariances",
    "CartesianTask", "ControlError", "HlcOptions", "HlcSolution",
    "JointRegularizationTask", "LowLevelGains", "solve_hlc",
    "low_level_step",
    "ContactEvent", "RunLog", "Scenario", "ScenarioError", "ScenarioResult",
    "SensorNoiseSpec", "SimulationError", "compute_rmse", "load_scenario",
    "run_scenario",
]
