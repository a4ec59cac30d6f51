"""Self-contained calibration of elastic robot kinematics from an on-board camera."""

from .model import (
    CameraIntrinsics,
    CameraMount,
    DhParams,
    Joint,
    JointElasticity,
    MarkerMount,
    MeasurementSample,
    ModelError,
    ParamEntry,
    ParameterSpec,
    PoseConfig,
    RobotModel,
    Sphere,
    ThetaRipple,
    load_configs,
    load_document,
    load_model,
    load_samples,
    pack,
    save_configs,
    save_model,
    save_samples,
    unpack,
)
from .kinematics import EquilibriumError, FrameSet, forward_kinematics, gravity_torques, marker_world, solve_equilibrium
from .camera import BehindCameraError, EffectivePixelCovariance, effective_covariance, project, projection_jacobian
from .estimator import (
    CalibrationError,
    CalibrationReport,
    ErrorStats,
    EvaluationResult,
    SolverOptions,
    evaluate,
    measure,
    residuals,
    solve_map,
    split_samples,
)
from .poseplan import VisibilityConstraints, check_visibility, head_sweep, order_tour, sample_configurations
from .synth import PerturbationSpec, cartesian_reference, demo_humanoid, demo_parameter_spec, demo_perturbation, make_ground_truth, simulate_measurements

__version__ = "0.1.0"
