"""Split-flow latent editing: decompose a target condition, edit along sub-flows, merge by projection and consensus weighting."""
from .editing import (AGGREGATIONS, EditConfig, EditSchedule, RunReport, check_vfa_inequality, flowedit_run,
                      run_edit, run_flowedit, splitflow_run)
from .errors import (ConfigError, DimensionError, DomainError, NetworkError, NumericError, ParseError, SplitFlowError,
                     StateError, TrainingError)
from .fields import (AffineGaussianField, Condition, ConstantShiftField, MlpField, evaluate, evaluate_cfg, load_field,
                     save_field)
from .metrics import background_displacement, energy_distance, mse, psnr, ssim
from .scenes import Attribute, Scene
from .training import TrainConfig, generate, train

__version__ = "0.1.0"

__all__ = [
    "AGGREGATIONS", "EditConfig", "EditSchedule", "RunReport", "check_vfa_inequality", "flowedit_run", "run_edit",
    "run_flowedit", "splitflow_run", "ConfigError", "DimensionError", "DomainError", "NetworkError", "NumericError",
    "ParseError", "SplitFlowError", "StateError", "TrainingError", "AffineGaussianField", "Condition",
    "ConstantShiftField", "MlpField", "evaluate", "evaluate_cfg", "load_field", "save_field",
    "background_displacement", "energy_distance", "mse", "psnr", "ssim", "Attribute", "Scene", "TrainConfig",
    "generate", "train",
]
