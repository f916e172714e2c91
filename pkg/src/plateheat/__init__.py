"""Zero-data thermal-field surrogate for bare-plate laser powder bed fusion.

A parametric physics-informed network predicts transient temperature fields
T(x, y, z, t; rho, cp, k) for a moving Gaussian laser on a bare plate,
trained purely from heat-equation, boundary, and initial residuals.  The
package carries its own derivative engine, hybrid Adam/L-BFGS trainer,
collocation sampler, and an explicit finite-difference reference solver for
validation.
"""

from .autodiff import NonFiniteLoss, Tape, fd_check
from .estimator import NotFittedError, ThermalFieldRegressor
from .model import (ARCHITECTURES, SCALING_MODES, Normalizer, ScalingConfig,
                    init_params, load_params, predict_temperatures,
                    save_params)
from .oracle import (ProbeHistory, TemperatureField, analytic_suite,
                     fdm_solve, probe, relative_l2)
from .physics import (MaterialProps, MaterialSpace, ProcessConfig,
                      laser_flux, load_material_library, resolve_material,
                      rosenthal_tmax)
from .sampling import (BatchSpec, CollocationSet, SamplingProfile,
                       build_collocation, draw_batch, dump_collocation,
                       get_profile, load_collocation, resample_pools)
from .train import LossWeights, OptimizerConfig, TrainRecord, train

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "SCALING_MODES",
    "BatchSpec", "CollocationSet", "LossWeights", "MaterialProps",
    "MaterialSpace", "NonFiniteLoss", "Normalizer", "NotFittedError",
    "OptimizerConfig", "ProbeHistory", "ProcessConfig", "SamplingProfile",
    "ScalingConfig", "Tape", "TemperatureField", "ThermalFieldRegressor",
    "TrainRecord", "analytic_suite", "build_collocation", "draw_batch",
    "dump_collocation", "fd_check", "fdm_solve", "get_profile",
    "init_params", "laser_flux", "load_collocation", "load_material_library",
    "load_params", "predict_temperatures", "probe", "relative_l2",
    "resample_pools", "resolve_material", "rosenthal_tmax", "save_params",
    "train",
]
