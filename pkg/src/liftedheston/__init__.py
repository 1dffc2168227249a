"""Lifted Heston stochastic-volatility engine.

Pricing through the affine characteristic function and the COS method,
calibration to implied-volatility surfaces, Monte Carlo simulation and
Hurst-index estimation, with the rough and classical Heston models as
benchmarks.
"""

from .calibration import CalibrationResult, CalibrationSpec, ModelFactory, calibrate, calibrate_skew, robustness_experiment
from .charfn import THETA0, ModelParams, charfn_conditional, charfn_heston, charfn_rough, charfn_unconditional, joint_transform
from .errors import ConfigError, LiftedHestonError, NumericalError
from .kernel import LiftConfig, build_lift_config, classical_lift, kernel_l2_distance, optimal_r, rn_sequence
from .pricing import STANDARD_MATURITIES, CosConfig, PricingModel, VolSurface, atm_skew, cos_call_price, implied_vol, surface_generate, surface_mse
from .roughness import HurstReport, VolSeries, autocorr_hurst, qvariation, subsample
from .simulation import PathSet, mc_call_price, simulate_paths

__version__ = "0.1.0"
