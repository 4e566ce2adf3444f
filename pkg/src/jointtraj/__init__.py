"""Joint optimization of B-spline k-space trajectories and an unrolled reconstruction."""

from .recon import UnrolledConfig, cs_recon, init_recon, unrolled_recon
from .train import TrainConfig, fit
from .trajectory import HardwareLimits, Trajectory, gen_radial, gen_spiral, penalty

__version__ = "0.1.0"
