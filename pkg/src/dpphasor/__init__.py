"""Differentially private synthetic voltage phasor release.

Modules
-------
grid        feeder description, nodal admittance, Kron reduction
powerflow   Newton solver, Wirtinger Jacobian, volume factor, feasibility audit
loads       load classes, DP log-normal fit, truncated sampling
accountant  privacy bounds, Monte Carlo calibration, empirical LLR oracle
mechanisms  proposed release and Gaussian baselines
evaluation  Wasserstein-1 and the epsilon sweep
"""

from dpphasor.errors import (
    DisconnectedNetworkError,
    DpPhasorError,
    InadmissibleError,
    InputError,
    NumericalError,
    PowerFlowError,
    SamplingError,
    SingularZeroBlockError,
    VoltageStabilityError,
)
from dpphasor.kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DisconnectedNetworkError",
    "DpPhasorError",
    "InadmissibleError",
    "InputError",
    "NumericalError",
    "PowerFlowError",
    "SamplingError",
    "SingularZeroBlockError",
    "VoltageStabilityError",
]
