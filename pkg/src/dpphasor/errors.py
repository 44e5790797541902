"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: input problems exit 1, numerical
failures exit 2 and privacy inadmissibility exits 3.
"""


class DpPhasorError(Exception):
    """Base class for all package errors."""


class InputError(DpPhasorError, ValueError):
    """Malformed or inconsistent user input (feeder files, panels, configs)."""


class DisconnectedNetworkError(InputError):
    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        listing = "; ".join("{" + ", ".join(c) + "}" for c in self.components)
        super().__init__(f"network is disconnected; components: {listing}")


class NumericalError(DpPhasorError, RuntimeError):
    """A numerical routine failed (singular matrix, non-convergence, ...)."""


class SingularZeroBlockError(NumericalError):
    def __init__(self, island):
        self.island = sorted(island)
        super().__init__(
            "zero-injection block is singular; offending island: "
            + ", ".join(self.island)
        )


class PowerFlowError(NumericalError):
    """Newton iteration did not reach the requested tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class VoltageStabilityError(PowerFlowError):
    """Jacobian singular at an iterate: operating point near the stability limit."""


class SamplingError(NumericalError):
    """Rejection sampler acceptance too low for the requested margins."""


class InadmissibleError(DpPhasorError, ValueError):
    """The admissibility condition alpha < 1/4 (or a bound denominator) fails."""
