"""Exception hierarchy shared across the package."""


class ElectrolyteLoopError(Exception):
    """Base class for all package errors."""

    code = "error"


class DomainError(ElectrolyteLoopError, ValueError):
    code = "invalid_composition"


class UndefinedRatioError(DomainError):
    code = "undefined_ratio"


class InfeasibleDoseError(ElectrolyteLoopError):
    code = "infeasible_dose"


class InventoryError(ElectrolyteLoopError):
    code = "inventory_exhausted"


class CalibrationError(ElectrolyteLoopError):
    """Surface calibration failed; ``residuals`` maps anchor label to error."""

    code = "calibration_failure"

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = dict(residuals or {})


class UnreliableSpectrumError(ElectrolyteLoopError):
    code = "instrument_fault"


class OpenCircuitError(ElectrolyteLoopError):
    code = "open_circuit"


class GPFitError(ElectrolyteLoopError):
    code = "gp_fit_error"


class CampaignComplete(ElectrolyteLoopError):
    """Raised when no unmeasured grid points remain."""

    code = "campaign_complete"


class ProtocolError(ElectrolyteLoopError, ValueError):
    code = "malformed_request"


class ClientError(ElectrolyteLoopError):
    code = "transport_failure"
