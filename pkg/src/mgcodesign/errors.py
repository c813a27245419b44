"""Exception hierarchy shared across the package."""


class MgCodesignError(Exception):
    """Base class for all package errors."""


class ModelError(MgCodesignError):
    """Invalid microgrid description."""


class NonPositiveParameterError(ModelError):
    """An electrical parameter that must be strictly positive is not."""

    def __init__(self, field: str, value: float, where: str = ""):
        self.field = field
        self.value = value
        self.where = where
        loc = f" at {where}" if where else ""
        super().__init__(f"parameter {field!r}{loc} must be > 0, got {value!r}")


class DuplicateLineEndpointsError(ModelError):
    """A line connects a generator to itself."""


class DisconnectedGraphError(ModelError):
    """The generator/line graph is not connected."""


class CplVoltageError(MgCodesignError):
    """Voltage too low to evaluate a constant-power load term."""

    def __init__(self, voltage: float, v_min: float, dg: int | None = None):
        self.voltage = voltage
        self.v_min = v_min
        self.dg = dg
        where = f" (generator {dg})" if dg is not None else ""
        super().__init__(
            f"voltage {voltage:.6g} V below CPL floor {v_min:.6g} V{where}"
        )


class SupplyRateError(MgCodesignError):
    """Ill-formed supply-rate request."""


class NonPositiveGammaError(SupplyRateError):
    """L2-gain supply rates need gamma > 0."""


class OutputPenaltyNotNegativeError(SupplyRateError):
    """Local synthesis needs the output-output supply block to be negative definite."""


class SolverError(MgCodesignError):
    """The conic solver failed for numerical or internal reasons.

    Distinct from certified infeasibility, which is a result, not an error.
    """

    def __init__(self, message: str, status: str = "", diagnostics: dict | None = None):
        self.status = status
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class InfeasibleError(MgCodesignError):
    """A synthesis stage is infeasible (certified by the solver or by closed forms)."""

    def __init__(self, message: str, stage: str = "", detail: dict | None = None):
        self.stage = stage
        self.detail = detail or {}
        super().__init__(message)


class StructureViolationError(MgCodesignError):
    """A gain matrix has nonzeros outside its admissible sparsity pattern."""


class AssumptionViolatedError(MgCodesignError):
    """A standing assumption of the topology-synthesis result does not hold."""


class UnknownEntryError(MgCodesignError):
    """An L1 objective term references an undeclared matrix-variable entry."""


class NonFiniteStateError(MgCodesignError):
    """Simulation produced NaN/Inf state (divergence detector)."""

    def __init__(self, t: float):
        self.t = t
        super().__init__(f"non-finite state at t = {t:.6g} s")


class ZeroDisturbanceEnergyError(MgCodesignError):
    """Empirical gain is undefined without disturbance energy."""


class DisconnectsGraphError(MgCodesignError):
    """Removing this generator would disconnect the remaining network."""


class BundleMismatchError(MgCodesignError):
    """Controller bundle does not match the configured microgrid (hash check)."""


class ConfigError(MgCodesignError):
    """Configuration file violates the documented schema."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        where = f" at {path}" if path else ""
        super().__init__(f"{message}{where}")
