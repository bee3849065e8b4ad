"""Exception types shared across the toolkit."""


class MapfGnnError(Exception):
    """Base class for all toolkit errors."""


class InfeasibleCase(MapfGnnError):
    """No valid start/goal assignment exists for the requested case."""


class OutOfBounds(MapfGnnError):
    """A transition left the map; indicates a shielding bug upstream."""


class Unreachable(MapfGnnError):
    """Low-level search exhausted its horizon without reaching the goal."""


class SolverTimeout(MapfGnnError):
    """Wall-clock budget exceeded while solving an instance."""


class PlanInfeasible(MapfGnnError):
    """The instance provably has no collision-free solution."""


class TooLarge(MapfGnnError):
    """Joint state space exceeds the enforced oracle bound."""


class ShapeMismatch(MapfGnnError):
    """Tensor arguments have incompatible shapes."""


class NonFiniteGradient(MapfGnnError):
    """A gradient contained NaN or Inf; the optimizer step was aborted."""


class EmptyInput(MapfGnnError):
    """An aggregate operation received no data."""


class ParseError(MapfGnnError):
    """A persisted file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")


class VersionMismatch(MapfGnnError):
    """File schema tag does not match what this build writes."""


class ConfigError(MapfGnnError):
    """Invalid or contradictory run configuration."""
