"""Exception hierarchy shared by all modules.

Numerical failures derive from :class:`NumericalFailure` so the CLI can map
them to exit status 3; configuration problems derive from
:class:`ConfigError` (exit status 2).
"""


class ConicWignerError(Exception):
    """Base class for every error raised by the package."""


class NumericalFailure(ConicWignerError):
    pass


class ConfigError(ConicWignerError):
    pass


class OutOfBox(NumericalFailure):
    """A point left the declared working box."""


class OnSingularSet(NumericalFailure):
    """A smooth-only quantity was requested at a point with ``|g(x)|`` below tolerance."""


class NonGenericPoint(NumericalFailure):
    """The point lies on S but not on S* (``|dg(x) xi|`` below tolerance)."""


class NonGenericCrossing(NonGenericPoint):
    """A trajectory reached S away from S*; the continuation is not unique."""

    def __init__(self, message, event=None, particle_index=None):
        super().__init__(message)
        self.event = event
        self.particle_index = particle_index


class StepSizeUnderflow(NumericalFailure):
    pass


class LaunchWindowTooLarge(NumericalFailure):
    """The fixed-point iteration for the desingularized system left its contraction ball."""


class UnderResolved(NumericalFailure):
    pass


class SupportClipped(NumericalFailure):
    pass


class ZoomWindowExceedsGrid(NumericalFailure):
    pass


class ScaleOrderingViolated(ConicWignerError, ValueError):
    pass


class SpecUnsupported(ConicWignerError, ValueError):
    pass


class ParseError(ConfigError):
    pass


class SchemaViolation(ConfigError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"{path}: {msg}" for path, msg in self.violations]
        super().__init__("schema violations:\n  " + "\n  ".join(lines))


class ResolutionRuleViolation(ConfigError):
    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"[{rule}] {msg}" for rule, msg in self.violations]
        super().__init__("resolution rule violations:\n  " + "\n  ".join(lines))
