"""Exception types shared across the package."""


class HybridDynError(Exception):
    """Base class. ``kind`` is the short tag printed by the CLI."""

    kind = "error"


class DimensionMismatch(HybridDynError, ValueError):
    kind = "DimensionMismatch"


class DomainError(HybridDynError, ValueError):
    kind = "DomainError"


class DegenerateMode(HybridDynError, ArithmeticError):
    kind = "DegenerateMode"


class NonSPD(HybridDynError, ArithmeticError):
    kind = "NonSPD"


class FilterUnderflow(HybridDynError, ArithmeticError):
    kind = "FilterUnderflow"


class AllRegimesCollapsed(HybridDynError, RuntimeError):
    kind = "AllRegimesCollapsed"


class DegenerateWeights(HybridDynError, ArithmeticError):
    kind = "DegenerateWeights"


class NonFinite(HybridDynError, ArithmeticError):
    kind = "NonFinite"


class UnsupportedEnv(HybridDynError, ValueError):
    kind = "UnsupportedEnv"


class ParseError(HybridDynError, ValueError):
    kind = "ParseError"
