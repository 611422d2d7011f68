"""Exception types raised across the package.

Every error carries a stable ``code`` string so the CLI can emit
machine-readable failure records.
"""


class HsrdmError(Exception):
    """Base class; ``code`` identifies the failure kind."""

    code = "Error"

    def __init__(self, message=""):
        super().__init__(message or self.code)


class NonFiniteUtility(HsrdmError, ValueError):
    code = "NonFiniteUtility"


class BoundarySimplexPoint(HsrdmError, ValueError):
    code = "BoundarySimplexPoint"


class TooFewPoints(HsrdmError, ValueError):
    code = "TooFewPoints"


class NonSquareConfusion(HsrdmError, ValueError):
    code = "NonSquareConfusion"


class DegenerateCovariance(HsrdmError, ValueError):
    code = "DegenerateCovariance"


class UnidentifiableRegression(HsrdmError, ValueError):
    code = "UnidentifiableRegression"


class EmptyWeightSet(HsrdmError, ValueError):
    code = "EmptyWeightSet"


class FeatureDimMismatch(HsrdmError, ValueError):
    code = "FeatureDimMismatch"


class MissingEntityIndex(HsrdmError, ValueError):
    code = "MissingEntityIndex"


class ImpossibleEvidence(HsrdmError, ValueError):
    code = "ImpossibleEvidence"


class CrossBoundarySlice(HsrdmError, ValueError):
    code = "CrossBoundarySlice"


class NoContextAvailable(HsrdmError, ValueError):
    code = "NoContextAvailable"


class NoDisplacement(HsrdmError, ValueError):
    code = "NoDisplacement"


class EmptyDataset(HsrdmError, ValueError):
    code = "EmptyDataset"


class ConfigError(HsrdmError, ValueError):
    """Config parse/validation failure; ``violations`` lists every problem."""

    code = "ConfigError"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
