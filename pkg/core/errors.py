"""
Exception families shared by the scengen library.

Library code raises these; only the command-line entry point turns them into
process exit statuses (the ``exit_code`` attribute).
"""


class ScenGenError(Exception):
    """Base class for every error raised by scengen"""
    exit_code = 1


# Configuration -------------------------------------------------------------

class ConfigError(ScenGenError):
    exit_code = 2


# Data ----------------------------------------------------------------------

class DataError(ScenGenError):
    exit_code = 3


class ForwardFillError(DataError):
    def __init__(self, series_name):
        super().__init__(f"series '{series_name}' starts with a gap; nothing to fill forward from")
        self.series_name = series_name


class TransitionDomainError(DataError):
    pass


class AffineScaleError(DataError):
    pass


class AssemblyError(DataError):
    pass


class EvaluationError(DataError):
    pass


# Numerics ------------------------------------------------------------------

class NumericError(ScenGenError):
    exit_code = 4


class ShapeMismatchError(NumericError):
    def __init__(self, kind, dims):
        super().__init__(f"{kind}: incompatible shapes {dims}")
        self.kind = kind
        self.dims = dims


class NumericOverflowError(NumericError):
    def __init__(self, kind):
        super().__init__(f"{kind}: produced non-finite values")
        self.kind = kind


class NonScalarLossError(NumericError):
    pass


class EmptyTapeError(NumericError):
    pass


class ShapeAuditError(NumericError):
    def __init__(self, network_id, layer_name, declared, computed):
        super().__init__(
            f"{network_id}: layer '{layer_name}' declares output {declared} but computes {computed}"
        )
        self.network_id = network_id
        self.layer_name = layer_name


class NetworkModeError(NumericError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(f"{message} (last good checkpoint: {last_checkpoint or 'none'})")
        self.last_checkpoint = last_checkpoint


class GradCheckFailed(NumericError):
    pass


# Scenarios -----------------------------------------------------------------

class InfeasibleScenarioError(ScenGenError):
    exit_code = 5


class PositivityError(ScenGenError):
    """A relative-kind level would become non-positive under the star operator"""
    exit_code = 4

    def __init__(self, message, feature_index=None, step=None):
        super().__init__(message)
        self.feature_index = feature_index
        self.step = step


# Model bundles -------------------------------------------------------------

class BundleError(ScenGenError):
    exit_code = 6


class BundleVersionError(BundleError):
    pass


class BundleShapeError(BundleError):
    def __init__(self, layer, expected, found):
        super().__init__(f"tensor '{layer}' has shape {found}, network layout requires {expected}")
        self.layer = layer


class BundleChecksumError(BundleError):
    pass


class MissingBundlePartError(BundleError):
    pass
