class DbgcError(Exception):
    pass


class ConfigurationError(DbgcError, ValueError):
    pass


# Data ingestion
class MissingChannelError(DbgcError, FileNotFoundError):
    pass


class ShapeMismatchError(DbgcError, ValueError):
    pass


class CorruptDataError(DbgcError, ValueError):
    pass


class InvalidSpecError(DbgcError, ValueError):
    pass


class FeatureStateError(DbgcError, ValueError):
    pass


class ClassTooSmallError(DbgcError, ValueError):
    pass


# Segmentation / graph / networks
class InvalidKError(DbgcError, ValueError):
    pass


class InvalidRatioError(DbgcError, ValueError):
    pass


class InvalidPatchSizeError(DbgcError, ValueError):
    pass


class OutOfBoundsError(DbgcError, IndexError):
    pass


class NumericalError(DbgcError, ArithmeticError):
    pass


class EmptyMaskError(DbgcError, ValueError):
    pass


class TrainingDivergedError(DbgcError, ArithmeticError):
    pass


# Evaluation / reporting
class EmptyEvaluationError(DbgcError, ValueError):
    pass


class PaletteMissingError(DbgcError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


# Artifacts
class ArtifactMissingError(DbgcError, FileNotFoundError):
    pass


class ManifestLockedError(DbgcError, RuntimeError):
    pass
