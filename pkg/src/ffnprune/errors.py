"""Exception hierarchy shared by the whole toolkit.

Every error carries a short machine-parseable code; the CLI maps the three
top-level families to distinct exit codes (config 2, input 3, validation 4).
"""


class FFNPruneError(Exception):
    code = "E_INTERNAL"


class ConfigError(FFNPruneError):
    """Bad option / hyperparameter / enum value."""

    code = "E_CONFIG"


class InputError(FFNPruneError):
    """Caller-supplied data violates a precondition (token ids, shapes, paths)."""

    code = "E_INPUT"


class ShapeError(InputError):
    code = "E_SHAPE"


class CapacityError(InputError):
    """Corpus too small for the requested sampling."""

    code = "E_CAPACITY"


class ValidationError(FFNPruneError):
    """Stored artifacts are inconsistent or an integrity check failed."""

    code = "E_VALIDATION"


class CheckpointError(ValidationError):
    code = "E_CHECKPOINT"


class UnknownFormatError(CheckpointError):
    code = "E_FORMAT"


class MissingTensorError(CheckpointError):
    code = "E_MISSING_TENSOR"


class ShapeMismatchError(CheckpointError):
    code = "E_SHAPE_MISMATCH"


class TruncatedBlobError(CheckpointError):
    code = "E_TRUNCATED"


class PlanError(ValidationError):
    code = "E_PLAN"


class TrainingDivergedError(ValidationError):
    code = "E_DIVERGED"
