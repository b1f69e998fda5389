"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class CandeError(Exception):
    code = "CANDE_ERROR"


class ShapeError(CandeError, ValueError):
    code = "SHAPE_MISMATCH"


class TapeError(CandeError, RuntimeError):
    code = "STALE_TAPE"


class DivergenceError(CandeError, FloatingPointError):
    code = "DIVERGED"


class CheckpointError(CandeError, ValueError):
    code = "BAD_CHECKPOINT"


class DataFormatError(CandeError, ValueError):
    code = "BAD_DATA"


class SchemeError(CandeError, ValueError):
    code = "BAD_SCHEME"


class ConfigError(CandeError, ValueError):
    code = "BAD_CONFIG"


class EvaluationError(CandeError, ValueError):
    code = "BAD_EVAL_INPUT"
