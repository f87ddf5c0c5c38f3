"""Exception hierarchy. Every class carries the CLI exit code it maps to."""


class SfimError(Exception):
    exit_code = 1


class ConfigError(SfimError):
    """Invalid configuration, spec, or usage."""

    exit_code = 2


class ShapeError(ConfigError, ValueError):
    """Operand shapes or widths do not fit the operation."""


class NumericError(SfimError):
    exit_code = 3


class NonFiniteError(NumericError, ArithmeticError):
    def __init__(self, op: str, where: str = ""):
        self.op = op
        self.where = where
        location = f" in {where}" if where else ""
        super().__init__(f"non-finite values produced by {op}{location}")


class CheckFailure(NumericError):
    """An invariant suite reported a violation."""


class SfimIOError(SfimError, OSError):
    exit_code = 4


class CheckpointError(SfimIOError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"checkpoint version {found} is not supported (expected {expected})")


class CheckpointConfigError(CheckpointError):
    pass
