"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 2, data or
contract errors exit 3, numeric failures exit 4, and I/O problems (plain
OSError) exit 5.
"""


class UsageError(ValueError):
    """Bad invocation: unknown config keys, invalid flag combinations."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class DataFormatError(ValueError):
    """A file's bytes do not match the expected on-disk format."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf where finite values are required."""


class CapacityError(UsageError):
    """A generation request cannot be satisfied within the given bounds."""
