"""Exception hierarchy shared by every module in the kit."""


class KitError(Exception):
    """Base class for all errors raised by mobilebert_kit."""


class ShapeError(KitError, ValueError):
    """Tensor extents do not agree."""


class SequenceLengthError(ShapeError):
    """Input sequence is longer than the model's position table."""


class DomainError(KitError, ValueError):
    """A value lies outside the domain an operation accepts."""


class ConfigError(KitError, ValueError):
    """A model, training or kernel configuration violates an invariant."""


class ContractError(KitError, ValueError):
    """A caller broke an operation's precondition."""


class UnknownPresetError(KitError, KeyError):
    """Preset lookup failed."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataError(KitError, ValueError):
    """The corpus cannot satisfy a batch request."""


class CopyError(KitError, ValueError):
    """Teacher and student tensors are incompatible for copying."""


class NumericError(KitError, ArithmeticError):
    """A loss became non-finite during training."""


class BenchError(KitError, RuntimeError):
    """A benchmark cannot produce trustworthy timings."""
