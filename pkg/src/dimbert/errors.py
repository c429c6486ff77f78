"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A call violated a documented precondition."""


class GradientStateError(ContractError):
    """backward() was called while leaf gradients were still populated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(ValueError):
    """A configuration is invalid or impossible to satisfy."""


class VocabularyError(KeyError):
    """A token is not in the closed vocabulary."""


class LengthError(ValueError):
    """An input exceeds a configured maximum length."""


class FingerprintError(ValueError):
    """A checkpoint does not match the model configuration it is loaded into."""
