"""Exception hierarchy shared by every module."""


class MMTError(Exception):
    pass


class ShapeError(MMTError, ValueError):
    """Operand dimensions are incompatible."""


class EmptySupportError(MMTError, ValueError):
    """A normalisation or mean was requested over zero unmasked positions."""


class VocabularyError(MMTError, KeyError):
    pass


class DegenerateBatchError(MMTError, ValueError):
    pass


class PairingError(MMTError, ValueError):
    """Two sequences that must be aligned one-to-one have different lengths."""


class KindError(MMTError, TypeError):
    pass


class MissingConditioningError(MMTError, ValueError):
    pass


class DeterminismError(MMTError, RuntimeError):
    pass


class ParameterError(MMTError, ValueError):
    pass


class LengthError(MMTError, ValueError):
    pass


class SizeError(MMTError, ValueError):
    pass


class CompatibilityError(MMTError, ValueError):
    pass


class ConfigError(MMTError, ValueError):
    pass


class DivergenceError(MMTError, FloatingPointError):
    pass
