"""Exception types shared across the package."""


class FormatError(ValueError):
    """A binary artifact file is malformed (bad magic, version, or truncation)."""


class DegenerateInputError(ValueError):
    """A numeric precondition failed, e.g. a vector norm below the safe floor."""


class NoExemplarsError(RuntimeError):
    """Affinity propagation finished its iteration budget with no exemplars."""
