"""Exception types shared across the package."""


class DoclabError(Exception):
    """Base class; ``code`` is the machine-readable tag printed by the CLI."""

    code = "error"


class ShapeError(DoclabError, ValueError):
    code = "shape"


class DegenerateInputError(DoclabError, ValueError):
    code = "degenerate-input"


class UsageError(DoclabError, RuntimeError):
    code = "usage"


class NonFiniteError(DoclabError, FloatingPointError):
    code = "non-finite"


class VocabularyError(DoclabError, KeyError):
    code = "vocabulary"

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ContextOverflowError(DoclabError, ValueError):
    code = "context-overflow"


class IntegrityError(DoclabError, ValueError):
    code = "integrity"


class ConfigError(DoclabError, ValueError):
    code = "invalid-config"
