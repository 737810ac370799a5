"""Exception types shared across the package.

Everything derives from :class:`PDLSError` so the CLI can map data problems to
exit code 2 with a single ``except`` clause.
"""


class PDLSError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PDLSError, ValueError):
    pass


class UnknownDiagnosisError(PDLSError, KeyError):
    def __init__(self, name, vocabulary):
        self.name = name
        self.vocabulary = tuple(vocabulary)
        super().__init__(f"unknown diagnosis {name!r}; known: {', '.join(self.vocabulary)}")

    def __str__(self):
        return self.args[0]


class IncompleteReviewError(PDLSError, ValueError):
    pass


class ShapeError(PDLSError, ValueError):
    pass


class InvalidCacheError(PDLSError, ValueError):
    pass


class NondeterministicClosureError(PDLSError, ValueError):
    pass


class EmptyBagError(PDLSError, ValueError):
    pass


class DegenerateLabelsError(PDLSError, ValueError):
    pass


class MissingThresholdsError(PDLSError, RuntimeError):
    pass


class CorruptModelError(PDLSError, ValueError):
    pass


class InconsistentDatasetError(PDLSError, ValueError):
    pass


class LeakageError(PDLSError, ValueError):
    pass


class UndefinedAUCError(PDLSError, ValueError):
    pass


class ConfigError(PDLSError, ValueError):
    pass
