"""Exception hierarchy shared across the pipeline.

The CLI maps each family to an exit code: configuration problems exit 2,
data problems exit 3, numerical failures exit 4.
"""


class LinkoError(Exception):
    exit_code = 1


class ConfigError(LinkoError):
    exit_code = 2


class DataError(LinkoError):
    exit_code = 3


class OntologyParseError(DataError):
    pass


class OntologyStructureError(DataError):
    pass


class DuplicateCodeError(DataError):
    pass


class UnknownConceptError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class CohortParseError(DataError):
    pass


class UnknownCodeError(DataError):
    def __init__(self, code, line=None):
        self.code = code
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown code {code!r}{where}")


class MissingArtifactError(DataError):
    pass


class NumericalError(LinkoError):
    exit_code = 4


class ShapeError(LinkoError, ValueError):
    pass


class EmbeddingError(LinkoError):
    exit_code = 3


class ProviderAuthError(EmbeddingError):
    pass


class DimensionError(EmbeddingError):
    pass


class RetriesExhaustedError(EmbeddingError):
    pass
