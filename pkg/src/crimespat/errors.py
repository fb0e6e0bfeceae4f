"""Exception hierarchy; each family maps to a CLI exit code."""


class CrimeSpatError(Exception):
    exit_code = 1


class ConfigError(CrimeSpatError):
    exit_code = 2


class StaleCacheError(ConfigError):
    """A stage was run before its upstream stage, or inputs changed since."""


class DataError(CrimeSpatError, ValueError):
    exit_code = 3


class GeometryError(DataError):
    pass


class SchemaError(DataError):
    pass


class IslandError(DataError):
    """Units without neighbours in a context that cannot tolerate them."""

    def __init__(self, islands):
        self.islands = list(islands)
        super().__init__(
            f"{len(self.islands)} island unit(s) without contiguous neighbours: "
            f"{self.islands[:10]}{' ...' if len(self.islands) > 10 else ''} "
            "(use drop_islands / --drop-islands to remove them)"
        )


class NumericalError(CrimeSpatError, ArithmeticError):
    exit_code = 4


class DegenerateVarianceError(NumericalError, ValueError):
    pass


class RankDeficientError(NumericalError):
    pass


class DomainError(NumericalError, ValueError):
    pass


class NonConcaveProfileError(NumericalError):
    def __init__(self, message, scan=None):
        super().__init__(message)
        self.scan = scan
