"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class CrimePassError(Exception):
    """Base class for all errors raised by :mod:`crimepass`."""


class MalformedRow(CrimePassError):
    def __init__(self, path, line: int, column: str, detail: str):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{self.path}:{line}: column {column!r}: {detail}")


class UnknownStore(CrimePassError):
    def __init__(self, path, line: int, store_id: str):
        self.path = str(path)
        self.line = line
        self.store_id = store_id
        super().__init__(f"{self.path}:{line}: store_id {store_id!r} not in stores table")


class NonPositiveQuantity(CrimePassError):
    def __init__(self, path, line: int, column: str, detail: str):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{self.path}:{line}: column {column!r}: {detail}")


class OutOfRangeCoordinate(CrimePassError):
    def __init__(self, path, line: int, column: str, value: float):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{self.path}:{line}: {column}={value} out of range")


class UniverseTooSmall(CrimePassError):
    pass


class AllZeroRevenue(CrimePassError):
    pass


class NonPositivePrice(CrimePassError):
    pass


class NoCleanControls(CrimePassError):
    pass


class EmptyPanel(CrimePassError):
    pass


class RankDeficient(CrimePassError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {self.columns}")


class SingleCluster(CrimePassError):
    pass


class UndefinedLimit(CrimePassError):
    pass


class NonPositiveRho(CrimePassError):
    pass


class NegativePSFactor(CrimePassError):
    pass


class ConfigInvalid(CrimePassError):
    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"{field}: {detail}")


class MixedArtifacts(CrimePassError):
    pass
