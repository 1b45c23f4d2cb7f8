"""Exception hierarchy; each class carries the stable code the CLI reports."""


class RobplamError(Exception):
    code = "ERROR"
    exit_status = 1


class DatasetError(RobplamError, ValueError):
    code = "DATASET"
    exit_status = 3


class DatasetSchemaError(DatasetError):
    code = "DATASET_SCHEMA"


class NumericalError(RobplamError, ArithmeticError):
    code = "NUMERICAL"
    exit_status = 4


class RankDeficientError(NumericalError):
    code = "RANK_DEFICIENT"


class SubsampleError(NumericalError):
    code = "SUBSAMPLE"


class AllRejectedError(NumericalError):
    code = "ALL_REJECTED"


class SingularMatrixError(NumericalError):
    code = "SINGULAR_MATRIX"
