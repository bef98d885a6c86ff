"""Exception hierarchy.

Every error carries a process exit code so the command line front end can
map failures to a stable, machine-parsable status.
"""


class MtmilError(Exception):
    exit_code = 1

    @property
    def code(self) -> str:
        return type(self).__name__


class ConfigError(MtmilError):
    exit_code = 2


class DataError(MtmilError):
    exit_code = 3


class InfeasibleError(MtmilError):
    exit_code = 4


class NumericError(MtmilError):
    exit_code = 5


# feature_store
class IdMismatch(DataError):
    pass


class StoreIo(DataError):
    pass


class FormatError(DataError):
    pass


class ValidationError(DataError):
    pass


class UnknownTarget(ConfigError):
    pass


# synthgen
class GenerationError(InfeasibleError):
    pass


class MissingTruth(DataError):
    pass


# splitter
class EmptyCohort(InfeasibleError):
    pass


class EmptyDev(InfeasibleError):
    pass


class InfeasibleSplit(InfeasibleError):
    pass


class InfeasibleRoles(InfeasibleError):
    pass


# mil_net
class ShapeError(DataError):
    pass


class NoSupervision(InfeasibleError):
    pass


class DegeneratePrevalence(InfeasibleError):
    pass


class InvalidEpsilon(ConfigError):
    pass


# trainer
class SelectionInfeasible(InfeasibleError):
    pass


# stats
class UndefinedAUC(NumericError):
    pass


class DegenerateBootstrap(NumericError):
    pass


class ZeroVariance(NumericError):
    pass


class TooFew(NumericError):
    pass


class AllZero(NumericError):
    pass


class TargetMismatch(DataError):
    pass


# analysis
class DegenerateSplit(InfeasibleError):
    pass
