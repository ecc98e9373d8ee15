"""Exception hierarchy.

Input problems derive from :class:`SpecError` (CLI exit code 2); numerical
failures derive from :class:`NumericalError` (CLI exit code 3).
"""


class UOTError(Exception):
    exit_code = 3


class SpecError(UOTError, ValueError):
    exit_code = 2


class NumericalError(UOTError, ArithmeticError):
    exit_code = 3


class GridMismatch(SpecError):
    pass


class InvalidDensity(SpecError):
    pass


class InvalidParameter(SpecError):
    pass


class InvalidDelta(InvalidParameter):
    pass


class FeasibilityViolation(SpecError):
    def __init__(self, msg, violation=float("nan")):
        super().__init__(msg)
        self.violation = violation


class MassMismatch(SpecError):
    pass


class Unsupported(SpecError):
    pass


class OutOfRange(SpecError):
    pass


class OutOfBox(SpecError):
    pass


class InvalidSeries(SpecError):
    pass


class NumericalBlowup(NumericalError):
    def __init__(self, msg, iteration=-1):
        super().__init__(msg)
        self.iteration = iteration


class DegenerateMap(NumericalError):
    pass


class Unresolved(NumericalError):
    pass


class BoxExit(NumericalError):
    def __init__(self, msg, time=float("nan")):
        super().__init__(msg)
        self.time = time


class InternalError(NumericalError):
    pass
