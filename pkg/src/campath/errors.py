"""Exception types raised across the toolkit."""


class CampathError(Exception):
    """Base class for all toolkit errors."""


class GimbalLockWarning(UserWarning):
    pass


class DegenerateAverage(CampathError):
    pass


class ImageTooSmall(CampathError):
    pass


class NoMatches(CampathError):
    pass


class DegenerateConfiguration(CampathError):
    pass


class InsufficientInliers(CampathError):
    pass


class CheiralityAmbiguous(CampathError):
    pass


class SkipPair(CampathError):
    """A frame pair produced no usable relative rotation."""


class NonPositiveDisparity(CampathError):
    pass


class TrackLost(CampathError):
    pass


class SequenceTooShort(CampathError):
    pass


class DegenerateBaseline(CampathError):
    pass


class BehindCamera(CampathError):
    pass


class EmptyModel(CampathError):
    pass


class SingularNormalEquations(CampathError):
    def __init__(self, point_ids):
        self.point_ids = list(point_ids)
        super().__init__(f"singular normal equations for points {self.point_ids}")


class ParseError(CampathError):
    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class NonMonotonicTimestamps(CampathError):
    pass


class OutOfRange(CampathError):
    pass


class NoVisiblePoints(CampathError):
    pass
