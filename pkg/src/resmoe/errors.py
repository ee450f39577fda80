"""Exception hierarchy shared by every resmoe module."""


class ResMoEError(Exception):
    """Base class for all library errors."""


class ShapeError(ResMoEError, ValueError):
    pass


class InvalidCost(ResMoEError, ValueError):
    pass


class EmptyInput(ResMoEError, ValueError):
    pass


class IndexOverflow(ResMoEError, ValueError):
    pass


class RankError(ResMoEError, ValueError):
    pass


class BadMagic(ResMoEError):
    pass


class VersionError(ResMoEError):
    pass


class TruncatedFile(ResMoEError):
    pass


class JsonError(ResMoEError):
    pass


class IoError(ResMoEError, OSError):
    pass
