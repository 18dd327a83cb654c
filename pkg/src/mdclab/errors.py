"""Exception types shared across the package."""


class MdcError(Exception):
    """Base class for all errors raised by mdclab."""


class SourceError(MdcError, ValueError):
    """Bad frame source: unreadable file, short file or zero dimension."""


class DimensionMismatch(MdcError, ValueError):
    pass


class MissingReference(MdcError, ValueError):
    """Inter prediction was requested without a reference picture."""


class DegenerateGrid(MdcError, ValueError):
    pass


class FitError(MdcError, ValueError):
    pass


class InvalidModel(MdcError, ValueError):
    pass


class InfeasibleTarget(MdcError, ValueError):
    """The requested lateral rate lies outside [sum r_min, sum r_max]."""


class BracketExpansionFailed(MdcError, RuntimeError):
    pass


class PacketError(MdcError, ValueError):
    pass


class ConfigMismatch(MdcError, ValueError):
    pass
