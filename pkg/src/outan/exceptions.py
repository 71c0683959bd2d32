"""Exception hierarchy shared by every module."""


class OutanError(Exception):
    """Base class for all errors raised by this package."""


class InvalidCommandError(OutanError, ValueError):
    pass


class FramingError(OutanError):
    """A frame in a bit stream was cut short before it could be latched.

    ``frame_index`` is the position of the offending frame and ``commands``
    holds every frame that was latched before it.
    """

    def __init__(self, message, frame_index, commands=()):
        super().__init__(message)
        self.frame_index = frame_index
        self.commands = list(commands)


class LoadError(OutanError):
    """Load voltage or current is unbounded (open or shorted μLED)."""


class FitError(OutanError, ValueError):
    pass


class PowerStateError(OutanError):
    """The emulated ASIC is unpowered, partially powered or faulted."""


class CalibrationError(OutanError, ValueError):
    pass


class OutOfRangeError(OutanError, ValueError):
    pass


class BandwidthError(OutanError, ValueError):
    pass


class ScriptError(OutanError, ValueError):
    pass


class UndefinedCorrelationError(OutanError, ValueError):
    pass


class DegenerateSampleError(OutanError, ValueError):
    pass
