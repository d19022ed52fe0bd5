"""Exception hierarchy shared by every stage of the pipeline."""


class RPRRError(Exception):
    """Base class for all errors raised by this package."""


class InvalidDepthError(RPRRError, ValueError):
    pass


class BehindCameraError(RPRRError, ValueError):
    pass


class ValidationError(RPRRError, ValueError):
    pass


class InsufficientDataError(RPRRError):
    pass


class NoNormalError(RPRRError):
    pass


class DegenerateGeometryError(RPRRError):
    pass


class ProtocolError(RPRRError):
    pass


class SessionAbort(RPRRError):
    pass


class MalformedPayloadError(RPRRError, ValueError):
    pass


class DecodeError(RPRRError):
    """Raised on a corrupt or truncated bitstream.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ContainerError(RPRRError):
    def __init__(self, message, section=None):
        super().__init__(message if section is None else f"{message} [{section}]")
        self.section = section


class IngestionError(RPRRError):
    pass


class GenerationError(RPRRError):
    pass
