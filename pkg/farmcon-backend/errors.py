"""
Farm Console Errors

Every failure the daemon can report to a client is a FarmError subclass.
`code` is the token sent on the control protocol (`ERR <code> <message>`),
`exit_code` is what farmctl exits with when it receives that code.
"""

from typing import Dict, Optional


class FarmError(Exception):
    """Base class for all domain errors"""

    code = "internal"
    exit_code = 1

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__


# --- authorization ---------------------------------------------------------

class Denied(FarmError):
    code = "denied"
    exit_code = 3


class AuthFailed(Denied):
    pass


class StaleChallenge(Denied):
    pass


class ReplayedChallenge(Denied):
    pass


# --- lookups ---------------------------------------------------------------

class NotFound(FarmError):
    code = "not-found"
    exit_code = 4


class UnknownHost(NotFound):
    pass


class UnknownServer(NotFound):
    pass


class NoResetWiring(NotFound):
    pass


# --- sessions --------------------------------------------------------------

class WriterBusy(FarmError):
    code = "busy"
    exit_code = 5

    def __init__(self, holder: str):
        super().__init__(f"port held read-write by {holder}")
        self.holder = holder


# --- transport -------------------------------------------------------------

class TransportError(FarmError):
    code = "transport"
    exit_code = 6


class DeviceUnavailable(TransportError):
    pass


class EndpointClosed(TransportError):
    pass


class AckTimeout(TransportError):
    pass


class Nak(TransportError):
    pass


# --- rate limiting ---------------------------------------------------------

class RateLimited(FarmError):
    code = "rate-limited"
    exit_code = 7


# --- malformed input -------------------------------------------------------

class BadRequest(FarmError):
    code = "bad-request"
    exit_code = 2


class ParseError(BadRequest):
    def __init__(self, file: str, line_no: int, reason: str):
        super().__init__(f"{file}:{line_no}: {reason}")
        self.file = file
        self.line_no = line_no
        self.reason = reason


class BadPattern(BadRequest):
    pass


class TopologyError(BadRequest):
    pass


class ConflictError(FarmError):
    code = "conflict"
    exit_code = 8


# Relay wire codec. These never cross the control protocol; the box answers
# a bad frame with NAK or silence instead.

class RelayCodecError(FarmError):
    code = "bad-frame"
    exit_code = 6


class BadFraming(RelayCodecError):
    pass


class BadChecksum(RelayCodecError):
    pass


class BadCommand(RelayCodecError):
    pass


_BY_CODE: Dict[str, type] = {
    cls.code: cls
    for cls in (FarmError, Denied, NotFound, WriterBusy, TransportError,
                RateLimited, BadRequest, ConflictError)
}


def exit_code_for(code: str) -> int:
    """Map a wire error code to the CLI exit status"""
    cls: Optional[type] = _BY_CODE.get(code)
    return cls.exit_code if cls is not None else FarmError.exit_code


class RemoteError(FarmError):
    """An `ERR <code> <message>` reply as seen by a client"""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code_for(code)
