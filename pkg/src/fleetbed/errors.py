"""Exception hierarchy. Every domain error maps to CLI exit code 1."""


class FleetbedError(Exception):
    """Base class for domain errors."""

    kind = "error"


class InvalidArgument(FleetbedError, ValueError):
    kind = "invalid-argument"


class ParseError(FleetbedError, ValueError):
    kind = "parse-error"

    def __init__(self, field, detail=""):
        self.field = field
        self.detail = detail
        msg = f"parse-error({field})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class WrongBaseError(FleetbedError):
    kind = "wrong-base"


class CorruptPackageError(FleetbedError):
    kind = "corrupt-package"


class StateError(FleetbedError):
    kind = "state-error"

    def __init__(self, state, event):
        self.state = state
        self.event = event
        super().__init__(f"state-error: cannot apply {event} in state {state}")


class StagingError(FleetbedError):
    kind = "staging-error"


class UnknownDeviceError(FleetbedError):
    kind = "unknown-device"


class MalformedUploadError(FleetbedError):
    kind = "malformed-upload"

    def __init__(self, message, malformed=0, records=0):
        self.malformed = malformed
        self.records = records
        super().__init__(message)


class SeqConflictError(FleetbedError):
    kind = "seq-conflict"


class UndefinedRatioError(FleetbedError):
    kind = "undefined-ratio"
