"""Exception hierarchy shared by every subsystem."""


class FedMixError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(FedMixError, ValueError):
    pass


class InvalidState(FedMixError, RuntimeError):
    pass


class TrainingDiverged(FedMixError):
    def __init__(self, step: int, loss: float, phase: str = "pretrain"):
        self.step = step
        self.loss = loss
        self.phase = phase
        super().__init__(f"{phase} diverged at step {step} (loss={loss})")


class AdaptationDiverged(TrainingDiverged):
    def __init__(self, step: int, loss: float):
        super().__init__(step, loss, phase="adaptation")


class FrameError(FedMixError):
    """A byte sequence could not be decoded as a valid frame."""


class WrongProtocol(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class CorruptMessage(FrameError):
    pass


class IncompleteMessage(FrameError):
    pass


class ClientFailure(FedMixError):
    def __init__(self, client_id: int, round_idx: int, cause: BaseException):
        self.client_id = client_id
        self.round_idx = round_idx
        self.cause = cause
        super().__init__(f"round {round_idx}, client {client_id}: {cause}")


class ConfigError(FedMixError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
