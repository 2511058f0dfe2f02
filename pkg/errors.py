# 统一异常，每类带 CLI 退出码


class RdpError(Exception):
    exit_code = 1


class ValidationError(RdpError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    pass


class CheckpointError(ValidationError):
    def __init__(self, field, message):
        super().__init__(f"checkpoint field '{field}': {message}")
        self.field = field


class StateError(RdpError):
    exit_code = 2


class SnapshotMissingError(RdpError, LookupError):
    exit_code = 2


class DivergenceError(RdpError):
    exit_code = 3

    def __init__(self, message, parameter=None, metrics=None):
        super().__init__(message)
        self.parameter = parameter
        self.metrics = metrics


class HarnessError(RdpError):
    exit_code = 4
