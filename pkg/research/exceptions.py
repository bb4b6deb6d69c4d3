class ResearchError(Exception):
    """Base class for loop, scheduling and gateway errors."""


class ConfigurationError(ResearchError):
    pass


class InvalidParameter(ResearchError):
    pass


class NumericalError(ResearchError):
    pass


class CycleDetected(ResearchError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("task graph has a cycle: " + " -> ".join(self.cycle))


class ImplementerUnavailable(ResearchError):
    """The implementer backend could not be reached; the attempt may be retried."""


class GenerationFailed(ResearchError):
    pass


class ExperimentFailed(ResearchError):
    def __init__(self, stage, message):
        self.stage = stage
        super().__init__(f"{stage}: {message}")


class GatewayUnavailable(ResearchError):
    pass


class MalformedReply(ResearchError):
    def __init__(self, message, raw):
        self.raw = raw
        super().__init__(message)


class PersistenceError(ResearchError):
    pass
