class MetricsError(Exception):
    """Base class for metric computation errors."""


class InsufficientData(MetricsError):
    pass


class InvalidReturn(MetricsError):
    pass
