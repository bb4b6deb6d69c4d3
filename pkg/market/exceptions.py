class MarketError(Exception):
    """Base class for panel, factor, model and backtest errors."""


class InvalidConfig(MarketError):
    pass


class EmptyInput(MarketError):
    pass


class DuplicateKey(MarketError):
    def __init__(self, date, instrument):
        self.date = date
        self.instrument = instrument
        super().__init__(f"duplicate row for ({date}, {instrument})")


class ParseError(MarketError):
    def __init__(self, row, column, raw):
        self.row = row
        self.column = column
        self.raw = raw
        super().__init__(f"row {row}: cannot parse {column}={raw!r} as a number")


class FieldNotFound(MarketError):
    def __init__(self, field):
        self.field = field
        super().__init__(f"field {field!r} not found")


class InvalidPrice(MarketError):
    pass


class IndexMismatch(MarketError):
    pass


class DslError(MarketError):
    """Raised for formulas that cannot be parsed or checked."""


class UnknownOp(DslError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"unknown operator {name!r}")


class ArityError(DslError):
    def __init__(self, name, expected, got):
        self.name = name
        self.expected = expected
        self.got = got
        super().__init__(f"{name} takes {expected} arguments, got {got}")


class FormulaSyntaxError(DslError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} at offset {offset}")


class InvalidWindow(DslError):
    pass


class EmptySampleSet(MarketError):
    pass


class SingularSystem(MarketError):
    pass


class ShapeMismatch(MarketError):
    pass


class EmptyCrossSection(MarketError):
    pass
