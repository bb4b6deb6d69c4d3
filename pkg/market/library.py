"""Built-in Alpha-20 factor formulas and the JSON factor-library format."""

import json
import logging
from pathlib import Path

from .dsl import parse, to_formula
from .exceptions import DslError

logger = logging.getLogger(__name__)

# Table order is kept: generators and reports index into it.
ALPHA20_FORMULAS = (
    ("RESI5", "Resi($close, 5)/$close"),
    (
        "WVMA5",
        "Std(Abs($close/Ref($close, 1) - 1)*$volume, 5)"
        "/(Mean(Abs($close/Ref($close, 1) - 1)*$volume, 5) + 1e-12)",
    ),
    ("RSQR5", "Rsquare($close, 5)"),
    ("KLEN", "($high - $low)/$open"),
    ("RSQR10", "Rsquare($close, 10)"),
    ("CORR5", "Corr($close, Log($volume + 1), 5)"),
    ("CORD5", "Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1) + 1), 5)"),
    ("CORR10", "Corr($close, Log($volume + 1), 10)"),
    ("ROC60", "Ref($close, 60)/$close"),
    ("RESI10", "Resi($close, 10)/$close"),
    ("VSTD5", "Std($volume, 5)/($volume + 1e-12)"),
    ("RSQR60", "Rsquare($close, 60)"),
    ("CORR60", "Corr($close, Log($volume + 1), 60)"),
    (
        "WVMA60",
        "Std(Abs($close/Ref($close, 1) - 1)*$volume, 60)"
        "/(Mean(Abs($close/Ref($close, 1) - 1)*$volume, 60) + 1e-12)",
    ),
    ("STD5", "Std($close, 5)/$close"),
    ("RSQR20", "Rsquare($close, 20)"),
    ("CORD60", "Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1) + 1), 60)"),
    ("CORD10", "Corr($close/Ref($close, 1), Log($volume/Ref($volume, 1) + 1), 10)"),
    ("CORR20", "Corr($close, Log($volume + 1), 20)"),
    ("KLOW", "(Less($open, $close) - $low)/$open"),
)


def alpha20_library():
    return [(name, parse(formula)) for name, formula in ALPHA20_FORMULAS]


def dump_library(entries, path):
    """Write (name, FactorExpr) pairs as a JSON array of {name, formula}."""
    payload = [{"name": name, "formula": to_formula(expr)} for name, expr in entries]
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2))
    return path


def load_library(path):
    from .serializers import FactorFormulaSerializer

    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DslError(f"{path} is not valid JSON: {exc}") from None
    serializer = FactorFormulaSerializer(data=payload, many=True)
    if not serializer.is_valid():
        raise DslError(f"invalid factor library {path}: {serializer.errors}")
    entries = [(item["name"], item["expr"]) for item in serializer.validated_data]
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise DslError(f"factor library {path} repeats a name")
    logger.debug("loaded %d factors from %s", len(entries), path)
    return entries
