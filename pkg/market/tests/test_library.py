import json

import pytest

from market.dsl import parse
from market.exceptions import DslError
from market.library import alpha20_library, dump_library, load_library


def test_dump_and_load_library(tmp_path):
    entries = alpha20_library()[:3]
    path = dump_library(entries, tmp_path / "factors.json")

    assert load_library(path) == entries
    first = json.loads(path.read_text())[0]
    assert first == {"name": "RESI5", "formula": "Resi($close, 5) / $close"}


@pytest.mark.parametrize(
    "payload",
    [
        [{"name": "A", "formula": "Mean($close"}],
        [{"name": "1bad", "formula": "$close"}],
        [{"name": "A", "formula": "$close"}, {"name": "A", "formula": "$open"}],
        {"name": "A", "formula": "$close"},
    ],
)
def test_load_library_rejects_bad_files(tmp_path, payload):
    path = tmp_path / "factors.json"
    path.write_text(json.dumps(payload))

    with pytest.raises(DslError):
        load_library(path)


def test_load_library_rejects_invalid_json(tmp_path):
    path = tmp_path / "factors.json"
    path.write_text("[{")

    with pytest.raises(DslError):
        load_library(path)


def test_load_library_parses_formulas(tmp_path):
    path = tmp_path / "factors.json"
    path.write_text(json.dumps([{"name": "MOM10", "formula": "$close/Ref($close, 10) - 1"}]))

    assert load_library(path) == [("MOM10", parse("$close/Ref($close, 10) - 1"))]
