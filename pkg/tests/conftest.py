import json
from pathlib import Path

import numpy as np
import pytest

from countycast.dataset import SynthSpec, generate_synthetic_panel, write_raw_tables


def write_table(directory, name, kind, columns, rows, **schema_extra):
    """Write ``name.csv`` plus ``name.schema.json``; ``columns`` maps name -> type or spec dict."""
    directory = Path(directory)
    csv_path = directory / f"{name}.csv"
    lines = [",".join(columns)] + [",".join(str(v) for v in r) for r in rows]
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    schema = {"name": name, "kind": kind, "columns": columns, **schema_extra}
    schema_path = directory / f"{name}.schema.json"
    schema_path.write_text(json.dumps(schema), encoding="utf-8")
    return csv_path, schema_path


@pytest.fixture(scope="session")
def small_panel():
    return generate_synthetic_panel(SynthSpec(n_counties=8, n_days=60, n_static=4, n_states=3), seed=3)


@pytest.fixture(scope="session")
def raw_fixture(tmp_path_factory, small_panel):
    d = tmp_path_factory.mktemp("raw")
    return write_raw_tables(small_panel, d)


# one verdict line per acceptance criterion, filled by test_acceptance
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def make_rng(seed=0):
    return np.random.default_rng(seed)
