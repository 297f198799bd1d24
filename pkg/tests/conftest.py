import sys
from pathlib import Path

import pytest

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
GOLDEN = HERE / "golden"
sys.path.insert(0, str(HERE))

from crashlens.ingest import (  # noqa: E402
    TABLE_NAMES,
    attach_annotations,
    join_all,
    load_category_maps,
    parse_tables,
    reduce_categories,
)


def fixture_paths() -> dict:
    return {t: FIXTURES / f"{t}.csv" for t in TABLE_NAMES}


@pytest.fixture
def tables():
    return parse_tables(fixture_paths())


@pytest.fixture
def fixture_events(tables):
    maps = load_category_maps(FIXTURES / "category_maps.txt")
    return [reduce_categories(attach_annotations(ev, FIXTURES / "annotations.csv"), maps) for ev in join_all(tables)]


# acceptance criterion number -> (title, passed, seconds, note); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[str, bool, float, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, passed, seconds, note = ACCEPTANCE[num]
        line = f"criterion {num:>2} {'PASS' if passed else 'FAIL'} {seconds:7.2f}s  {title}"
        terminalreporter.write_line(f"{line}  [{note}]" if note else line)
