import contextlib
from pathlib import Path

import pytest


ROOT = Path(__file__).resolve().parents[1]
_verdicts: list[str] = []


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def check(label: str, detail=lambda: ""):
        try:
            yield
        except BaseException as exc:
            _verdicts.append(f"FAIL  {label}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        else:
            _verdicts.append(f"PASS  {label} {detail()}".rstrip())

    return check


@pytest.fixture(scope="session")
def desk_ablation(tmp_path_factory):
    """Five matched-seed searches of the desk configuration, with and without crossover."""
    from morphnas.cli import run_ablation
    from morphnas.config import load_config

    cfg = load_config(ROOT / "configs" / "desk.json")
    out = tmp_path_factory.mktemp("ablation")
    results: dict = {}
    summary = run_ablation(cfg, out, list(range(5)), results)
    return cfg, summary, results


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for line in _verdicts:
        terminalreporter.write_line(line)
