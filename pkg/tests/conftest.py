"""Shared pytest plumbing: the acceptance-criteria scoreboard.

test_acceptance.py records one verdict per numbered criterion; after the run
pytest prints a single PASS/FAIL line for each so the acceptance status is
readable without scrolling through individual test output.
"""

import pytest

CRITERIA_TITLES = {
    1: "whole-map pre-affine normalization is an exact homothety",
    2: "per-token normalization fails the homothety check on varying tokens",
    3: "backprop matches central differences for every norm kind",
    4: "channel entropy: uniform -> ln C, peaked -> ~0, permutation-exact",
    5: "LN grows feature magnitude vs iLN; iLN keeps channel entropy",
    6: "zeroed branch projections leave residual blocks bit-identical",
    7: "f16 feature inference stays finite and within 0.05 dB of f32",
    8: "quantization error bounded by half a step; identity policy exact",
    9: "same config and seed replay byte-identically; checkpoints round-trip",
    10: "multirun aggregates equal direct recomputation",
}

_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str = "") -> None:
    _RESULTS[number] = (bool(ok), detail)


@pytest.fixture
def acceptance():
    """Recorder callable: acceptance(number, ok, detail)."""
    return record_criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_TITLES):
        title = CRITERIA_TITLES[number]
        if number not in _RESULTS:
            terminalreporter.write_line(f"criterion {number:2d} NOT RUN  {title}")
            continue
        ok, detail = _RESULTS[number]
        verdict = "PASS" if ok else "FAIL"
        line = f"criterion {number:2d} {verdict}     {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
