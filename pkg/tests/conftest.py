import numpy as np
import pytest
import torch

from cosal.encoder import BackboneSpec, build_backbone, freeze
from cosal.synthdata import SynthSpec, generate_dataset

torch.set_num_threads(1)

_acceptance = {}
_notes = []


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    number, title = marker
    ok, seen = _acceptance.get(number, (True, title))
    if report.when == "call" or report.failed:
        _acceptance[number] = (ok and not report.failed and not report.skipped, seen)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report.acceptance = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        ok, title = _acceptance[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
    for line in _notes:
        terminalreporter.write_line(line)


@pytest.fixture
def report_line():
    """Append a line to the acceptance section of the terminal summary."""
    return _notes.append


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_backbone():
    return fresh_backbone(7)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(SynthSpec.tiny(seed=3))


def fresh_backbone(seed=0, **kw):
    return freeze(build_backbone(BackboneSpec(**kw), seed=seed))
