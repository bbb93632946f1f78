import numpy as np
import pytest
from hypothesis import settings

from pilab.data import model_config_for
from pilab.scene_gen import SceneConfig, generate_corpus

settings.register_profile("pilab", deadline=None, max_examples=60)
settings.load_profile("pilab")


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(SceneConfig(n_objects=4), 40, seed=11)


@pytest.fixture(scope="session")
def tiny_config(small_corpus):
    return model_config_for(small_corpus, "bbox_d", hidden=16, lang_layers=1, vis_layers=1,
                            cross_layers=1, heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion.

    The test body runs normally; the line is filled in from the test outcome.
    """
    entry = {"name": request.node.name, "detail": ""}
    yield entry
    report = getattr(request.node, "rep_call", None)
    status = "PASS" if report is not None and report.passed else "FAIL"
    line = f"criterion {entry['id']:>2}: {status}  {entry['title']}"
    if entry["detail"]:
        line += f"  [{entry['detail']}]"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
