import pytest
import torch

from swinmae.config import ModelConfig


@pytest.fixture
def tiny_config():
    """16x16 single-channel images, 2-pixel patches, three stages."""
    return ModelConfig(
        image_size=(16, 16), patch=2, embed_dim=8,
        enc_depths=(2, 2, 2), down_depths=(2, 2, 2), dec_depths=(2, 2),
        heads=(1, 2, 2), window=2, mlp_ratio=2.0,
    )


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


# -- acceptance verdicts -----------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary; details come from ``record_property("detail", ...)``.

_VERDICTS: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.failed and rep.when == "setup"):
        return
    n, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0][:160] if call.excinfo else "error"
    verdict = "PASS" if rep.passed else "FAIL"
    _VERDICTS[n] = f"[{verdict}] criterion {n:>2} {title}: {detail}".rstrip(": ")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[n])
