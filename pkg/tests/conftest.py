import random
from pathlib import Path

import pytest

from sflc.blockdev import BlockImage
from sflc.crypto import FAST_COST
from sflc.header import format_device

GOLDEN = Path(__file__).parent / "golden"

_acceptance: dict[int, tuple[str, str]] = {}


@pytest.fixture
def cost():
    return FAST_COST


@pytest.fixture
def make_image(tmp_path):
    """Format a fresh image of ``blocks`` blocks; returns its path."""
    counter = iter(range(10**6))

    def make(blocks: int, passwords, seed: int | None = 0, skip_randfill: bool = False) -> Path:
        path = tmp_path / f"img{next(counter)}.img"
        rng = random.Random(seed) if seed is not None else None
        with BlockImage.create(path, blocks) as image:
            format_device(image, [p.encode() if isinstance(p, str) else p for p in passwords],
                          skip_randfill=skip_randfill, rng=rng, cost=FAST_COST)
        return path

    return make


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "FAIL"
        prev = _acceptance.get(n)
        if prev is None or prev[1] == "PASS":
            _acceptance[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        title, status = _acceptance[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {title}")
