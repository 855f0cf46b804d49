import numpy as np
import pytest

skdata = pytest.importorskip("skimage.data")


def camera_crop(top=200, left=220, size=64):
    return skdata.camera()[top:top + size, left:left + size].astype(np.float64)[None]


def moon_crop(top=200, left=200, size=64):
    return skdata.moon()[top:top + size, left:left + size].astype(np.float64)[None]


def coins_crop(top=100, left=100, size=64):
    return skdata.coins()[top:top + size, left:left + size].astype(np.float64)[None]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def camera64():
    return camera_crop()


@pytest.fixture(scope="session")
def test_images():
    return {
        "camera": camera_crop(),
        "camera-b": camera_crop(100, 100),
        "moon": moon_crop(),
    }


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
