import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dense_video(rng, shape=(10, 10, 10), frames=30, density=0.15):
    """Random boolean occupancy video of shape (T, X, Y, Z)."""
    return rng.random((frames,) + tuple(shape)) < density


def dense_history(video, t, coord, w):
    """Oracle OTS: occupancy of ``coord`` at t-w+1..t, zeros outside the video."""
    out = np.zeros(w, dtype=np.uint8)
    x, y, z = coord
    inside = all(0 <= c < s for c, s in zip(coord, video.shape[1:]))
    for j in range(w):
        tt = t - (w - 1) + j
        if tt >= 0 and inside:
            out[j] = video[tt, x, y, z]
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
