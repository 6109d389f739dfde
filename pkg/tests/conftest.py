import numpy as np
import pytest

from texsplat.scene import Camera, GaussianCloud, logit, look_at


def random_cloud(n: int, seed: int = 0, dtype=np.float64, spread: float = 0.3) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    return GaussianCloud(
        position=rng.uniform(-spread, spread, (n, 3)).astype(dtype),
        raw_scale=np.log(rng.uniform(0.08, 0.2, (n, 3))).astype(dtype),
        rotation=rng.normal(size=(n, 4)).astype(dtype),
        raw_opacity=logit(rng.uniform(0.3, 0.8, n)).astype(dtype),
        color=rng.uniform(0, 1, (n, 3)).astype(dtype),
        raw_ti=rng.normal(size=n).astype(dtype),
    )


def front_camera(size: int = 16, distance: float = 2.0, focal: float | None = None, t: float = 0.0) -> Camera:
    c = (size - 1) / 2
    f = focal if focal is not None else 1.25 * size
    return Camera(f, f, c, c, size, size, look_at([0.0, 0.0, -distance], [0.0, 0.0, 0.0]), t=t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
