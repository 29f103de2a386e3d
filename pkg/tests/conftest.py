import numpy as np
import pytest

from raymar.simulation import MaterialSpectrumModel, build_phantom, spine_phantom
from raymar.volume import ConeBeamGeometry, Volume3D

ACCEPTANCE_RESULTS = []


def record_acceptance(number: int, name: str, passed: bool, detail: str):
    ACCEPTANCE_RESULTS.append((number, name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_geom():
    # coarse detector that still covers a 48 mm field of view
    return ConeBeamGeometry(647.7, 1147.7, (96, 24), (170.0, 120.0), n_views=90)


@pytest.fixture(scope="session")
def model():
    return MaterialSpectrumModel.default()


@pytest.fixture(scope="session")
def small_spine(model):
    spec = spine_phantom(dims=(64, 64, 64), spacing=(1.0, 1.0, 1.0), scale=0.5)
    vol, labels = build_phantom(spec, model, 70.0)
    return spec, vol, labels


def ball(dims, spacing, radius, mu, center=(0.0, 0.0, 0.0)) -> Volume3D:
    v = Volume3D.zeros(dims, spacing)
    x, y, z = v.voxel_centers()
    r2 = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2
    return v.with_data(np.where(r2 <= radius * radius, mu, 0.0))
