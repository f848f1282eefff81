import numpy as np
import pytest

from bundlemap.geom import DesignParams, GridSpec, build_domain, sample_geometry_cloud
from bundlemap.model import NbmConfig, NbmModel
from bundlemap.train import TrainConfig, fit_normalization, generate_dataset, train


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(6, 6)


@pytest.fixture(scope="session")
def wide_tab():
    # the midpoint tab misses every node on a 6-node edge
    return DesignParams.midpoint().with_values(tab_width=0.3)


@pytest.fixture(scope="session")
def tiny_config():
    return NbmConfig(d_geo=4, d_field=6, d_key=5, geo_hidden=8, enc_hidden=8, dec_hidden=8)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(4, 2, 3, 6, grid=GridSpec(6, 6), seed=3, cloud_size=12)


@pytest.fixture(scope="session")
def tiny_model(tiny_config, tiny_dataset):
    model = NbmModel.initialize(tiny_config, seed=1)
    model.norm = fit_normalization(tiny_dataset)
    model, _ = train(model, tiny_dataset, TrainConfig(epochs=3, batch_size=4, seed=2))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_cloud(params, grid, n=16, seed=0):
    dom = build_domain(params, grid)
    return dom, sample_geometry_cloud(dom, n, seed)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'} {name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
