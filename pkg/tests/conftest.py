import numpy as np
import pytest

from latcast.grid import CatalogEntry, GridSpec, VariableCatalog


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    # 8 rows from 78.75 to -78.75, 16 columns; pole-free and even
    return GridSpec(
        n_lat=8,
        n_lon=16,
        lat_start_deg=78.75,
        lat_step_deg=-22.5,
        lon_start_deg=0.0,
        lon_step_deg=22.5,
        south_pole_cropped=True,
    )


@pytest.fixture
def small_catalog():
    return VariableCatalog(
        (
            CatalogEntry("msl", "single"),
            CatalogEntry("sst", "single"),
            CatalogEntry("z", "atmospheric", (700, 500)),
            CatalogEntry("lsm", "static"),
        )
    )
