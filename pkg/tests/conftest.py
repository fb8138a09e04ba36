import os

import numpy as np
import pytest

import settings
from geom import Camera, Mesh, icosphere
from scenegen import SceneGenConfig, generate_bundle, write_bundle

RUN_SLOW = os.getenv("USL_RUN_SLOW", "0").lower() in ("1", "true", "yes")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="slow; set USL_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _log_dir(tmp_path_factory, monkeypatch):
    monkeypatch.setattr(settings, "LOG_DIR", str(tmp_path_factory.getbasetemp() / "logs"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    """64x64 pinhole camera at the world origin."""
    return Camera(100.0, 100.0, 32.0, 32.0, 64, 64)


def make_sphere(radius=0.3, center=(0.0, 0.0, 2.0), level=3):
    base = icosphere(level)
    return Mesh(base.vertex_values * radius + np.asarray(center), base.faces, "view")


@pytest.fixture
def sphere():
    return make_sphere()


def small_scene_config(**overrides):
    values = dict(resolution=48, mesh_level=2, n_azimuth=4, elevations_deg=(0.0, 20.0))
    values.update(overrides)
    return SceneGenConfig.from_defaults(**values)


@pytest.fixture(scope="session")
def bundle():
    """Two-object scene, 4 views of 48x48."""
    return generate_bundle(small_scene_config(), 0, 0, views=4)


@pytest.fixture(scope="session")
def scene_dir(bundle, tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    path = root / bundle.scene_id
    write_bundle(bundle, str(path))
    return path
