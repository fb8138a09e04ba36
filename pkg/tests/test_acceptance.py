import time

import numpy as np
import pytest
from joblib import Parallel, delayed

import settings
from fitter import FitConfig, fit_scene
from metrics import evaluate_scene
from scenegen import SceneGenConfig, generate_bundle

pytestmark = pytest.mark.slow

NUM_SCENES = 20
VIEWS = 10
FIT_BUDGET_SECONDS = 15 * 60


def _fit_and_score(bundle, **overrides):
    config = FitConfig.from_defaults(log_every=0, **overrides)
    result = fit_scene(bundle, config)
    row = evaluate_scene(result.to_prediction(), bundle, n_samples=2000)
    return row, result.trace


def _run(bundles, **overrides):
    return Parallel(n_jobs=settings.THREADS)(delayed(_fit_and_score)(b, **overrides) for b in bundles)


def _median(rows, key):
    return float(np.median([row[key] for row, _ in rows]))


@pytest.fixture(scope="module")
def benchmark():
    config = SceneGenConfig.from_defaults()
    return [generate_bundle(config, 0, i, views=VIEWS) for i in range(NUM_SCENES)]


@pytest.fixture(scope="module")
def five_view_fits(benchmark):
    start = time.perf_counter()
    rows = _run(benchmark, views=5)
    return rows, time.perf_counter() - start


class TestRecovery:
    def test_five_views_recover_shape_and_depth(self, five_view_fits):
        rows, elapsed = five_view_fits
        assert _median(rows, "mask2d_iou_heldout") >= 0.55
        assert _median(rows, "depth_rel_error") <= 0.10
        assert elapsed <= FIT_BUDGET_SECONDS

    def test_two_views_do_no_better_than_five(self, benchmark, five_view_fits):
        rows, _ = five_view_fits
        two = _run(benchmark, views=2)
        assert _median(two, "mask2d_iou_heldout") <= _median(rows, "mask2d_iou_heldout")

    def test_distance_term_is_needed_from_a_disjoint_start(self, benchmark):
        scenes = benchmark[:6]
        with_dist = _run(scenes, views=5, iterations=400, init="sphere_center")
        without = _run(scenes, views=5, iterations=400, init="sphere_center", use_dist=False)
        assert _median(without, "depth_rel_error") > _median(with_dist, "depth_rel_error")
        assert _median(without, "mask2d_iou_heldout") < _median(with_dist, "mask2d_iou_heldout")

    def test_smoothed_loss_mostly_non_increasing(self, benchmark):
        rows = _run(benchmark[:6], views=5, resample_points=False)
        for _, trace in rows:
            smoothed = np.array([row["smoothed"] for row in trace])
            steps = np.diff(smoothed)
            assert np.mean(steps <= 0.0) >= 0.9
