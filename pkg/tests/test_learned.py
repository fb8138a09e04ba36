import csv

import numpy as np
import pytest

from conftest import small_scene_config
from errors import InvalidArgumentError
from learned import (GROUPS, LearnConfig, TrainResult, init_model, load_model, predict_scene,
                     prepare_scene, save_model, train, weight_gradients, write_training_outputs)
from metrics import PredictedScene
from net import save_checkpoint
from scenegen import generate_bundle


def quick_config(**overrides):
    values = dict(steps=4, points=50, render_resolution=24, log_every=0)
    values.update(overrides)
    return LearnConfig.from_defaults(**values)


class TestLearnConfig:
    def test_defaults(self):
        config = LearnConfig.from_defaults()
        assert config.views == 2
        assert config.render.resolution == (32, 32)
        assert config.layout_hidden == 256
        assert config.stage_out_scale == pytest.approx(0.01)

    @pytest.mark.parametrize("overrides", [{"steps": 0}, {"lr": 0.0}, {"views": 0}])
    def test_invalid(self, overrides):
        with pytest.raises(InvalidArgumentError):
            LearnConfig.from_defaults(**overrides)


class TestModel:
    def test_every_group_initialised(self, rng):
        weights = init_model(quick_config(), rng)
        for group in GROUPS:
            assert any(name.startswith(group + ".") for name in weights)
        assert all(np.all(np.isfinite(w)) for w in weights.values())

    def test_save_and_load(self, rng, tmp_path):
        weights = init_model(quick_config(), rng)
        path = str(tmp_path / "model.uslw")
        save_model(weights, path)
        loaded = load_model(path)
        assert set(loaded) == set(weights)
        for name in weights:
            np.testing.assert_array_equal(loaded[name], weights[name])

    def test_load_rejects_partial_model(self, rng, tmp_path):
        weights = {k: v for k, v in init_model(quick_config(), rng).items() if not k.startswith("layout.")}
        path = str(tmp_path / "partial.uslw")
        save_checkpoint(path, weights)
        with pytest.raises(InvalidArgumentError, match="layout"):
            load_model(path)


class TestScenes:
    def test_prepare_needs_enough_views(self, bundle, rng):
        with pytest.raises(InvalidArgumentError):
            prepare_scene(bundle, quick_config(views=bundle.num_views + 1), rng)

    def test_prepare_uses_reference_silhouette(self, bundle, rng):
        scene = prepare_scene(bundle, quick_config(), rng)
        np.testing.assert_array_equal(scene.image > 0, bundle.instance_maps[0] > 0)
        assert len(scene.targets) == 2
        assert len(scene.boxes) == bundle.num_objects

    def test_predict_scene(self, bundle, rng):
        config = quick_config()
        scene = predict_scene(init_model(config, rng), bundle, config)
        assert isinstance(scene, PredictedScene)
        assert scene.scene_id == bundle.scene_id
        assert len(scene.meshes) == bundle.num_objects
        for mesh, layout in zip(scene.meshes, scene.layouts):
            assert mesh.space_tag == "world"
            assert np.all(np.isfinite(mesh.vertex_values))
            assert config.bounds.z0 <= layout["z"] <= config.bounds.z1

    def test_weight_gradients(self, bundle, rng):
        config = quick_config()
        weights = init_model(config, rng)
        grads = weight_gradients(weights, prepare_scene(bundle, config, rng), config)
        assert set(grads) == set(weights)
        for name, grad in grads.items():
            assert grad.shape == weights[name].shape
            assert np.all(np.isfinite(grad))
        assert any(np.any(grads[name] != 0.0) for name in grads if name.startswith("layout."))


class TestTraining:
    def test_needs_scenes(self):
        with pytest.raises(InvalidArgumentError):
            train([], quick_config())

    def test_short_run(self, bundle, tmp_path):
        result = train([bundle], quick_config(steps=3))
        assert [row["step"] for row in result.trace] == [0, 1, 2]
        assert all(np.isfinite(row["loss"]) for row in result.trace)
        write_training_outputs(result, str(tmp_path))
        assert set(load_model(str(tmp_path / "model.uslw"))) == set(result.weights)
        with open(tmp_path / "train_trace.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "scene_id", "loss", "l3d"]
        assert len(rows) == 4

    def test_loss_drop(self):
        trace = [{"loss": value} for value in (4.0, 4.0, 2.0, 2.0)]
        assert TrainResult({}, trace).loss_drop(window=2) == pytest.approx(0.5)

    @pytest.mark.slow
    def test_training_lowers_loss(self, bundle):
        result = train([bundle], quick_config(steps=60, lr=3e-3))
        assert result.loss_drop(window=10) > 0.0

    @pytest.mark.slow
    def test_ten_scene_training_halves_loss(self):
        scene_config = small_scene_config()
        bundles = [generate_bundle(scene_config, 0, i, views=4) for i in range(10)]
        config = LearnConfig.from_defaults(log_every=0)
        weights = init_model(config, np.random.default_rng(0))
        grads = weight_gradients(weights, prepare_scene(bundles[0], config, np.random.default_rng(0)), config)
        assert [name for name, grad in grads.items() if not np.any(grad != 0.0)] == []
        result = train(bundles, config, weights)
        assert len(result.trace) == config.steps
        assert result.loss_drop(window=50) >= 0.5
