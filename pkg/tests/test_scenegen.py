import json

import numpy as np
import pytest

from conftest import small_scene_config
from errors import InvalidArgumentError
from geom import LayoutBounds, project, world_to_view
from scenegen import (SceneGenConfig, SceneSpec, bake_scene, farthest_first, generate_bundle,
                      generate_cameras, generate_scene, list_scene_dirs, load_bundle,
                      read_scene_descriptor, scene_rng)


class TestConfig:
    def test_defaults(self):
        config = SceneGenConfig.from_defaults()
        assert config.objects == 2
        assert config.num_cameras == 24
        assert config.look_at == (0.0, -0.2, 1.7)

    def test_overrides_skip_none(self):
        config = SceneGenConfig.from_defaults(objects=None, resolution=64)
        assert config.objects == 2 and config.resolution == 64

    @pytest.mark.parametrize("overrides", [
        {"objects": 0},
        {"kinds": ("torus",)},
        {"scale_min": 0.6, "scale_max": 0.5},
        {"elevations_deg": ()},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(InvalidArgumentError):
            SceneGenConfig.from_defaults(**overrides)


class TestCameras:
    def test_farthest_first_order(self):
        order = farthest_first(8)
        assert order[:4] == [0, 4, 2, 6]
        assert sorted(order) == list(range(8))

    def test_first_two_views_face_each_other(self):
        cameras = generate_cameras(8, 1, 2.5, (0.0, -0.2, 1.7), [0.0])
        assert np.dot(cameras[0].rotation[2], cameras[1].rotation[2]) == pytest.approx(-1.0)

    def test_cameras_aim_at_target(self):
        target = np.array([0.0, -0.2, 1.7])
        for camera in generate_cameras(4, 2, 2.5, target, [0.0, 30.0], width=64, height=48):
            np.testing.assert_allclose(camera.rotation @ camera.rotation.T, np.eye(3), atol=1e-12)
            pixel, depth = project(camera, world_to_view(camera, target[None]))
            np.testing.assert_allclose(pixel[0], [32.0, 24.0], atol=1e-9)
            assert depth[0] == pytest.approx(2.5)

    def test_elevation_count_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            generate_cameras(4, 2, 2.5, (0.0, 0.0, 0.0), [0.0])


class TestGeneration:
    def test_scene_streams_are_independent(self):
        a = scene_rng(0, 0).random(4)
        assert not np.allclose(a, scene_rng(0, 1).random(4))
        np.testing.assert_array_equal(a, scene_rng(0, 0).random(4))

    def test_objects_follow_config(self):
        config = small_scene_config(objects=3)
        spec = generate_scene(config, scene_rng(7, 0), 7, 0)
        assert len(spec.objects) == 3
        assert spec.scene_id == "scene_0000"
        for obj in spec.objects:
            assert obj.kind in config.kinds
            assert config.x_min <= obj.position[0] <= config.x_max
            assert config.z_min <= obj.position[2] <= config.z_max
            assert np.all((obj.scale >= config.scale_min) & (obj.scale <= config.scale_max))
            # resting on the floor, +Y down
            assert obj.mesh(2).vertex_values[:, 1].max() <= 1e-9

    def test_deterministic(self, bundle):
        again = generate_bundle(small_scene_config(), 0, 0, views=4)
        for a, b in zip(bundle.instance_maps, again.instance_maps):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(bundle.gt_meshes, again.gt_meshes):
            np.testing.assert_array_equal(a.vertex_values, b.vertex_values)

    def test_views_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            generate_bundle(small_scene_config(), 0, 0, views=1)
        with pytest.raises(InvalidArgumentError):
            generate_bundle(small_scene_config(), 0, 0, views=9)

    def test_scene_spec_needs_two_cameras(self, bundle):
        with pytest.raises(InvalidArgumentError):
            SceneSpec(bundle.spec.objects, bundle.cameras[:1], 0)

    def test_layout_bounds_respected(self):
        bounds = LayoutBounds(0.05, 1.0, 1.0, 5.0)
        bundle = generate_bundle(small_scene_config(), 3, 1, views=2, bounds=bounds)
        for layout in bundle.gt_layouts:
            assert bounds.z0 < layout["z"] < bounds.z1
            assert bounds.rho0 < layout["rho"] < bounds.rho1
        assert bundle.stats["accepted"] == 1


class TestBake:
    def test_counts(self, bundle):
        assert bundle.num_views == 4
        assert bundle.num_objects == 2
        assert len(bundle.masks) == 4 and all(len(m) == 2 for m in bundle.masks)
        assert bundle.instance_maps[0].shape == (48, 48)
        assert set(np.unique(bundle.instance_maps[0])) <= {0, 1, 2}

    def test_every_object_visible_in_reference_view(self, bundle):
        for o in range(bundle.num_objects):
            assert bundle.masks[0][o].any()
            assert bundle.gt_layouts[o]["box"] is not None

    def test_composite_lies_inside_object_masks(self, bundle):
        for j in range(bundle.num_views):
            for o in range(bundle.num_objects):
                visible = bundle.instance_maps[j] == o + 1
                assert np.all(bundle.masks[j][o][visible])

    def test_background_depth(self, bundle):
        for inst, depth in zip(bundle.instance_maps, bundle.depth_maps):
            assert np.all(np.isinf(depth[inst == 0]))
            assert np.all(np.isfinite(depth[inst > 0]))

    def test_rebake_is_bit_identical(self, bundle):
        again = bake_scene(bundle.spec, bundle.num_views)
        for j in range(bundle.num_views):
            np.testing.assert_array_equal(again.instance_maps[j], bundle.instance_maps[j])
            np.testing.assert_array_equal(again.depth_maps[j], bundle.depth_maps[j])


class TestBundleIO:
    def test_round_trip(self, bundle, scene_dir):
        loaded = load_bundle(str(scene_dir))
        assert loaded.scene_id == bundle.scene_id
        assert loaded.num_views == bundle.num_views
        for j in range(bundle.num_views):
            np.testing.assert_array_equal(loaded.instance_maps[j], bundle.instance_maps[j])
            np.testing.assert_array_equal(loaded.depth_maps[j],
                                          bundle.depth_maps[j].astype(np.float32).astype(np.float64))
            for o in range(bundle.num_objects):
                np.testing.assert_array_equal(loaded.masks[j][o], bundle.masks[j][o])
            np.testing.assert_array_equal(loaded.cameras[j].rotation, bundle.cameras[j].rotation)
        for a, b in zip(loaded.gt_meshes, bundle.gt_meshes):
            np.testing.assert_array_equal(a.vertex_values, b.vertex_values)
            np.testing.assert_array_equal(a.faces, b.faces)
        assert loaded.gt_layouts == bundle.gt_layouts

    def test_descriptor_lists_files(self, scene_dir):
        data = read_scene_descriptor(str(scene_dir))
        assert "view_0/instance.png" in data["files"]
        for name in data["files"]:
            assert (scene_dir / name).is_file()

    def test_list_scene_dirs(self, scene_dir):
        assert list_scene_dirs(str(scene_dir)) == [str(scene_dir)]
        assert list_scene_dirs(str(scene_dir.parent)) == [str(scene_dir)]

    def test_missing_descriptor(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            read_scene_descriptor(str(tmp_path))
        with pytest.raises(InvalidArgumentError):
            list_scene_dirs(str(tmp_path / "absent"))

    def test_malformed_descriptor(self, tmp_path):
        (tmp_path / "scene.json").write_text("{not json")
        with pytest.raises(InvalidArgumentError):
            read_scene_descriptor(str(tmp_path))

    def test_invalid_descriptor(self, tmp_path, scene_dir):
        data = json.loads((scene_dir / "scene.json").read_text())
        data["cameras"] = data["cameras"][:1]
        (tmp_path / "scene.json").write_text(json.dumps(data))
        with pytest.raises(InvalidArgumentError):
            read_scene_descriptor(str(tmp_path))
