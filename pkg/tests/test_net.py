import struct

import numpy as np
import pytest

import diff
from errors import InvalidArgumentError
from geom import Box2D, Camera, Frustum, LayoutBounds, icosphere, mesh_edges
from net import (CHECKPOINT_MAGIC, FeatureMap, RefinementState, bilinear_sample, conv3x3, conv_backbone,
                 fixed_backbone, graph_conv, init_conv_weights, init_layout_weights, init_stage_weights,
                 layout_head_forward, load_checkpoint, refine_stage, roi_pool, roialign_coordinates,
                 roimap_coordinates, save_checkpoint)

BOUNDS = LayoutBounds(0.05, 1.0, 1.0, 5.0)


@pytest.fixture
def wide_camera():
    return Camera(100.0, 100.0, 64.0, 64.0, 128, 128)


@pytest.fixture
def frustum():
    return Frustum(Box2D(8.0, 16.0, 88.0, 56.0), 2.0, 0.5)


def dense_graph_conv(features, edges, w0, w1):
    adj = np.zeros((len(features), len(features)))
    adj[edges[:, 0], edges[:, 1]] = 1.0
    adj[edges[:, 1], edges[:, 0]] = 1.0
    return np.maximum(features @ w0 + adj @ features @ w1, 0.0)


class TestBilinearSample:
    def test_constant_map(self, rng):
        values = np.full((2, 5, 6), 3.7)
        out = bilinear_sample(values, rng.uniform(-2.0, 8.0, (20, 2)))
        np.testing.assert_allclose(out, 3.7)

    def test_cell_centre_and_midpoint(self):
        values = np.arange(2 * 4 * 5, dtype=np.float64).reshape(2, 4, 5)
        out = bilinear_sample(values, np.array([[2.0, 1.0], [2.5, 1.0]]))
        np.testing.assert_allclose(out[0], values[:, 1, 2])
        np.testing.assert_allclose(out[1], 0.5 * (values[:, 1, 2] + values[:, 1, 3]))

    def test_border_clamp(self):
        values = np.arange(12, dtype=np.float64).reshape(1, 3, 4)
        out = bilinear_sample(values, np.array([[-5.0, -5.0], [10.0, 10.0]]))
        np.testing.assert_allclose(out[:, 0], [0.0, 11.0])

    def test_gradients(self, rng):
        values = rng.normal(size=(3, 6, 7))
        # keep clear of cell boundaries where the interpolant has kinks
        coords = rng.integers(0, 5, (10, 2)) + rng.uniform(0.2, 0.8, (10, 2))
        assert diff.gradcheck(lambda v: diff.sum(bilinear_sample(v, coords)), values, tolerance=1e-6).passed
        assert diff.gradcheck(lambda c: diff.sum(diff.sqnorm(bilinear_sample(values, c))), coords,
                              tolerance=1e-6).passed


class TestVertexSampling:
    CORNERS = np.array([[-1.0, -1.0, 0.0], [1.0, 1.0, 0.0]])

    def test_roimap_is_isotropic(self, wide_camera, frustum):
        coords = roimap_coordinates(wide_camera, frustum, self.CORNERS, 2.0)
        np.testing.assert_allclose(coords[0], [8.0 / 2 - 0.5, 16.0 / 2 - 0.5], atol=1e-9)
        spread = coords[1] - coords[0]
        assert spread[0] / spread[1] == pytest.approx(2.0)

    def test_roialign_rescales_per_axis(self, wide_camera, frustum):
        coords = roialign_coordinates(wide_camera, frustum, self.CORNERS, 14)
        np.testing.assert_allclose(coords, [[-0.5, -0.5], [13.5, 13.5]], atol=1e-9)

    def test_corners_independent_of_depth(self, wide_camera, frustum):
        near = roimap_coordinates(wide_camera, frustum, np.array([[0.5, -0.25, -1.0]]), 1.0)
        far = roimap_coordinates(wide_camera, frustum, np.array([[0.5, -0.25, 1.0]]), 1.0)
        np.testing.assert_allclose(near, far, atol=1e-9)

    def test_roi_pool_of_constant_map(self, frustum):
        fmap = FeatureMap(np.full((4, 64, 64), 2.0), 2.0)
        np.testing.assert_allclose(roi_pool(fmap, frustum.box, 7), np.full(4, 2.0))

    def test_invalid_feature_map(self):
        with pytest.raises(InvalidArgumentError):
            FeatureMap(np.zeros((4, 4)), 2.0)
        with pytest.raises(InvalidArgumentError):
            FeatureMap(np.zeros((1, 4, 4)), 0.0)


class TestGraphConv:
    @pytest.fixture
    def graph(self, rng):
        mesh = icosphere(1)
        return rng.normal(size=(mesh.num_vertices, 4)), mesh_edges(mesh)

    def test_zero_weights(self, graph):
        features, edges = graph
        out = graph_conv(features, edges, np.zeros((4, 3)), np.zeros((4, 3)))
        np.testing.assert_array_equal(out, 0.0)

    def test_identity(self, graph):
        features, edges = graph
        features = np.abs(features)
        out = graph_conv(features, edges, np.eye(4), np.zeros((4, 4)))
        np.testing.assert_allclose(out, features)

    def test_matches_dense_adjacency(self, graph, rng):
        features, edges = graph
        w0, w1 = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        np.testing.assert_allclose(graph_conv(features, edges, w0, w1),
                                   dense_graph_conv(features, edges, w0, w1), atol=1e-12)

    def test_dimension_mismatch(self, graph):
        features, edges = graph
        with pytest.raises(InvalidArgumentError):
            graph_conv(features, edges, np.zeros((3, 2)), np.zeros((3, 2)))
        with pytest.raises(InvalidArgumentError):
            graph_conv(features, edges, np.zeros((4, 2)), np.zeros((4, 3)))

    def test_edge_out_of_range(self, graph):
        features, _ = graph
        with pytest.raises(InvalidArgumentError):
            graph_conv(features, np.array([[0, len(features)]]), np.eye(4), np.eye(4))


class TestRefineStage:
    @pytest.fixture
    def setup(self, camera, rng):
        image = rng.random((64, 64))
        fmap = fixed_backbone(image)
        frustum = Frustum(Box2D(16.0, 12.0, 48.0, 52.0), 2.0, 0.6)
        state = RefinementState.from_mesh(icosphere(1))
        return fmap, frustum, state

    def test_zero_output_layer_is_identity(self, camera, rng, setup):
        fmap, frustum, state = setup
        weights = init_stage_weights(fmap.channels, 8, rng, out_scale=0.0)
        out = refine_stage(state, fmap, camera, frustum, weights)
        np.testing.assert_array_equal(out.vertices, state.vertices)
        np.testing.assert_array_equal(out.offsets, 0.0)
        assert out.stage == 1
        assert out.features.shape == (state.vertices.shape[0], 8)

    @pytest.mark.parametrize("sampler", ["roimap", "roialign"])
    def test_vertices_stay_in_cube(self, camera, rng, setup, sampler):
        fmap, frustum, state = setup
        weights = init_stage_weights(fmap.channels, 8, rng, out_scale=10.0)
        out = refine_stage(state, fmap, camera, frustum, weights, sampler=sampler)
        assert np.all(np.abs(out.vertices) <= 1.0)
        assert not np.allclose(out.vertices, state.vertices)

    def test_permutation_equivariant(self, camera, rng, setup):
        fmap, frustum, state = setup
        weights = init_stage_weights(fmap.channels, 8, rng, out_scale=0.5)
        perm = rng.permutation(len(state.vertices))
        inverse = np.argsort(perm)
        permuted = RefinementState(state.vertices[perm], inverse[state.edges])
        a = refine_stage(state, fmap, camera, frustum, weights)
        b = refine_stage(permuted, fmap, camera, frustum, weights)
        np.testing.assert_allclose(b.vertices, a.vertices[perm], atol=1e-12)

    def test_unknown_sampler(self, camera, rng, setup):
        fmap, frustum, state = setup
        with pytest.raises(InvalidArgumentError):
            refine_stage(state, fmap, camera, frustum, init_stage_weights(fmap.channels, 4, rng), sampler="nearest")

    def test_state_outside_cube(self):
        with pytest.raises(InvalidArgumentError):
            RefinementState(np.array([[0.0, 0.0, 1.5]]), np.zeros((0, 2), dtype=np.int64))


class TestLayoutHead:
    def test_zero_weights_give_mid_bounds(self, rng):
        weights = {k: np.zeros_like(v) for k, v in init_layout_weights(6, rng, hidden=16).items()}
        rho, z = layout_head_forward(np.ones(6), weights, BOUNDS)
        np.testing.assert_allclose(rho, [0.525])
        np.testing.assert_allclose(z, [3.0])

    def test_outputs_within_bounds(self, rng):
        weights = init_layout_weights(6, rng, hidden=16, categories=3)
        rho, z = layout_head_forward(rng.normal(size=6) * 5.0, weights, BOUNDS)
        assert rho.shape == (3,) and z.shape == (3,)
        assert np.all((rho > BOUNDS.rho0) & (rho < BOUNDS.rho1))
        assert np.all((z > BOUNDS.z0) & (z < BOUNDS.z1))

    def test_input_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            layout_head_forward(np.ones(5), init_layout_weights(6, rng, hidden=16), BOUNDS)


class TestBackbones:
    def test_fixed_backbone_shape(self):
        fmap = fixed_backbone(np.zeros((32, 40)))
        assert diff.value(fmap.values).shape == (5, 16, 20)
        assert fmap.stride == 2.0

    def test_flat_image_has_no_edges(self):
        fmap = fixed_backbone(np.full((16, 16), 0.3))
        np.testing.assert_allclose(fmap.values[0], 0.3)
        np.testing.assert_allclose(fmap.values[1:3], 0.0)

    def test_invalid_image(self):
        with pytest.raises(InvalidArgumentError):
            fixed_backbone(np.zeros((1, 8)))

    def test_conv3x3_centre_tap_is_identity(self, rng):
        x = rng.normal(size=(2, 7, 9))
        w = np.zeros((18, 2))
        w[4, 0] = w[13, 1] = 1.0
        np.testing.assert_allclose(conv3x3(x, w, np.zeros(2)), x)

    def test_conv3x3_stride_two(self, rng):
        x = rng.normal(size=(1, 7, 9))
        w = np.zeros((9, 1))
        w[4, 0] = 1.0
        np.testing.assert_allclose(conv3x3(x, w, np.zeros(1), stride=2), x[:, ::2, ::2])

    def test_conv_backbone(self, rng):
        fmap = conv_backbone(rng.random((16, 15)), init_conv_weights(rng, channels=(4, 6)))
        assert diff.value(fmap.values).shape == (6, 8, 8)
        assert np.all(diff.value(fmap.values) >= 0.0)

    def test_conv_weight_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            conv3x3(rng.normal(size=(2, 4, 4)), np.zeros((9, 1)), np.zeros(1))

    def test_conv_gradient(self, rng):
        x = rng.normal(size=(2, 5, 5))
        b = rng.normal(size=3)
        assert diff.gradcheck(lambda w: diff.sum(diff.tanh(conv3x3(x, w, b))), rng.normal(size=(18, 3)),
                              tolerance=1e-6).passed


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"a": rng.normal(size=(3, 4)), "b": np.arange(5.0), "scalar": np.array(2.5)}
        path = tmp_path / "w.uslw"
        save_checkpoint(str(path), arrays)
        loaded = load_checkpoint(str(path))
        assert sorted(loaded) == ["a", "b", "scalar"]
        for name, value in arrays.items():
            np.testing.assert_array_equal(loaded[name], value)
        assert path.read_bytes()[:4] == CHECKPOINT_MAGIC

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.uslw"
        path.write_bytes(b"NOPE\x01\x00")
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(str(path))

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v9.uslw"
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<H", 9))
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(str(path))

    def test_truncated(self, tmp_path, rng):
        path = tmp_path / "w.uslw"
        save_checkpoint(str(path), {"a": rng.normal(size=(8, 8))})
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(str(path))

    def test_missing(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            load_checkpoint(str(tmp_path / "absent.uslw"))
