import itertools

import numpy as np
import pytest

import diff
from errors import BehindCameraError, DegenerateMeshError, InvalidArgumentError
from geom import (Box2D, Camera, Frustum, LayoutBounds, Mesh, backproject, frustum_homography,
                  icosphere, inverse_frustum_homography, layout_decode, load_obj, mesh_edges,
                  primitive_mesh, project, relative_transform, sample_surface, save_obj,
                  view_to_world, world_to_view, yaw_rotation)
from scenegen import generate_cameras

BOUNDS = LayoutBounds(0.05, 1.0, 1.0, 5.0)
CORNERS = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))


class TestIcosphere:
    @pytest.mark.parametrize("level,verts,faces,edges", [
        (0, 12, 20, 30),
        (1, 42, 80, 120),
        (3, 642, 1280, 1920),
    ])
    def test_counts(self, level, verts, faces, edges):
        mesh = icosphere(level)
        assert mesh.num_vertices == verts
        assert mesh.num_faces == faces
        assert len(mesh_edges(mesh)) == edges

    def test_vertices_on_unit_sphere(self):
        verts = icosphere(3).vertex_values
        np.testing.assert_allclose(np.linalg.norm(verts, axis=1), 1.0, atol=1e-12)

    def test_faces_point_outwards_consistently(self):
        mesh = icosphere(2)
        tri = mesh.vertex_values[mesh.faces]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        signs = np.sign(np.sum(normals * tri.mean(axis=1), axis=1))
        assert np.all(signs == signs[0])

    @pytest.mark.parametrize("level", [-1, 6, 2.5])
    def test_invalid_level(self, level):
        with pytest.raises(InvalidArgumentError):
            icosphere(level)

    def test_normalized_tag_and_valid(self):
        mesh = icosphere(1)
        assert mesh.space_tag == "normalized"
        mesh.validate()


class TestBox2D:
    def test_union_of_disjoint_boxes(self):
        assert Box2D(0, 0, 10, 10).union(Box2D(50, 50, 60, 60)).as_tuple() == (0, 0, 60, 60)

    def test_expand_and_clamp(self):
        box = Box2D(2, 3, 10, 12).expand(5).clamp(12, 12)
        assert box.as_tuple() == (0.0, 0.0, 12.0, 12.0)
        assert Box2D(20, 20, 30, 30).clamp(10, 10) is None

    def test_from_mask(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[2, 3] = True
        mask[4, 5] = True
        assert Box2D.from_mask(mask).as_tuple() == (3.0, 2.0, 6.0, 5.0)
        assert Box2D.from_mask(np.zeros((4, 4), dtype=bool)) is None

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            Box2D(5, 0, 5, 10)


class TestCamera:
    def test_non_orthonormal_rotation(self):
        with pytest.raises(InvalidArgumentError):
            Camera(100, 100, 32, 32, 64, 64, rotation=np.diag([1.0, 2.0, 1.0]))

    def test_non_positive_focal(self):
        with pytest.raises(InvalidArgumentError):
            Camera(0, 100, 32, 32, 64, 64)

    def test_dict_round_trip(self):
        cam = generate_cameras(4, 1, 2.5, (0.0, 0.0, 2.0))[1]
        back = Camera.from_dict(cam.to_dict())
        np.testing.assert_array_equal(back.rotation, cam.rotation)
        np.testing.assert_array_equal(back.translation, cam.translation)
        assert (back.fx, back.cx, back.width) == (cam.fx, cam.cx, cam.width)

    def test_camera_origin_maps_to_view_origin(self):
        cam = generate_cameras(4, 1, 2.5, (0.0, 0.0, 2.0))[2]
        center = -cam.rotation.T @ cam.translation
        np.testing.assert_allclose(world_to_view(cam, center[None]), 0.0, atol=1e-12)


class TestLayoutDecode:
    def test_midpoint(self):
        rho, z = layout_decode(0.5, 0.5, BOUNDS)
        assert rho == pytest.approx(0.525)
        assert z == pytest.approx(3.0)

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.2, 1.5])
    def test_out_of_range(self, t):
        with pytest.raises(InvalidArgumentError):
            layout_decode(t, 0.5, BOUNDS)
        with pytest.raises(InvalidArgumentError):
            layout_decode(0.5, t, BOUNDS)

    def test_within_bounds(self, rng):
        t = rng.uniform(1e-6, 1 - 1e-6, size=(2, 1000))
        rho, z = layout_decode(t[0], t[1], BOUNDS)
        assert np.all((rho > BOUNDS.rho0) & (rho < BOUNDS.rho1))
        assert np.all((z > BOUNDS.z0) & (z < BOUNDS.z1))

    def test_depth_gradient_is_the_depth_range(self, rng):
        for t in rng.uniform(0.01, 0.99, size=5):
            tape = diff.Tape()
            rho_t, z_t = tape.leaf(0.5), tape.leaf(t)
            _, z = layout_decode(rho_t, z_t, BOUNDS)
            grads = diff.backward(z)
            assert float(grads[z_t]) == BOUNDS.z1 - BOUNDS.z0
            assert float(grads[rho_t]) == 0.0


class TestFrustumHomography:
    def test_corners_reproject_onto_box(self, camera, rng):
        for _ in range(10_000):
            x0, y0 = rng.uniform(0.0, 40.0, size=2)
            w, h = rng.uniform(1.0, 24.0, size=2)
            box = Box2D(x0, y0, x0 + w, y0 + h)
            z = rng.uniform(1.0, 5.0)
            rho = rng.uniform(0.05, 1.0)
            view = frustum_homography(Frustum(box, z, rho), camera)(CORNERS)
            pixels, depth = project(camera, view)
            expected_x = np.where(CORNERS[:, 0] < 0, box.x0, box.x1)
            expected_y = np.where(CORNERS[:, 1] < 0, box.y0, box.y1)
            expected_d = z + CORNERS[:, 2] * rho / 2.0
            assert np.max(np.abs(pixels[:, 0] - expected_x)) < 1e-6
            assert np.max(np.abs(pixels[:, 1] - expected_y)) < 1e-6
            assert np.max(np.abs(depth - expected_d)) < 1e-6

    def test_inverse(self, camera, rng):
        frustum = Frustum(Box2D(10.0, 12.0, 40.0, 30.0), 2.2, 0.4)
        points = rng.uniform(-1.0, 1.0, size=(200, 3))
        view = frustum_homography(frustum, camera)(points)
        np.testing.assert_allclose(inverse_frustum_homography(frustum, camera)(view), points, atol=1e-9)

    def test_differentiable_in_layout(self, camera):
        box = Box2D(10.0, 10.0, 30.0, 20.0)
        pts = np.array([[0.3, -0.2, 0.5], [-0.7, 0.1, -0.9]])

        def depth_sum(layout):
            rho, z = layout_decode(diff.getitem(layout, 0), diff.getitem(layout, 1), BOUNDS)
            return diff.sum(frustum_homography(Frustum(box, z, rho), camera)(pts))

        assert diff.gradcheck(depth_sum, [0.4, 0.6], tolerance=1e-6).passed

    @pytest.mark.parametrize("z,rho,box", [
        (2.0, 0.0, Box2D(1, 1, 5, 5)),
        (0.2, 1.0, Box2D(1, 1, 5, 5)),
        (2.0, 0.5, Box2D(-1, 1, 5, 5)),
        (2.0, 0.5, Box2D(1, 1, 70, 5)),
    ])
    def test_invalid_frustum(self, camera, z, rho, box):
        with pytest.raises(InvalidArgumentError):
            Frustum(box, z, rho).validate(camera)


class TestProjection:
    def test_backproject_round_trip(self, camera, rng):
        points = np.column_stack([rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50), rng.uniform(0.5, 4, 50)])
        pixels, depth = project(camera, points)
        np.testing.assert_allclose(backproject(camera, pixels, depth), points, atol=1e-12)

    def test_optical_axis_hits_principal_point(self, camera):
        pixels, _ = project(camera, np.array([[0.0, 0.0, 3.0]]))
        np.testing.assert_allclose(pixels[0], [camera.cx, camera.cy])

    def test_behind_camera(self, camera):
        with pytest.raises(BehindCameraError):
            project(camera, np.array([[0.0, 0.0, -1.0]]))

    def test_relative_transform_matches_world_path(self, rng):
        cams = generate_cameras(8, 2, 2.5, (0.0, -0.2, 1.7), elevations_deg=[0.0, 30.0])
        world = rng.normal(0.0, 0.3, size=(20, 3)) + np.array([0.0, -0.2, 1.7])
        for i, j in [(0, 1), (0, 5), (3, 12)]:
            in_i = world_to_view(cams[i], world)
            np.testing.assert_allclose(relative_transform(cams[i], cams[j]).apply(in_i),
                                       world_to_view(cams[j], world), atol=1e-12)
            np.testing.assert_allclose(view_to_world(cams[i], in_i), world, atol=1e-12)

    def test_relative_transforms_compose(self):
        cams = generate_cameras(8, 2, 2.5, (0.0, -0.2, 1.7), elevations_deg=[0.0, 30.0])
        for i, j, k in [(0, 1, 2), (0, 5, 9), (3, 12, 7), (15, 4, 4)]:
            chained = relative_transform(cams[j], cams[k]).compose(relative_transform(cams[i], cams[j]))
            direct = relative_transform(cams[i], cams[k])
            np.testing.assert_allclose(chained.rotation, direct.rotation, atol=1e-10)
            np.testing.assert_allclose(chained.translation, direct.translation, atol=1e-10)
        own = relative_transform(cams[6], cams[6])
        np.testing.assert_allclose(own.rotation, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(own.translation, 0.0, atol=1e-10)


class TestSurfaceSampling:
    def test_points_on_surface(self, rng):
        mesh = icosphere(3)
        samples = sample_surface(mesh, 500, rng)
        tri = mesh.vertex_values[mesh.faces[samples.face_ids]]
        rebuilt = np.einsum("nk,nkd->nd", samples.barycentric, tri)
        np.testing.assert_allclose(samples.points, rebuilt, atol=1e-12)
        assert np.all(samples.barycentric >= 0)

    def test_deterministic(self):
        mesh = icosphere(2)
        a = sample_surface(mesh, 100, np.random.default_rng(7)).points
        b = sample_surface(mesh, 100, np.random.default_rng(7)).points
        np.testing.assert_array_equal(a, b)

    def test_gradient_flows_to_vertices(self, rng):
        mesh = icosphere(1)
        tape = diff.Tape()
        verts = tape.leaf(mesh.vertex_values)
        points = sample_surface(Mesh(verts, mesh.faces), 64, rng).points
        grads = diff.backward(diff.sum(diff.getitem(points, (slice(None), 0))))[verts]
        # barycentric weights sum to one per point
        assert grads[:, 0].sum() == pytest.approx(64.0)
        np.testing.assert_allclose(grads[:, 1:], 0.0)

    def test_degenerate_mesh(self, rng):
        mesh = Mesh(np.zeros((3, 3)), [[0, 1, 2]])
        with pytest.raises(DegenerateMeshError):
            sample_surface(mesh, 10, rng)


class TestPrimitives:
    @pytest.mark.parametrize("kind", ["icosphere", "cuboid", "cylinder", "superellipsoid"])
    def test_inside_bounding_box(self, kind):
        scale = np.array([0.4, 0.3, 0.5])
        verts = primitive_mesh(kind, scale, level=2, exponent=0.5).vertex_values
        assert np.all(np.abs(verts) <= scale / 2.0 + 1e-12)

    def test_cuboid_vertices_on_faces(self):
        scale = np.array([0.4, 0.3, 0.5])
        verts = primitive_mesh("cuboid", scale, level=2).vertex_values
        np.testing.assert_allclose(np.max(np.abs(verts) / (scale / 2.0), axis=1), 1.0, atol=1e-12)

    def test_ellipsoid(self):
        scale = np.array([0.4, 0.3, 0.5])
        verts = primitive_mesh("icosphere", scale, level=2).vertex_values
        np.testing.assert_allclose(np.sum((verts / (scale / 2.0)) ** 2, axis=1), 1.0, atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            primitive_mesh("torus", [1, 1, 1])

    def test_yaw(self):
        np.testing.assert_allclose(yaw_rotation(90.0) @ [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], atol=1e-12)


class TestObjIO:
    def test_round_trip_is_exact(self, tmp_path, rng):
        mesh = Mesh(rng.normal(size=(642, 3)), icosphere(3).faces, "world")
        path = tmp_path / "mesh.obj"
        save_obj(mesh, str(path))
        back = load_obj(str(path))
        np.testing.assert_array_equal(back.vertex_values, mesh.vertex_values)
        np.testing.assert_array_equal(back.faces, mesh.faces)

    def test_slash_faces_and_quads(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n")
        mesh = load_obj(str(path))
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_malformed(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 zero\n")
        with pytest.raises(InvalidArgumentError):
            load_obj(str(path))

    def test_missing(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            load_obj(str(tmp_path / "none.obj"))
