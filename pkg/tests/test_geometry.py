"""Rays, cameras and analytic SDFs."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdfrender.geometry import (FALLBACK_GRADIENT, SCENE_RADIUS, BumpySphere, Box, Camera,
                                Offset, Plane, Ray, Sphere, Union, camera_rays, eval_sdf,
                                format_shape, generate_rays, intrinsics_from_fov, look_at,
                                make_ray, parse_shape, ray_at, ray_sphere_hit, read_cameras,
                                sphere_interval, write_cameras)


def _identity_camera(w=64, h=48, fov=60.0):
    return Camera(intrinsics_from_fov(w, h, fov), np.eye(4), w, h)


def _central_diff(field, x, h=1e-5):
    g = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[k] = (field(x + e)[0][0] - field(x - e)[0][0]) / (2 * h)
    return g


class TestEvalSdf:
    def test_sphere_outside(self):
        v, g, flagged = eval_sdf(Sphere((0, 0, 0), 1.0), (2.0, 0.0, 0.0))
        assert v == 1.0
        npt.assert_array_equal(g, [1.0, 0.0, 0.0])
        assert not flagged

    def test_sphere_center_singularity(self):
        v, g, flagged = eval_sdf(Sphere((0, 0, 0), 1.0), (0.0, 0.0, 0.0))
        assert v == -1.0
        npt.assert_array_equal(g, FALLBACK_GRADIENT)
        assert flagged

    def test_bumpy_sphere_on_nominal_radius(self):
        shape = BumpySphere(0.8, 0.04, 6.0)
        rng = np.random.default_rng(0)
        d = rng.normal(size=(20000, 3))
        x = 0.8 * d / np.linalg.norm(d, axis=1, keepdims=True)
        v, _ = shape.evaluate(x)
        assert np.all(np.abs(v) <= 0.04 + 1e-12)
        # the bump reaches close to its amplitude somewhere on the sphere
        assert np.abs(v).max() > 0.03

    def test_non_finite_input_rejected(self):
        with pytest.raises(ValueError):
            eval_sdf(Sphere(), (np.nan, 0.0, 0.0))

    def test_plane_sign_convention(self):
        v, g, _ = eval_sdf(Plane((0, 0, 2), 0.5), (0.0, 0.0, 1.0))
        assert v == pytest.approx(0.5)
        npt.assert_allclose(g, [0, 0, 1])

    def test_box_values(self):
        box = Box((0.5, 0.5, 0.5))
        v, _ = box.evaluate(np.array([[1.0, 0, 0], [0, 0, 0], [1.0, 1.0, 0.5]]))
        npt.assert_allclose(v, [0.5, -0.5, np.sqrt(0.5)])

    def test_union_and_offset(self):
        u = Union((Sphere((-1, 0, 0), 0.5), Sphere((1, 0, 0), 0.5)))
        v, _ = u.evaluate(np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        npt.assert_allclose(v, [0.5, -0.5])
        o = Offset(Sphere(), 0.25)
        npt.assert_allclose(o.evaluate(np.zeros((1, 3)))[0], [-1.25])


class TestEikonalOracle:
    def test_sphere_and_plane_unit_gradient(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 2, size=(10_000, 3))
        for shape in (Sphere((0.1, -0.2, 0.3), 0.7), Plane((1, 2, -1), 0.3)):
            _, g = shape.evaluate(x)
            npt.assert_allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("shape", [Sphere((0.1, 0, 0), 0.6), Plane((0, 1, 1), 0.1),
                                       Box((0.3, 0.4, 0.5)), BumpySphere(0.8, 0.04, 6.0)])
    def test_gradient_matches_finite_differences(self, shape):
        rng = np.random.default_rng(2)
        for x in rng.uniform(-1, 1, size=(50, 3)):
            if isinstance(shape, Box) and np.sort(np.abs(np.abs(x) - 0.4))[0] < 1e-3:
                continue
            _, g = shape.evaluate(x[None])
            fd = _central_diff(shape, x)
            npt.assert_allclose(g[0], fd, rtol=1e-5, atol=1e-7)


class TestRays:
    def test_ray_at(self):
        r = Ray((0, 0, 0), (0, 0, 1), 0.5, 3.0)
        npt.assert_array_equal(ray_at(r, 2.0), [0, 0, 2])
        npt.assert_array_equal(ray_at(r, r.t_near), r.origin + r.t_near * r.direction)

    @given(st.lists(st.floats(-5, 5), min_size=7, max_size=7))
    def test_ray_at_matches_componentwise(self, v):
        d = np.array(v[3:6])
        if np.linalg.norm(d) < 1e-3:
            return
        d = d / np.linalg.norm(d)
        r = Ray(v[:3], d, 0.0, 10.0)
        t = abs(v[6])
        npt.assert_array_equal(ray_at(r, t), [v[0] + t * d[0], v[1] + t * d[1], v[2] + t * d[2]])

    def test_invalid_rays_rejected(self):
        with pytest.raises(ValueError):
            Ray((0, 0, 0), (0, 0, 2), 0.0, 1.0)
        with pytest.raises(ValueError):
            Ray((0, 0, 0), (0, 0, 1), 2.0, 1.0)
        with pytest.raises(ValueError):
            Ray((0, 0, 0), (0, 0, 1), -1.0, 1.0)

    def test_sphere_interval_matches_bisection(self):
        rng = np.random.default_rng(3)
        sph = Sphere((0, 0, 0), SCENE_RADIUS)
        for _ in range(20):
            o = rng.normal(size=3) * 3
            o *= 3.0 / np.linalg.norm(o)
            d = -o / np.linalg.norm(o) + 0.2 * rng.normal(size=3)
            d /= np.linalg.norm(d)
            tn, tf, hit = sphere_interval(o, d)
            if not hit[0]:
                continue
            lo, hi = 0.0, 0.5 * (tn[0] + tf[0])
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if sph.evaluate((o + mid * d)[None])[0][0] > 0:
                    lo = mid
                else:
                    hi = mid
            assert abs(tn[0] - lo) < 1e-9

    def test_ray_sphere_hit(self):
        assert ray_sphere_hit((0, 0, -3), (0, 0, 1), (0, 0, 0), 1.0) == pytest.approx(2.0)
        assert ray_sphere_hit((0, 0, -3), (0, 0, -1), (0, 0, 0), 1.0) is None

    def test_make_ray_from_inside(self):
        r = make_ray((0, 0, 0), (1, 0, 0))
        assert r.t_near == 0.0 and r.t_far == pytest.approx(SCENE_RADIUS)


class TestCamera:
    def test_principal_pixel_is_optical_axis(self):
        cam = _identity_camera(64, 48)
        npt.assert_allclose(cam.pixel_directions(31.5, 23.5), [0, 0, 1], atol=1e-15)

    def test_corner_pixel_angle(self):
        w, h, fov = 64, 48, 60.0
        cam = _identity_camera(w, h, fov)
        f = cam.intrinsics[0, 0]
        d = cam.pixel_directions(0, 0)
        dx, dy = (0.5 - w / 2) / f, (0.5 - h / 2) / f
        expected = np.arctan(np.hypot(dx, dy))
        assert np.arccos(d[2]) == pytest.approx(expected, abs=1e-12)

    def test_camera_looking_away_gives_empty_ray(self):
        M = look_at((0, 0, 5), target=(0, 0, 10))
        cam = Camera(intrinsics_from_fov(8, 8, 30), M, 8, 8)
        assert generate_rays(cam, (4, 4)).empty

    def test_pixel_out_of_range(self):
        with pytest.raises(IndexError):
            generate_rays(_identity_camera(8, 8), (8, 0))

    def test_non_orthonormal_rotation_rejected(self):
        M = np.eye(4)
        M[0, 0] = 2.0
        with pytest.raises(ValueError):
            Camera(np.eye(3), M, 4, 4)
        M = np.eye(4)
        M[0, 0] = -1.0
        with pytest.raises(ValueError):
            Camera(np.eye(3), M, 4, 4)

    def test_project_inverts_pixel_directions(self):
        M = look_at((2.0, -1.0, 1.5))
        cam = Camera(intrinsics_from_fov(40, 30, 45), M, 40, 30)
        d = cam.pixel_directions(np.array([3, 17]), np.array([5, 29]))
        uv = cam.project(cam.center + 2.0 * d)
        npt.assert_allclose(uv, [[3.5, 5.5], [17.5, 29.5]], atol=1e-9)

    def test_doubling_resolution_keeps_center_direction(self):
        cam = Camera(intrinsics_from_fov(32, 32, 40), look_at((0, 3, 1)), 32, 32)
        big = cam.scaled(2.0)
        # center of the image: continuous pixel (16, 16) vs (32, 32)
        npt.assert_allclose(cam.pixel_directions(15.5, 15.5), big.pixel_directions(31.5, 31.5),
                            atol=1e-15)

    def test_camera_rays_row_major(self):
        cam = _identity_camera(5, 3)
        o, d, *_ = camera_rays(cam)
        npt.assert_allclose(d[1], cam.pixel_directions(1, 0))
        npt.assert_allclose(d[5], cam.pixel_directions(0, 1))

    def test_camera_file_round_trip(self, tmp_path):
        cams = [Camera(intrinsics_from_fov(16, 12, 50), look_at(p), 16, 12)
                for p in [(3, 0, 0), (0, 3, 1), (0.5, 0.2, -3)]]
        write_cameras(tmp_path / "cams.txt", cams)
        back = read_cameras(tmp_path / "cams.txt")
        for a, b in zip(cams, back):
            npt.assert_array_equal(a.intrinsics, b.intrinsics)
            npt.assert_array_equal(a.camera_to_world, b.camera_to_world)
            assert (a.width, a.height) == (b.width, b.height)

    def test_camera_file_bad_line(self, tmp_path):
        (tmp_path / "c.txt").write_text("# header\n1 2 3\n")
        with pytest.raises(ValueError, match="27 values"):
            read_cameras(tmp_path / "c.txt")


class TestShapeText:
    @pytest.mark.parametrize("text", [
        "(sphere 0 0 0 0.5)", "(plane 0 0 1 0.2)", "(box 0.3 0.2 0.1)",
        "(bumpy-sphere 0.8 0.04 6)", "(union (sphere 0 0 0 0.5) (box 0.1 0.1 0.1))",
        "(offset (sphere 1 0 0 0.5) 0.1)"])
    def test_round_trip(self, text):
        shape = parse_shape(text)
        assert parse_shape(format_shape(shape)) == shape

    @pytest.mark.parametrize("text", ["", "(sphere 1 2)", "(cone 1 2 3)", "(sphere 0 0 0 1",
                                      "(union 1 2)", "(sphere 0 0 0 1) extra"])
    def test_malformed(self, text):
        with pytest.raises(ValueError):
            parse_shape(text)
