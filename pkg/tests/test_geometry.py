import math

import numpy as np
import pytest

from gazenet.geometry import (EYEBALL, IRIS, GazemapSpec, angles_to_vector, angular_error_deg, ellipse_mask,
                              iris_center, iris_ellipse, mask_centroid, render_gazemap, vector_to_angles)

SPEC = GazemapSpec(75, 45)


def test_spec_radii():
    assert SPEC.eyeball_radius == 27.0
    assert SPEC.iris_offset_radius == pytest.approx(27 * math.sqrt(3) / 2, abs=1e-9)
    assert SPEC.iris_offset_radius == pytest.approx(23.3827, abs=1e-4)
    with pytest.raises(ValueError):
        GazemapSpec(0, 45)


def test_vector_examples():
    np.testing.assert_allclose(angles_to_vector(0.0, 0.0), [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(angles_to_vector(math.pi / 2, 0.0), [0, -1, 0], atol=1e-15)
    np.testing.assert_allclose(vector_to_angles([-math.sin(0.3), 0.0, -math.cos(0.3)]), [0.0, 0.3], atol=1e-15)


def test_vector_round_trip():
    g = np.random.default_rng(0).uniform(-math.pi / 2, math.pi / 2, (1000, 2))
    v = angles_to_vector(g[:, 0], g[:, 1])
    np.testing.assert_allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(vector_to_angles(v), g, atol=1e-9)


def test_vector_to_angles_rejects_non_unit():
    with pytest.raises(ValueError):
        vector_to_angles([0.0, 0.0, -2.0])


def test_angular_error():
    assert angular_error_deg((0.0, 0.0), (0.0, 0.0)) == 0.0
    assert angular_error_deg((0.0, 0.0), (0.0, math.pi / 2)) == pytest.approx(90.0)
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-1.2, 1.2, (1000, 2)), rng.uniform(-1.2, 1.2, (1000, 2))
    np.testing.assert_array_equal(angular_error_deg(a, b), angular_error_deg(b, a))
    g = rng.uniform(-1.2, 1.2, (1000, 2))
    assert np.all(angular_error_deg(g, g) == 0.0)


def test_iris_center_examples():
    assert iris_center(SPEC, 0.0, 0.0) == (37.5, 22.5)
    u, v = iris_center(SPEC, 0.0, math.pi / 6)
    assert (u, v) == (pytest.approx(25.8087, abs=1e-4), 22.5)
    u, v = iris_center(SPEC, math.pi / 6, 0.0)
    assert (u, v) == (37.5, pytest.approx(10.8087, abs=1e-4))


def test_iris_ellipse_examples():
    e = iris_ellipse(SPEC, 0.0, 0.0)
    assert e.center == (37.5, 22.5) and e.major_diameter == 27.0 and e.minor_diameter == 27.0
    assert e.orientation == 0.0
    assert iris_ellipse(SPEC, 0.0, math.pi / 2 - 1e-9).minor_diameter < 1e-6
    assert iris_ellipse(SPEC, 0.0, math.pi / 6).minor_diameter == pytest.approx(23.3827, abs=1e-4)


def test_minor_axis_is_radial():
    rng = np.random.default_rng(2)
    for p, y in rng.uniform(-0.8, 0.8, (50, 2)):
        e = iris_ellipse(SPEC, p, y)
        du, dv = e.center[0] - 37.5, e.center[1] - 22.5
        direction = (math.cos(e.orientation), math.sin(e.orientation))
        assert abs(direction[0] * dv - direction[1] * du) < 1e-9 * max(1.0, math.hypot(du, dv))


def test_eyeball_channel_is_clipped_disk():
    """Pixel count agrees with the exact disk-map intersection area.

    The 27 px disk overhangs the 45 px map by 4.5 px top and bottom, so the
    count is compared with the clipped area rather than the full disk.
    """
    ball = render_gazemap(SPEC, 0.0, 0.0)[EYEBALL]
    r, half = 27.0, 22.5
    # area of the disk between v = -half and v = +half
    clipped = 2 * (half * math.sqrt(r * r - half * half) + r * r * math.asin(half / r))
    assert abs(ball.sum() - clipped) / clipped < 0.01


def test_eyeball_area_unclipped_within_two_percent():
    # r = 0.6 n always exceeds n / 2, so the disk is drawn on a canvas big enough to hold it
    e = iris_ellipse(SPEC, 0.0, 0.0)
    canvas = ellipse_mask(type(e)((50.0, 50.0), 54.0, 54.0, 0.0), 100, 100)
    assert abs(canvas.sum() - math.pi * 27 ** 2) / (math.pi * 27 ** 2) < 0.02


def test_iris_centroid_matches_closed_form_when_unclipped():
    """Centroid oracle for ellipses lying fully inside the map."""
    rng = np.random.default_rng(3)
    checked = 0
    for p, y in rng.uniform(-math.pi / 4, math.pi / 4, (1000, 2)):
        m = render_gazemap(SPEC, p, y)[IRIS]
        if m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any():
            continue
        checked += 1
        cu, cv = mask_centroid(m)
        u, v = iris_center(SPEC, p, y)
        assert math.hypot(cu - u, cv - v) < 1.0
    assert checked > 500


def test_iris_centroid_matches_supersampled_clipped_ellipse():
    """With edge clipping the raster centroid follows the clipped continuous region."""
    rng = np.random.default_rng(4)
    fine = 8
    for p, y in rng.uniform(-math.pi / 4, math.pi / 4, (60, 2)):
        e = iris_ellipse(SPEC, p, y)
        hi = ellipse_mask(type(e)((e.center[0] * fine, e.center[1] * fine), e.major_diameter * fine,
                                  e.minor_diameter * fine, e.orientation), 75 * fine, 45 * fine)
        ref = np.array(mask_centroid(hi)) / fine
        got = np.array(mask_centroid(render_gazemap(SPEC, p, y)[IRIS]))
        assert np.hypot(*(got - ref)) < 1.0


def test_internal_tangency():
    rng = np.random.default_rng(5)
    r, rp = SPEC.eyeball_radius, SPEC.iris_offset_radius
    # pixel centres within one pixel of the disk
    uu, vv = np.meshgrid(np.arange(75) + 0.5, np.arange(45) + 0.5)
    dilated = (uu - 37.5) ** 2 + (vv - 22.5) ** 2 <= (r + 1) ** 2
    for p, y in rng.uniform(-math.pi / 3, math.pi / 3, (1000, 2)):
        s2 = math.sin(y) ** 2 * math.cos(p) ** 2 + math.sin(p) ** 2
        assert rp * math.sqrt(s2) + (r / 2) * math.sqrt(1 - s2) <= r + 1e-9
        iris = render_gazemap(SPEC, p, y)[IRIS]
        assert not np.any(iris & ~dilated)


def test_horizontal_flip():
    rng = np.random.default_rng(6)
    for p, y in rng.uniform(-math.pi / 4, math.pi / 4, (200, 2)):
        a = render_gazemap(SPEC, p, y)[IRIS]
        b = render_gazemap(SPEC, p, -y)[IRIS]
        assert abs(mask_centroid(a)[0] - (75 - mask_centroid(b)[0])) < 1.0
        assert np.mean(a != b[:, ::-1]) < 0.01


def test_frontal_iris_is_symmetric_disk():
    iris = render_gazemap(SPEC, 0.0, 0.0)[IRIS]
    np.testing.assert_array_equal(iris, iris[:, ::-1])
    np.testing.assert_array_equal(iris, iris[::-1, :])
    assert mask_centroid(iris) == (37.5, 22.5)
