import numpy as np
import pytest

from silgrad import autodiff as ad
from silgrad import render, scene, se3
from silgrad.mesh import TriMesh

RNG = np.random.default_rng(99)


def cam(fx=100.0, size=64, near=0.01, far=10.0):
    return render.PinholeCamera(fx, fx, size / 2.0, size / 2.0, size, size, near, far)


# --------------------------------------------------------------- projection

def test_project_optical_axis():
    kp, behind = render.project_point(cam(fx=100.0, size=64), [0.0, 0.0, 1.0])
    assert (kp.x, kp.y) == (32.0, 32.0)
    assert not behind


def test_project_offset_point():
    kp, _ = render.project_point(cam(fx=100.0, size=64), [0.1, 0.0, 1.0])
    assert (kp.x, kp.y) == (42.0, 32.0)


def test_project_gradient_is_fx_over_z():
    c = cam(fx=100.0, size=64)

    def f(p):
        xy, _ = render.project(c, p)
        return ad.take(xy, (0, 0))

    rep = ad.finite_diff_check(f, np.array([[0.1, 0.0, 1.0]]), epsilon=1e-7)
    assert rep.passed
    np.testing.assert_allclose(rep.analytic[0, 0], 100.0, rtol=1e-9)


def test_project_behind_camera_flagged_and_clamped():
    c = cam()
    xy, behind = render.project(c, np.array([[0.0, 0.0, -0.5], [0.0, 0.0, 1.0]]))
    assert behind.tolist() == [True, False]
    assert np.all(np.isfinite(xy))


def test_camera_validation():
    with pytest.raises(ValueError):
        render.PinholeCamera(-1, 1, 0, 0, 64, 64)
    with pytest.raises(ValueError):
        render.PinholeCamera(100, 100, 32, 32, 8, 8)
    with pytest.raises(ValueError):
        render.PinholeCamera(100, 100, 32, 32, 64, 64, near=2.0, far=1.0)


# ------------------------------------------------------------- hard raster

def quad_mesh(side=1.0, z=1.0, x_shift=0.0):
    h = side / 2.0
    verts = np.array([[-h + x_shift, -h, z], [h + x_shift, -h, z],
                      [h + x_shift, h, z], [-h + x_shift, h, z]])
    return TriMesh(verts, np.array([[0, 1, 2], [0, 2, 3]]))


def test_hard_empty_scene_is_zero():
    img = render.rasterize_hard([], cam())
    assert img.kind == "hard"
    assert img.pixels.sum() == 0.0


def test_hard_full_frustum_triangle_is_one():
    tri = TriMesh(np.array([[-100, -100, 1.0], [300, -100, 1.0], [-100, 300, 1.0]]),
                  np.array([[0, 1, 2]]))
    img = render.rasterize_hard([(tri, se3.RigidTransform.identity())], cam())
    assert img.pixels.min() == 1.0


def test_hard_unit_square_area_exact():
    c = cam(fx=100.0, size=128)
    img = render.rasterize_hard([(quad_mesh(), se3.RigidTransform.identity())], c)
    assert img.pixels.sum() == 10000.0
    img.validate()


def test_hard_edge_rule_half_integer_boundary():
    # left edge lands exactly on pixel centers; half-open coverage keeps 100x100
    c = cam(fx=100.0, size=128)
    img = render.rasterize_hard([(quad_mesh(x_shift=0.005), se3.RigidTransform.identity())], c)
    assert img.pixels.sum() == 10000.0


def test_hard_shared_diagonal_no_seam():
    # rotate the quad so the internal diagonal crosses many pixel centers
    rot = se3.RigidTransform(se3.rotation_about_axis([0, 0, 1], 0.3), [0, 0, 0])
    img = render.rasterize_hard([(quad_mesh(), rot)], cam(fx=100.0, size=128))
    from scipy import ndimage
    filled = ndimage.binary_fill_holes(img.pixels > 0.5)
    np.testing.assert_array_equal(filled, img.pixels > 0.5)


def test_hard_principal_point_shift_translates_mask():
    sc = scene.reference_scene(64)
    q = np.array([0.05, -0.05, 0.13, 0.4, 0.1, -0.2, 0.5])
    mask0 = scene.render_masks(sc, sc.base.rotation[None], sc.base.translation[None],
                               q[None], "hard")[0]
    c = sc.camera
    c2 = render.PinholeCamera(c.fx, c.fy, c.cx + 3, c.cy + 2, c.width, c.height,
                              c.near, c.far)
    sc2 = scene.ToolScene(sc.chain, sc.meshes, sc.base, c2)
    mask1 = scene.render_masks(sc2, sc.base.rotation[None], sc.base.translation[None],
                               q[None], "hard")[0]
    np.testing.assert_array_equal(mask1[2:, 3:], mask0[:-2, :-3])


def test_hard_behind_near_plane_triangles_dropped():
    img = render.rasterize_hard([(quad_mesh(z=-1.0), se3.RigidTransform.identity())], cam())
    assert img.pixels.sum() == 0.0


# ------------------------------------------------------------- soft raster

def test_soft_pixel_on_edge_is_half():
    verts = np.array([[[31.5, 10.0], [31.5, 50.0], [60.0, 30.0]]])
    faces = np.array([[0, 1, 2]])
    occ = render.soft_occupancy(verts, faces, np.ones((1, 1), bool), 64, 64, sigma_r=0.41)
    assert occ[0, 29, 31] == 0.5


def test_soft_saturation_inside_and_outside():
    verts = np.array([[[10.0, 10.0], [50.0, 10.0], [30.0, 50.0]]])
    faces = np.array([[0, 1, 2]])
    occ = render.soft_occupancy(verts, faces, np.ones((1, 1), bool), 64, 64, sigma_r=0.41)
    assert occ[0, 25, 29] > 1.0 - 1e-9      # deep inside
    assert occ[0, 1, 1] < 1e-9              # far outside (beyond halo: exactly 0)


def test_soft_rejects_bad_temperature():
    with pytest.raises(ValueError):
        render.soft_occupancy(np.zeros((1, 3, 2)), np.array([[0, 1, 2]]),
                              np.ones((1, 1), bool), 64, 64, sigma_r=0.0)


def test_soft_growth_monotone():
    verts = np.array([[[20.0, 20.0], [44.0, 22.0], [30.0, 44.0]]])
    faces = np.array([[0, 1, 2]])
    occ0 = render.soft_occupancy(verts, faces, np.ones((1, 1), bool), 64, 64, sigma_r=0.41)
    centroid = verts.mean(axis=1, keepdims=True)
    grown = centroid + (verts - centroid) * 1.15
    occ1 = render.soft_occupancy(grown, faces, np.ones((1, 1), bool), 64, 64, sigma_r=0.41)
    assert np.all(occ1 - occ0 >= -1e-12)


def visible_config(rng):
    base = np.array([0.05, -0.05, 0.13, 0.4, 0.1, -0.2, 0.5])
    jitter = rng.uniform(-1, 1, 7) * np.array([0.06, 0.06, 0.02, 0.5, 0.25, 0.25, 0.25])
    return base + jitter


def test_soft_converges_to_hard_mask():
    sc = scene.reference_scene(64)
    rng = np.random.default_rng(404)
    ious = []
    for _ in range(6):
        q = visible_config(rng)[None]
        hard = scene.render_masks(sc, sc.base.rotation[None], sc.base.translation[None],
                                  q, "hard")[0]
        soft = scene.render_masks(sc, sc.base.rotation[None], sc.base.translation[None],
                                  q, "soft", sigma_r=1e-6)[0]
        soft_bin = soft > 0.5
        hard_bin = hard > 0.5
        union = np.logical_or(soft_bin, hard_bin).sum()
        inter = np.logical_and(soft_bin, hard_bin).sum()
        assert union > 50  # tool visibly in frame
        ious.append(inter / union)
    assert min(ious) > 0.95, ious


def test_soft_gradients_match_finite_differences_ten_params():
    # perturbations act in the normalized (dimensionless) parameter space of
    # the correction vector; a raw 1e-4 step in meters would exceed the soft
    # band's metric length scale and be dominated by FD truncation
    sc = scene.reference_scene(64)
    q_vis = np.array([0.4, 0.1, -0.2, 0.5])
    q_first = np.array([0.05, -0.05, 0.13])
    pose0, _ = se3.transform_to_euler(sc.base)
    params0 = np.concatenate([pose0.euler, pose0.translation, q_vis])
    scale = np.array([0.175] * 3 + [0.02] * 3 + [0.25] * 4)

    def f(pn):
        p = ad.add(ad.mul(pn, scale), params0)[None]
        r = se3.euler_to_matrix_diff(ad.take(p, (..., slice(0, 3))))
        t = ad.take(p, (..., slice(3, 6)))
        q = ad.concatenate([np.tile(q_first, (1, 1)), ad.take(p, (..., slice(6, 10)))],
                           axis=-1)
        mask = scene.render_masks(sc, r, t, q, "soft")
        return ad.reduce_sum(mask)

    rep = ad.finite_diff_check(f, np.zeros(10), epsilon=1e-4, tolerance=1e-3)
    assert rep.passed, rep


def test_soft_gradient_zero_without_triangles():
    tape = ad.Tape()
    v = ad.leaf(tape, np.zeros((1, 3, 2)))
    occ = render.soft_occupancy(v, np.array([[0, 1, 2]]), np.zeros((1, 1), bool),
                                64, 64, sigma_r=0.41)
    assert ad._val(occ).sum() == 0.0


# ------------------------------------------------------------- mask files

def test_pgm_round_trip_hard(tmp_path):
    img = render.SilhouetteImage((RNG.uniform(size=(32, 32)) > 0.6).astype(float), "hard")
    p = tmp_path / "m.pgm"
    render.write_pgm(p, img)
    back = render.read_pgm(p)
    assert back.kind == "hard"
    np.testing.assert_array_equal(back.pixels, img.pixels)


def test_pgm_soft_quantized_to_255(tmp_path):
    img = render.SilhouetteImage(RNG.uniform(size=(16, 16)), "soft")
    p = tmp_path / "m.pgm"
    render.write_pgm(p, img)
    back = render.read_pgm(p, kind="soft")
    assert np.abs(back.pixels - img.pixels).max() <= 0.5 / 255.0 + 1e-12


def test_silf_round_trip_lossless_f32(tmp_path):
    pix = RNG.uniform(size=(20, 24)).astype(np.float32).astype(float)
    img = render.SilhouetteImage(pix, "soft")
    p = tmp_path / "m.silf"
    render.write_silf(p, img)
    back = render.read_silf(p, kind="soft")
    np.testing.assert_array_equal(back.pixels, pix)


def test_silf_corrupt_raises_with_path(tmp_path):
    p = tmp_path / "bad.silf"
    p.write_bytes(b"SILF\x10\x00\x10\x00short")
    with pytest.raises(ValueError, match="bad.silf"):
        render.read_silf(p)
    with pytest.raises(FileNotFoundError):
        render.read_silf(tmp_path / "missing.silf")


def test_mask_kind_invariants():
    with pytest.raises(ValueError):
        render.SilhouetteImage(np.zeros((4, 4)), "fuzzy")
    bad = render.SilhouetteImage(np.full((4, 4), 0.5), "hard")
    with pytest.raises(ValueError):
        bad.validate()
