import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mlk.geom import Pose, random_pose, random_rotation, relative_pose, rotation_about, rotation_angle_error
from mlk.scale_recovery import (
    DegenerateGeometry,
    Ray,
    ScaleMethod,
    absolute_pose_motion_avg,
    absolute_pose_umeyama,
    alignment_residual,
    median_rotation,
    query_rays,
    triangulate_point,
    umeyama_sim3,
)


def ring_of_references(rng, k, query):
    refs = []
    for _ in range(k):
        c = query.center + rng.normal(size=3) * 1.5
        refs.append(Pose.from_center(random_rotation(rng), c))
    return refs


# rays


def test_ray_toward_query_on_plus_x():
    ref = Pose.identity()
    query = Pose.from_center(np.eye(3), [2.0, 0.0, 0.0])
    (ray,) = query_rays([ref], [relative_pose(ref, query)])
    np.testing.assert_allclose(ray.origin, 0.0, atol=1e-15)
    np.testing.assert_allclose(ray.direction, [1.0, 0.0, 0.0], atol=1e-15)


def test_ray_ignores_translation_scale(rng):
    ref, query = random_pose(rng), random_pose(rng)
    rel = relative_pose(ref, query)
    (a,) = query_rays([ref], [rel])
    (b,) = query_rays([ref], [Pose(rel.rotation, 7.0 * rel.translation)])
    np.testing.assert_allclose(a.direction, b.direction, atol=1e-15)
    np.testing.assert_allclose(a.origin, b.origin)


def test_rays_pass_through_true_center(rng):
    query = random_pose(rng)
    refs = ring_of_references(rng, 10, query)
    rays = query_rays(refs, [relative_pose(r, query) for r in refs])
    assert max(r.distance(query.center) for r in rays) < 1e-9


def test_zero_baseline_rays_dropped(rng):
    query = random_pose(rng)
    refs = ring_of_references(rng, 3, query)
    rels = [relative_pose(r, query) for r in refs]
    rels[1] = Pose(rels[1].rotation, np.zeros(3))
    assert len(query_rays(refs, rels)) == 2
    with pytest.raises(DegenerateGeometry):
        query_rays(refs[:1], [Pose(rels[0].rotation, np.zeros(3))])


def test_ray_direction_is_unit():
    r = Ray([0, 0, 0], [3.0, 4.0, 0.0])
    assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-12)


# triangulation


def test_two_rays_intersect():
    rays = [Ray([0, 1, 0], [1, 0, 0]), Ray([1, 0, 0], [0, 1, 0])]
    np.testing.assert_allclose(triangulate_point(rays), [1, 1, 0], atol=1e-12)


def test_parallel_rays_are_degenerate():
    with pytest.raises(DegenerateGeometry):
        triangulate_point([Ray([0, 0, 0], [1, 0, 0]), Ray([0, 1, 0], [1, 0, 0])])
    with pytest.raises(DegenerateGeometry):
        triangulate_point([Ray([0, 0, 0], [1, 0, 0])])


def test_triangulation_matches_grid_search():
    rng = np.random.default_rng(7)
    target = np.array([0.3, -0.2, 0.1])
    rays = []
    for _ in range(5):
        o = rng.normal(size=3) * 2.0
        d = target - o + rng.normal(size=3) * 0.02
        rays.append(Ray(o, d))
    x = triangulate_point(rays)

    def argmin_on(axes):
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        total = np.zeros(len(grid))
        for r in rays:
            v = grid - r.origin
            total += np.sum((v - np.outer(v @ r.direction, r.direction)) ** 2, axis=1)
        return grid[np.argmin(total)]

    # coarse pass, then a 1e-3 lattice around the coarse minimizer
    coarse = argmin_on([np.arange(-1.0, 1.0001, 0.02)] * 3)
    fine = argmin_on([c + np.arange(-0.03, 0.03001, 1e-3) for c in coarse])
    assert np.max(np.abs(fine - x)) <= 1e-3


@given(st.integers(0, 10_000))
def test_triangulation_is_stationary_and_equivariant(seed):
    rng = np.random.default_rng(seed)
    rays = [Ray(rng.normal(size=3), rng.normal(size=3)) for _ in range(4)]
    try:
        x = triangulate_point(rays)
    except DegenerateGeometry:
        return
    grad = np.zeros(3)
    for r in rays:
        P = np.eye(3) - np.outer(r.direction, r.direction)
        grad += 2 * P @ (x - r.origin)
    assert np.linalg.norm(grad) < 1e-8 * max(1.0, np.linalg.norm(x))
    R, t = random_rotation(rng), rng.normal(size=3)
    moved = [Ray(R @ r.origin + t, R @ r.direction) for r in rays]
    np.testing.assert_allclose(triangulate_point(moved), R @ x + t, atol=1e-9 * max(1.0, np.linalg.norm(x)))


# rotation medoid


def test_medoid_examples(rng):
    R = random_rotation(rng)
    np.testing.assert_array_equal(median_rotation([R, R, R]), R)
    Rz = rotation_about([0, 0, 1], 90)
    np.testing.assert_array_equal(median_rotation([np.eye(3), np.eye(3), Rz]), np.eye(3))


def test_medoid_ties_go_to_lowest_index():
    a, b = np.eye(3), rotation_about([0, 0, 1], 30)
    np.testing.assert_array_equal(median_rotation([b, a]), b)


def test_medoid_resists_outliers():
    rng = np.random.default_rng(3)
    truth = random_rotation(rng)
    cluster = [rotation_about(rng.normal(size=3), rng.uniform(0, 2)) @ truth for _ in range(9)]
    outliers = [rotation_about(rng.normal(size=3), 90) @ truth for _ in range(2)]
    cands = cluster + outliers
    sums = [sum(rotation_angle_error(a, b) for b in cands) for a in cands]
    expected = cands[int(np.argmin(sums))]
    got = median_rotation(cands)
    np.testing.assert_array_equal(got, expected)
    assert any(np.array_equal(got, c) for c in cluster)


@given(st.integers(0, 10_000), st.integers(1, 7))
def test_medoid_is_member(seed, n):
    rng = np.random.default_rng(seed)
    cands = [random_rotation(rng) for _ in range(n)]
    got = median_rotation(cands)
    assert any(np.array_equal(got, c) for c in cands)


# motion averaging


def test_motion_averaging_exact_on_noise_free_data():
    rng = np.random.default_rng(11)
    for _ in range(10):
        query = random_pose(rng, 2.0)
        refs = ring_of_references(rng, 10, query)
        est = absolute_pose_motion_avg(refs, [relative_pose(r, query) for r in refs])
        assert np.linalg.norm(est.pose.center - query.center) < 1e-6
        assert rotation_angle_error(est.pose.R, query.R) < 1e-6
        assert est.method is ScaleMethod.MOTION_AVERAGING
        assert est.num_candidates == 10
        assert est.residual < 1e-9


def test_motion_averaging_needs_two_references(rng):
    query = random_pose(rng)
    refs = ring_of_references(rng, 1, query)
    with pytest.raises(DegenerateGeometry):
        absolute_pose_motion_avg(refs, [relative_pose(refs[0], query)])


def test_motion_averaging_survives_one_corrupted_rotation():
    rng = np.random.default_rng(5)
    query = random_pose(rng)
    refs = ring_of_references(rng, 10, query)
    rels = [relative_pose(r, query) for r in refs]
    bad = Pose.from_rt(rotation_about([1, 1, 0], 60) @ rels[4].R, rels[4].translation)
    rels[4] = bad
    est = absolute_pose_motion_avg(refs, rels)
    corrupted_error = rotation_angle_error(bad.R @ refs[4].R, query.R)
    assert rotation_angle_error(est.pose.R, query.R) < corrupted_error


def test_motion_averaging_scale_invariant(rng):
    query = random_pose(rng)
    refs = ring_of_references(rng, 5, query)
    rels = [relative_pose(r, query) for r in refs]
    a = absolute_pose_motion_avg(refs, rels)
    b = absolute_pose_motion_avg(refs, [Pose(r.rotation, r.translation * s) for r, s in zip(rels, [3, 0.1, 2, 9, 1])])
    np.testing.assert_allclose(a.pose.center, b.pose.center, atol=1e-9)


# Umeyama


def test_umeyama_identity():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    sim = umeyama_sim3(pts, pts)
    assert sim.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(sim.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(sim.translation, 0.0, atol=1e-12)


def test_umeyama_exact_recovery():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(20, 3))
    R = rotation_about([0, 0, 1], 30)
    dst = 2.5 * src @ R.T + np.array([1.0, 2.0, 3.0])
    sim = umeyama_sim3(src, dst)
    assert abs(sim.scale - 2.5) < 1e-9
    assert np.max(np.abs(sim.R - R)) < 1e-9
    assert np.max(np.abs(sim.translation - [1, 2, 3])) < 1e-9


def test_umeyama_reflection_corrected():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(8, 3))
    dst = src * np.array([1.0, 1.0, -1.0])  # mirror image: best proper rotation has det +1
    assert np.linalg.det(umeyama_sim3(src, dst).R) == pytest.approx(1.0)


def test_umeyama_degenerate_inputs():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateGeometry):
        umeyama_sim3(line, line)
    with pytest.raises(DegenerateGeometry):
        umeyama_sim3(np.eye(3)[:2], np.eye(3)[:2])


@given(st.integers(0, 10_000))
def test_umeyama_residual_invariant_to_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(6, 3))
    dst = 1.7 * src @ random_rotation(rng).T + rng.normal(size=3) + rng.normal(size=(6, 3)) * 0.1
    base = alignment_residual(umeyama_sim3(src, dst), src, dst)
    Ra, ta, Rb, tb = random_rotation(rng), rng.normal(size=3), random_rotation(rng), rng.normal(size=3)
    src2, dst2 = src @ Ra.T + ta, dst @ Rb.T + tb
    assert alignment_residual(umeyama_sim3(src2, dst2), src2, dst2) == pytest.approx(base, abs=1e-9)


def test_umeyama_pose_exact_recovery():
    rng = np.random.default_rng(9)
    query = random_pose(rng)
    refs = ring_of_references(rng, 5, query)
    # predictions in the first reference's frame at an arbitrary scale
    first = refs[0]
    rel = [relative_pose(first, p) for p in refs]
    s = 0.37
    pred_refs = [Pose(p.rotation, p.translation * s) for p in rel]
    q_rel = relative_pose(first, query)
    est = absolute_pose_umeyama(refs, pred_refs, Pose(q_rel.rotation, q_rel.translation * s))
    assert np.linalg.norm(est.pose.center - query.center) < 1e-9
    assert rotation_angle_error(est.pose.R, query.R) < 1e-9 * 180
    assert est.method is ScaleMethod.UMEYAMA


def test_umeyama_pose_needs_three_references(rng):
    refs = [random_pose(rng) for _ in range(2)]
    with pytest.raises(DegenerateGeometry):
        absolute_pose_umeyama(refs, refs, refs[0])


def test_scale_method_parse():
    assert ScaleMethod.parse("motion") is ScaleMethod.MOTION_AVERAGING
    assert ScaleMethod.parse("umeyama").min_references == 3
    with pytest.raises(ValueError):
        ScaleMethod.parse("ransac")
