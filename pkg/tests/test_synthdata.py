"""Synthetic scene oracle: renders, depth, flow, determinism and the
epipolar-consistency premises the pipeline relies on."""

import numpy as np
import pytest

from rstab import synthdata
from rstab.geometry import Pose, project, unproject
from rstab.synthdata import (
    PlaneSpec,
    QuadSpec,
    SceneSpec,
    gt_flow,
    make_trajectory,
    preset_scene,
    render_ground_truth,
    scene_from_json,
    scene_to_json,
    synth_scene,
)


def flat_scene(depth=5.0, n_frames=6, jitter=True):
    plane = PlaneSpec(point=(0.0, 0.0, depth), normal=(0.0, 0.0, -1.0),
                      tex_seed=3, tex_scale=1.2)
    return SceneSpec(planes=(plane,), n_frames=n_frames, width=32, height=32,
                     focal=32.0, seed=5,
                     jitter_rot=0.012 if jitter else 0.0,
                     jitter_trans=0.07 if jitter else 0.0,
                     base_velocity=(0.02, 0.0, 0.0))


class TestSceneSpec:
    def test_needs_a_plane(self):
        with pytest.raises(ValueError):
            SceneSpec(planes=())

    def test_json_round_trip(self):
        spec = preset_scene("dynamic", n_frames=9, size=48)
        back = scene_from_json(scene_to_json(spec))
        assert back == spec

    def test_preset_names(self):
        assert len(preset_scene("static").quads) == 0
        assert len(preset_scene("parallax").quads) == 1
        dyn = preset_scene("dynamic")
        assert any(np.linalg.norm(q.velocity) > 0 for q in dyn.quads)
        with pytest.raises(ValueError):
            preset_scene("wobble")


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        spec = flat_scene()
        ds1, occ1 = synth_scene(spec)
        ds2, occ2 = synth_scene(spec)
        for a, b in zip(ds1.frames, ds2.frames):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.depth, b.depth)
            if a.flow_to_next is not None:
                assert np.array_equal(a.flow_to_next, b.flow_to_next)
            assert np.array_equal(a.pose.translation, b.pose.translation)
        for a, b in zip(occ1, occ2):
            assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        spec = flat_scene()
        other = SceneSpec(planes=spec.planes, n_frames=spec.n_frames,
                          width=32, height=32, focal=32.0, seed=6)
        ds1, _ = synth_scene(spec)
        ds2, _ = synth_scene(other)
        assert not np.array_equal(ds1.frames[0].pose.translation,
                                  ds2.frames[0].pose.translation)


class TestRenderGroundTruth:
    def test_fronto_parallel_depth_constant(self):
        spec = flat_scene(depth=5.0)
        _, depth = render_ground_truth(spec, Pose.identity(), 0.0)
        assert np.allclose(depth, 5.0, atol=1e-9)

    def test_matches_input_frame_exactly(self):
        spec = flat_scene()
        ds, _ = synth_scene(spec)
        img, depth = render_ground_truth(spec, ds.frames[3].pose, 3.0)
        assert np.array_equal(img, ds.frames[3].image)
        assert np.array_equal(depth, ds.frames[3].depth)

    def test_plane_color_is_texture_at_intersection(self):
        # closed-form ray-plane intersection for an off-axis pixel
        spec = flat_scene(depth=5.0)
        p = spec.planes[0]
        k = spec.intrinsics()
        img, _ = render_ground_truth(spec, Pose.identity(), 0.0)
        u, v = 7, 20
        hit = np.array([(u - k.cx) / k.fx * 5.0, (v - k.cy) / k.fy * 5.0, 5.0])
        from rstab.synthdata import _plane_basis, texture

        n, e1, e2 = _plane_basis(p.normal)
        rel = hit - np.asarray(p.point)
        ref = texture(np.array([rel @ e1]), np.array([rel @ e2]), p.tex_seed,
                      p.tex_scale, p.base_color, p.contrast)[0]
        assert np.allclose(img[v, u], ref, atol=1e-12)

    def test_dynamic_object_moves(self):
        spec = preset_scene("dynamic", n_frames=10)
        quad = spec.quads[0]
        img0, d0 = render_ground_truth(spec, Pose.identity(), 0.0)
        img9, d9 = render_ground_truth(spec, Pose.identity(), 9.0)
        # the quad sits exactly on the z = 4 plane; the tilted floor never does
        hit0 = np.isclose(d0, quad.center[2], atol=1e-9)
        hit9 = np.isclose(d9, quad.center[2], atol=1e-9)
        assert hit0.any() and hit9.any()
        # the quad's silhouette shifts by its velocity over 9 frames
        c0 = np.argwhere(hit0).mean(axis=0)
        c9 = np.argwhere(hit9).mean(axis=0)
        expect_px = 9 * quad.velocity[0] * spec.focal / quad.center[2]
        assert abs((c9 - c0)[1] - expect_px) < 1.0

    def test_non_finite_pose_rejected(self):
        spec = flat_scene()
        bad = Pose.identity()
        object.__setattr__(bad, "translation", np.array([np.inf, 0.0, 0.0]))
        with pytest.raises(ValueError):
            render_ground_truth(spec, bad, 0.0)


class TestGtFlow:
    def test_zero_for_same_frame(self):
        spec = flat_scene()
        ds, _ = synth_scene(spec)
        flow, occ = gt_flow(spec, ds.poses(), 2, 2)
        assert np.allclose(flow, 0.0, atol=1e-9)
        # border pixels are conservatively flagged (the occlusion check
        # samples the target depth map, which is strict at the image edge)
        assert not occ[1:-1, 1:-1].any()

    def test_static_flow_matches_projection(self):
        spec = preset_scene("static", n_frames=8)
        ds, _ = synth_scene(spec)
        k = ds.intrinsics
        flow, _ = gt_flow(spec, ds.poses(), 2, 5)
        h, w = k.height, k.width
        u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        pix = np.stack([u.ravel(), v.ravel()], axis=-1)
        uv, _, ok = project(pix, ds.frames[2].depth.ravel(),
                            ds.frames[2].pose, ds.frames[5].pose, k)
        assert ok.all()
        disp = uv - pix
        assert np.max(np.abs(disp - flow.reshape(-1, 2))) < 1e-6

    def test_composition_consistency(self):
        # chaining two consecutive flows approximates the direct two-step flow
        spec = preset_scene("static", n_frames=8)
        ds, _ = synth_scene(spec)
        from rstab.flow import compose_step

        f01, _ = gt_flow(spec, ds.poses(), 1, 2)
        f12, _ = gt_flow(spec, ds.poses(), 2, 3)
        f02, _ = gt_flow(spec, ds.poses(), 1, 3)
        comp, valid = compose_step(f01, np.ones(f01.shape[:2], dtype=bool),
                                   f12, np.ones(f12.shape[:2], dtype=bool))
        err = np.linalg.norm((comp - f02)[valid], axis=-1)
        assert np.quantile(err, 0.95) < 0.05

    def test_depth_flow_pose_consistency(self):
        # static pixels: unproject at t1, project into t2, compare with flow
        spec = preset_scene("static", n_frames=8)
        ds, _ = synth_scene(spec)
        k = ds.intrinsics
        t1, t2 = 3, 6
        flow, _ = gt_flow(spec, ds.poses(), t1, t2)
        pix = np.array([[8.0, 8.0], [30.0, 12.0], [50.0, 55.0]])
        d, _ = _sample(ds.frames[t1].depth, pix)
        world = unproject(pix, d, ds.frames[t1].pose, k)
        from rstab.geometry import project_world

        uv, _, ok = project_world(world, ds.frames[t2].pose, k)
        f, _ = _sample(flow, pix)
        assert ok.all()
        assert np.max(np.abs(uv - (pix + f))) < 1e-6

    def test_dynamic_pixels_break_epipolar_geometry(self):
        # the moving quad's flow disagrees with the static reprojection by
        # roughly its own image-space motion
        spec = preset_scene("dynamic", n_frames=8)
        ds, _ = synth_scene(spec)
        k = ds.intrinsics
        t1, t2 = 2, 6
        flow, _ = gt_flow(spec, ds.poses(), t1, t2)
        h, w = k.height, k.width
        u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        pix = np.stack([u.ravel(), v.ravel()], axis=-1)
        uv, _, _ = project(pix, ds.frames[t1].depth.ravel(),
                           ds.frames[t1].pose, ds.frames[t2].pose, k)
        resid = np.linalg.norm(uv - (pix + flow.reshape(-1, 2)), axis=-1)
        from rstab.synthdata import _hit_points

        _, vel, _ = _hit_points(spec, ds.frames[t1].pose, float(t1))
        on_quad = np.linalg.norm(vel, axis=-1) > 0
        assert on_quad.any()
        quad = spec.quads[0]
        min_motion = (t2 - t1) * abs(quad.velocity[0]) * k.fx / 6.0
        assert resid[on_quad].min() > 0.25 * min_motion
        assert np.median(resid[~on_quad]) < 1e-6


class TestTrajectory:
    def test_jitter_has_high_frequency_content(self):
        spec = flat_scene(n_frames=30)
        poses = make_trajectory(spec)
        trans = np.array([p.translation for p in poses])
        resid = trans[2:] - 2 * trans[1:-1] + trans[:-2]
        assert np.abs(resid).max() > 0.01

    def test_zero_jitter_linear_path(self):
        spec = flat_scene(n_frames=10, jitter=False)
        poses = make_trajectory(spec)
        for t, p in enumerate(poses):
            assert np.allclose(p.translation, [0.02 * t, 0.0, 0.0], atol=1e-12)
            assert np.allclose(p.rotation, [1.0, 0, 0, 0], atol=1e-12)

    def test_unbounded_scene_rejected(self):
        # a single floor plane leaves sky rays without an intersection
        floor = PlaneSpec(point=(0.0, 1.0, 0.0), normal=(0.0, -1.0, 0.0))
        spec = SceneSpec(planes=(floor,), n_frames=2, width=16, height=16,
                         focal=16.0, jitter_rot=0.0, jitter_trans=0.0)
        with pytest.raises(ValueError, match="unbounded"):
            synth_scene(spec)


class TestDatasetContract:
    def test_frames_validate(self, static_scene):
        _, ds, _ = static_scene
        for fr in ds.frames:
            fr.validate()
        assert ds.frames[-1].flow_to_next is None
        assert all(fr.flow_to_next is not None for fr in ds.frames[:-1])

    def test_occlusion_masks_align(self, dynamic_scene):
        _, ds, occ = dynamic_scene
        assert len(occ) == len(ds) - 1
        h, w = ds.frames[0].depth.shape
        assert all(m.shape == (h, w) and m.dtype == bool for m in occ)


def _sample(grid, pts):
    from rstab.features import sample_bilinear

    return sample_bilinear(grid, pts)
