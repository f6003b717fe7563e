import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointpixel.augment import AugmentConfig, make_view, make_views
from pointpixel.errors import ConfigError, ContractError, DegenerateFeatureError
from pointpixel.harness.gradcheck import TOLERANCE, check_instance
from pointpixel.model import (
    EncoderParams, assemble_inputs, backward, branch_masks, encode2d, encode3d, forward, fuse, init_params,
    inputs_2d, knn_indices, load_checkpoint, params_from_bytes, params_to_bytes, save_checkpoint,
    scene_features, scene_inputs,
)
from pointpixel.pairing import HardnessSchedule, build_pair_batch
from pointpixel.scene import Scene, default_camera, generate_scene


def unit_norms_ok(f):
    return np.abs(np.linalg.norm(f, axis=1) - 1.0).max() < 1e-9


def zero_params(h=6, d=6, **kw):
    z = {"W1": np.zeros((h, 6)), "b1": np.zeros(h), "W2": np.zeros((d, 2 * h)), "b2": np.zeros(d)}
    z.update(V1=z["W1"], bv1=z["b1"], V2=z["W2"], bv2=z["b2"])
    z.update(kw)
    return EncoderParams(**z)


@pytest.fixture(scope="module")
def views():
    return make_views(generate_scene(2), AugmentConfig(), seed=0)


class TestEncoders:
    @pytest.mark.parametrize("encode", [encode3d, encode2d])
    def test_identity_like(self, encode):
        w1 = np.eye(6)
        w2 = np.concatenate([np.eye(6), np.zeros((6, 6))], axis=1)
        p = zero_params(W1=w1, W2=w2, V1=w1, V2=w2, knn_k=1)
        x = np.eye(6)[[0, 3, 5]] * np.array([[2.0], [0.5], [1.0]])
        f = encode(x, np.arange(3)[:, None], p)
        np.testing.assert_allclose(f, np.eye(6)[[0, 3, 5]], atol=1e-15)

    @pytest.mark.parametrize("encode", [encode3d, encode2d])
    def test_zero_weights_give_normalized_bias(self, encode):
        b = np.array([3.0, 0.0, 4.0, 0.0, 0.0, 0.0])
        p = zero_params(b2=b, bv2=b)
        x = np.random.default_rng(0).normal(size=(5, 6))
        f = encode(x, np.zeros((5, 2), dtype=int), p)
        np.testing.assert_allclose(f, np.tile(b / 5.0, (5, 1)), atol=1e-15)

    @pytest.mark.parametrize("encode", [encode3d, encode2d])
    def test_unit_rows(self, encode):
        rng = np.random.default_rng(1)
        p = init_params(seed=3)
        f = encode(rng.normal(size=(8, 6)), rng.integers(0, 8, (8, 8)), p)
        assert f.shape == (8, 16) and unit_norms_ok(f)

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateFeatureError):
            encode3d(np.ones((2, 6)), np.zeros((2, 1), dtype=int), zero_params())

    def test_bad_neighbors(self):
        p = init_params()
        with pytest.raises(ContractError):
            encode3d(np.ones((2, 6)), np.array([[0], [2]]), p)
        with pytest.raises(ContractError):
            encode3d(np.full((2, 6), np.nan), np.zeros((2, 1), dtype=int), p)

    def test_params_validation(self):
        with pytest.raises(ConfigError):
            init_params(hidden=2)
        with pytest.raises(ConfigError):
            init_params(fusion_mode="middle")
        p = init_params()
        with pytest.raises(ContractError):
            p.with_tensors({"b1": np.full(32, np.inf)})

    def test_init_is_seeded_and_bounded(self):
        a, b = init_params(seed=4), init_params(seed=4)
        assert a.identical_to(b) and not a.identical_to(init_params(seed=5))
        assert np.abs(a.W1).max() <= 1 / np.sqrt(6) and np.abs(a.W2).max() <= 1 / np.sqrt(64)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        p = init_params(hidden=8, dim=4, knn_k=3, seed=seed)
        x = rng.normal(size=(12, 6))
        nb = rng.integers(0, 12, (12, 3))
        perm = rng.permutation(12)
        inv = np.argsort(perm)
        f = encode3d(x, nb, p)
        g = encode3d(x[perm], inv[nb[perm]], p)
        np.testing.assert_allclose(g, f[perm], atol=1e-13)


class TestTwoDimensionalBranch:
    def test_adjacent_pixels_closer_than_random(self):
        view = make_view(generate_scene(6), default_camera(1.0))
        x = inputs_2d(view)
        rows = np.arange(len(x))
        p = init_params(seed=1)
        f = encode2d(x, knn_indices(view.uv, rows, p.knn_k), p)
        nearest = knn_indices(view.uv, rows, 1)[:, 0]
        rand = np.random.default_rng(0).permutation(len(x))
        adjacent = np.linalg.norm(f - f[nearest], axis=1).mean()
        random = np.linalg.norm(f - f[rand], axis=1).mean()
        assert adjacent < random

    def test_pixel_and_point_neighborhoods_differ_across_occlusion(self):
        rng = np.random.default_rng(0)
        g = np.linspace(-0.3, 0.3, 6)
        front = np.array([[a, b, 0.6] for a in g for b in g])
        back = np.column_stack([rng.uniform(-1, 1, (3000, 2)), np.full(3000, -0.8)])
        pts = np.concatenate([front, back])
        s = Scene(pts, np.full((len(pts), 3), 0.5), np.zeros(len(pts)), 1.0, 4)
        view = make_view(s, default_camera(1.0))
        rows = np.arange(len(front))
        n3 = knn_indices(view.scene.points, rows, 4)
        n2 = knn_indices(view.uv, rows, 4)
        differ = [set(a) != set(b) for a, b in zip(n3, n2)]
        assert any(differ)
        # point-space neighbors of a front point stay on the front plane
        assert n3.max() < len(front)
        assert n2.max() >= len(front)

    def test_depth_channel_is_centered(self):
        view = make_view(generate_scene(1), default_camera(1.0))
        assert abs(np.median(inputs_2d(view)[:, 5])) < 0.5


class TestKnn:
    def test_excludes_self(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [6.5, 0, 0]])
        np.testing.assert_array_equal(knn_indices(pts, np.arange(4), 2), [[1, 2], [0, 2], [1, 0], [2, 1]])

    def test_too_few_points_repeats(self):
        pts = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        np.testing.assert_array_equal(knn_indices(pts, np.array([0]), 3), [[1, 1, 1]])


class TestFuse:
    def test_early_is_f3d(self):
        f = np.eye(4)[:2]
        assert fuse(f, None, "early") is f

    def test_hybrid_identical_rows(self):
        r = np.array([[0.6, 0.8, 0.0, 0.0]])
        np.testing.assert_allclose(fuse(r, r, "hybrid"), np.concatenate([r, r], axis=1) / np.sqrt(2), atol=1e-15)

    @pytest.mark.parametrize("mode", ["early", "late", "hybrid"])
    def test_unit_rows(self, mode):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(6, 4))
        b = rng.normal(size=(6, 4))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        assert unit_norms_ok(fuse(a, b, mode))

    def test_errors(self):
        with pytest.raises(ContractError):
            fuse(np.eye(4)[:2], np.eye(4)[:3], "late")
        with pytest.raises(ConfigError):
            fuse(np.eye(4), np.eye(4), "mid")


class TestAssembleAndForward:
    def make_batch(self, views, seed=0):
        v1, v2, corr = views
        sched = HardnessSchedule.default(v2.scene.extent, 100)
        return build_pair_batch(v2.scene.points, corr, 10, 16, sched, np.random.default_rng(seed))

    def test_disturbed_rows_are_spliced(self, views):
        v1, v2, _ = views
        batch = self.make_batch(views)
        inp = assemble_inputs(v1, v2, batch, 8, "hybrid", "p4contrast")
        _, pos3, dis3 = inp.split(inp.x3)
        np.testing.assert_array_equal(dis3[:, :3], v2.scene.points[batch.positive_idx])
        np.testing.assert_array_equal(dis3[:, 3:], v2.scene.colors[batch.disturb_idx])
        np.testing.assert_array_equal(dis3[:, :3], pos3[:, :3])
        _, pos2, dis2 = inp.split(inp.x2)
        np.testing.assert_array_equal(dis2[:, [0, 1, 5]], pos2[:, [0, 1, 5]])
        np.testing.assert_array_equal(dis2[:, 2:5], v2.scene.colors[batch.disturb_idx])
        _, pn, dn = inp.split(inp.n3)
        np.testing.assert_array_equal(pn, dn)

    def test_never_self_paired(self, views):
        v1, v2, _ = views
        for seed in range(5):
            batch = self.make_batch(views, seed)
            inp = assemble_inputs(v1, v2, batch, 8, "early", "p4contrast")
            _, pos, dis = inp.split(inp.x3)
            assert not np.any(np.all(pos == dis, axis=1) & (batch.disturb_idx == batch.positive_idx))
            assert np.all(batch.disturb_idx != batch.positive_idx)

    def test_pointcontrast_has_no_disturbed_block(self, views):
        v1, v2, _ = views
        inp = assemble_inputs(v1, v2, self.make_batch(views), 8, "early", "pointcontrast", disturbed=False)
        assert inp.n_disturbed == 0 and inp.x2 is None and len(inp.x3) == 32

    def test_forward_is_deterministic(self, views):
        v1, v2, _ = views
        inp = assemble_inputs(v1, v2, self.make_batch(views), 8, "hybrid", "p4contrast")
        p = init_params(seed=1)
        a, _ = forward(inp, p)
        b, _ = forward(inp, p)
        for k in ("f3d", "f2d", "fused"):
            np.testing.assert_array_equal(a[k], b[k])
        assert a["fused"].shape == (48, 32) and unit_norms_ok(a["fused"])

    def test_masks(self):
        m3, m2 = branch_masks("hybrid", "p4contrast")
        assert m3.all() and m2.all()
        for args in (("late", "p4contrast"), ("hybrid", "crossmodal")):
            m3, m2 = branch_masks(*args)
            np.testing.assert_array_equal(m3, [1, 1, 1, 0, 0, 0])
            np.testing.assert_array_equal(m2, [0, 0, 1, 1, 1, 0])

    def test_crossmodal_scene_inputs(self, views):
        inp = scene_inputs(views[0], init_params(), "crossmodal")
        assert np.all(inp.x3[:, 3:] == 0) and np.all(inp.x2[:, [0, 1, 5]] == 0)
        assert scene_features(views[0], init_params(), "crossmodal").shape == (views[0].scene.n_points, 32)

    def test_early_scene_features(self, views):
        f = scene_features(views[0], init_params(fusion_mode="early"))
        assert f.shape == (views[0].scene.n_points, 16) and unit_norms_ok(f)


class TestBackward:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.x = rng.normal(size=(5, 6))
        self.nb = rng.integers(0, 5, (5, 3))

    def inputs(self, with_2d=True):
        from pointpixel.model import BatchInputs
        xn = self.x[self.nb]
        return BatchInputs(self.x, xn, self.x if with_2d else None, xn if with_2d else None, 5, 0, 0)

    def test_zero_upstream(self):
        p = init_params(hidden=8, dim=4, knn_k=3)
        _, cache = forward(self.inputs(), p)
        grads = backward(cache, {"fused": np.zeros((5, 8))}, p)
        assert all(not np.any(g) for g in grads.values())

    def test_closed_form_when_relu_is_identity(self):
        p = init_params(hidden=8, dim=4, knn_k=3, fusion_mode="early", seed=2)
        p = p.with_tensors({"b1": np.full(8, 50.0)})  # every pre-activation positive
        feats, cache = forward(self.inputs(False), p)
        g = np.random.default_rng(0).normal(size=(5, 4))
        grads = backward(cache, {"fused": g}, p)
        c = np.concatenate([self.x @ p.W1.T + p.b1, self.x[self.nb].mean(axis=1) @ p.W1.T + p.b1], axis=1)
        z = c @ p.W2.T + p.b2
        f = feats["f3d"]
        dz = (g - f * np.sum(f * g, axis=1, keepdims=True)) / np.linalg.norm(z, axis=1, keepdims=True)
        np.testing.assert_allclose(grads["W2"], dz.T @ c, rtol=1e-12, atol=1e-14)
        dc = dz @ p.W2
        dw1 = dc[:, :8].T @ self.x + dc[:, 8:].T @ self.x[self.nb].mean(axis=1)
        np.testing.assert_allclose(grads["W1"], dw1, rtol=1e-10, atol=1e-12)
        assert not np.any(grads["V1"])

    def test_upstream_row_mismatch(self):
        p = init_params(hidden=8, dim=4, knn_k=3)
        _, cache = forward(self.inputs(), p)
        with pytest.raises(ContractError):
            backward(cache, {"fused": np.zeros((4, 8))}, p)

    @pytest.mark.parametrize("mode", ["early", "late", "hybrid"])
    def test_matches_finite_differences(self, mode):
        r = check_instance(mode, include_positive=False, seed=11)
        assert r.checked > 0 and r.max_rel_error < TOLERANCE

    def test_branch_gradients_by_finite_differences(self):
        p = init_params(hidden=6, dim=4, knn_k=3, seed=5)
        inp = self.inputs()
        g = np.random.default_rng(1).normal(size=(5, 8))

        def objective(params):
            return float(np.sum(forward(inp, params)[0]["fused"] * g))

        _, cache = forward(inp, p)
        grads = backward(cache, {"fused": g}, p)
        h = 1e-6
        for name, t in p.tensors().items():
            for idx in np.ndindex(t.shape):
                tp, tm = t.copy(), t.copy()
                tp[idx] += h
                tm[idx] -= h
                fd = (objective(p.with_tensors({name: tp})) - objective(p.with_tensors({name: tm}))) / (2 * h)
                assert abs(fd - grads[name][idx]) / max(1.0, abs(fd)) < 1e-6


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params(hidden=8, dim=5, knn_k=3, fusion_mode="late", seed=9)
        save_checkpoint(p, tmp_path / "c.p4ck")
        assert load_checkpoint(tmp_path / "c.p4ck").identical_to(p)

    def test_layout(self):
        p = init_params(hidden=4, dim=4, knn_k=2)
        data = params_to_bytes(p)
        assert data[:8] == b"P4CCKP01"
        assert len(data) == 8 + 17 + 8 * (2 * (4 * 6 + 4 + 4 * 8 + 4))
        np.testing.assert_array_equal(np.frombuffer(data, "<f8", 24, 25).reshape(4, 6), p.W1)

    def test_bad_magic(self):
        data = bytearray(params_to_bytes(init_params()))
        data[:8] = b"XXXXXXXX"
        with pytest.raises(ContractError):
            params_from_bytes(bytes(data))

    def test_truncated(self):
        data = params_to_bytes(init_params())
        for cut in (10, len(data) - 8):
            with pytest.raises(ContractError):
                params_from_bytes(data[:cut])
        with pytest.raises(ContractError):
            params_from_bytes(data + b"\0")
