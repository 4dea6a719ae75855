import numpy as np
import pytest

from distgate.edt import DistanceMap
from distgate.gating import GatingConfig, soft_gate, single_gate
from distgate.inference import fuse, sliding_window_predict, _axis_starts
from distgate.model import SegmenterConfig, forward, init_params, normalize_input_stack
from distgate.phantom import PhantomConfig, generate_case
from distgate.volume import ScalarVolume, VolumeGrid

SMALL = PhantomConfig(dims=(64, 64, 24), n_nodes=1, prox_fraction=1.0, dist_fraction=0.0)


@pytest.fixture(scope="module")
def case():
    return generate_case(31, SMALL, case_id="case_inf")


@pytest.fixture(scope="module")
def params():
    return init_params(SegmenterConfig(trunk_channels=(4,), seed=0))


def scalar(grid, values):
    return ScalarVolume(grid, np.asarray(values, np.float32))


class TestFuse:
    def test_passthrough_weights(self):
        grid = VolumeGrid((2, 2, 1), (1, 1, 1))
        rng = np.random.default_rng(0)
        p = (scalar(grid, rng.random(grid.shape_zyx)), scalar(grid, rng.random(grid.shape_zyx)))
        d = DistanceMap(grid, np.zeros(grid.shape_zyx, np.float32))
        w = single_gate(d)
        fused = fuse(p, w)
        np.testing.assert_array_equal(fused.data, p[0].data)

    def test_midpoint_arithmetic(self):
        grid = VolumeGrid((1, 1, 1), (1, 1, 1))
        p = (scalar(grid, [[[0.2]]]), scalar(grid, [[[0.6]]]))
        d = DistanceMap(grid, np.full(grid.shape_zyx, 70.0, np.float32))
        w = soft_gate(d, 50.0, 90.0)  # g_prox = 0.5 at 70 mm
        assert fuse(p, w).data.ravel()[0] == pytest.approx(0.4, abs=1e-7)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(1)
        grid = VolumeGrid((8, 8, 4), (1, 1, 2.5))
        p = (scalar(grid, rng.random(grid.shape_zyx)), scalar(grid, rng.random(grid.shape_zyx)))
        d = DistanceMap(grid, (rng.random(grid.shape_zyx) * 150).astype(np.float32))
        fused = fuse(p, soft_gate(d, 50.0, 90.0)).data
        lo = np.minimum(p[0].data, p[1].data)
        hi = np.maximum(p[0].data, p[1].data)
        assert (fused >= lo - 1e-6).all() and (fused <= hi + 1e-6).all()

    def test_grid_mismatch(self):
        g1 = VolumeGrid((2, 2, 2), (1, 1, 1))
        g2 = VolumeGrid((3, 2, 2), (1, 1, 1))
        d = DistanceMap(g1, np.zeros(g1.shape_zyx, np.float32))
        with pytest.raises(ValueError):
            fuse((scalar(g1, np.zeros(g1.shape_zyx)), scalar(g2, np.zeros(g2.shape_zyx))),
                 single_gate(d))


class TestAxisStarts:
    def test_exact_tiling(self):
        assert _axis_starts(160, 80, 80) == [0, 80]

    def test_clamped_tail(self):
        assert _axis_starts(100, 64, 32) == [0, 32, 36]

    def test_window_covers_volume(self):
        for dim, w, s in [(97, 32, 16), (64, 64, 64), (10, 32, 16)]:
            starts = _axis_starts(dim, min(w, dim), s)
            covered = np.zeros(dim, bool)
            for st in starts:
                covered[st:st + min(w, dim)] = True
            assert covered.all()


class TestSlidingWindow:
    def test_single_window_equals_direct_forward(self, case, params):
        w = case.grid.dims  # exactly one window
        out = sliding_window_predict(params, case, window=w, stride=w, mode="single")
        stack = normalize_input_stack(case.ct.data, case.pet.data, case.distance.data)
        p_prox, _ = forward(params, stack)
        np.testing.assert_allclose(out.p_prox.data, p_prox, atol=1e-6)
        np.testing.assert_array_equal(out.fused.data, out.p_prox.data)

    def test_window_larger_than_volume_is_clamped(self, case, params):
        out = sliding_window_predict(
            params, case, window=(256, 256, 256), stride=(128, 128, 128), mode="single"
        )
        assert out.fused.grid.dims == case.grid.dims

    def test_constant_model_constant_output_under_overlap(self, case):
        params = init_params(SegmenterConfig(trunk_channels=(4,), seed=1))
        for t in params.tensors():
            t[...] = 0  # logits 0 -> p = 0.5 everywhere
        out = sliding_window_predict(
            params, case, window=(48, 48, 16), stride=(32, 32, 8), mode="sg"
        )
        np.testing.assert_allclose(out.fused.data, 0.5, atol=1e-6)

    def test_overlap_averaging_matches_manual(self, case, params):
        window, stride = (48, 48, 24), (32, 32, 12)
        out = sliding_window_predict(params, case, window=window, stride=stride, mode="single")
        sums = np.zeros(case.grid.shape_zyx)
        counts = np.zeros(case.grid.shape_zyx, np.int32)
        ct, pet, dist = case.ct.data, case.pet.data, case.distance.data
        for z0 in _axis_starts(case.grid.dims[2], window[2], stride[2]):
            for y0 in _axis_starts(case.grid.dims[1], window[1], stride[1]):
                for x0 in _axis_starts(case.grid.dims[0], window[0], stride[0]):
                    sl = (slice(z0, z0 + window[2]), slice(y0, y0 + window[1]),
                          slice(x0, x0 + window[0]))
                    stack = normalize_input_stack(ct[sl], pet[sl], dist[sl])
                    p_prox, _ = forward(params, stack)
                    sums[sl] += p_prox
                    counts[sl] += 1
        np.testing.assert_allclose(out.p_prox.data, (sums / counts).astype(np.float32), atol=1e-7)

    def test_stride_validation(self, case, params):
        with pytest.raises(ValueError):
            sliding_window_predict(params, case, window=(16, 16, 8), stride=(32, 32, 8))

    def test_binary_fusion_identity_is_bit_exact(self, case, params):
        gating = GatingConfig(d0_mm=30.0)
        out = sliding_window_predict(
            params, case, window=(48, 48, 16), stride=(32, 32, 8), mode="bg", gating=gating
        )
        prox_region = case.distance.data <= gating.d0_mm
        assert np.array_equal(out.fused.data[prox_region], out.p_prox.data[prox_region])
        assert np.array_equal(out.fused.data[~prox_region], out.p_dist.data[~prox_region])
        assert prox_region.any() and (~prox_region).any()
