"""Fields, heads, local reads/writes, attention updates, and the rollout engine."""

import numpy as np
import pytest

from nftm import autodiff as ad
from nftm import heat
from nftm.autodiff import Tensor, backward
from nftm.field import (
    FieldGrid,
    Head,
    MachineSpec,
    RolloutError,
    attention_update,
    move_heads,
    psnr,
    read_all_patches,
    read_patch,
    rollout,
    scatter_write,
    support_offsets,
)


class TestReadPatch:
    def test_integer_box(self):
        f = FieldGrid([0.0, 1.0, 2.0, 3.0, 4.0], "replicate")
        assert np.array_equal(read_patch(f, Head(2.0, 1, "box")).data, [1.0, 2.0, 3.0])

    def test_periodic_wrap(self):
        f = FieldGrid([0.0, 1.0, 2.0, 3.0, 4.0], "periodic")
        assert np.array_equal(read_patch(f, Head(0.0, 1, "box")).data, [4.0, 0.0, 1.0])

    def test_bilinear_midpoint(self):
        f = FieldGrid([0.0, 1.0, 2.0, 3.0], "replicate")
        assert read_patch(f, Head(1.5, 0, "box")).data[0] == pytest.approx(1.5)

    def test_zero_boundary_partial_weight(self):
        f = FieldGrid([2.0, 4.0, 6.0], "zero")
        # sample at -0.5: half weight on cell 0, half outside (contributes 0)
        assert read_patch(f, Head(-0.5 + 1.0, 1, "box")).data[0] == pytest.approx(1.0)

    def test_ball_offsets_are_five_point_stencil(self):
        offs = support_offsets(2, 1.0, "ball")
        assert offs.shape[0] == 5
        offs_box = support_offsets(2, 1.0, "box")
        assert offs_box.shape[0] == 9

    def test_gradient_flows_to_field(self):
        f = FieldGrid(Tensor(np.arange(5.0), requires_grad=True), "replicate")
        patch = read_patch(f, Head(1.5, 0, "box"))
        backward(ad.reduce("sum", patch))
        assert np.allclose(f.data.grad, [0.0, 0.5, 0.5, 0.0, 0.0])


class TestReadAllPatches:
    def test_wrap_rows(self):
        f = FieldGrid([1.0, 0.0, 0.0], "periodic")
        expect = [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
        assert np.array_equal(read_all_patches(f, 1).data, expect)

    def test_constant_field_rows_equal(self):
        f = FieldGrid(np.full(6, 3.5), "replicate")
        rows = read_all_patches(f, 1).data
        assert np.all(rows == rows[0])

    def test_2d_corner_replicate_hand_enumerated(self):
        # 3x3 field, corner (0,0) patch under replicate: indices clamp to edge
        vals = np.arange(9.0).reshape(1, 3, 3)
        f = FieldGrid(vals, "replicate")
        rows = read_all_patches(f, 1).data
        # offsets row-major (di,dj) in {-1,0,1}^2 with clamped reads of
        # [[0,1,2],[3,4,5],[6,7,8]] at the corner
        expect = [0, 0, 1, 0, 0, 1, 3, 3, 4]
        assert np.array_equal(rows[0], expect)

    def test_fractional_radius_rejected(self):
        with pytest.raises(ValueError, match="integer"):
            read_all_patches(FieldGrid(np.zeros(4)), 0.5)


class TestScatterWrite:
    def test_dense_identity(self):
        f = FieldGrid(np.arange(4.0), "periodic")
        out = scatter_write(f, "dense", Tensor(f.array.copy()))
        assert np.array_equal(out.array, f.array)

    def test_single_head(self):
        out = scatter_write(FieldGrid(np.zeros(5)), [Head(3.0)], Tensor([7.0]))
        assert np.array_equal(out.array, [0, 0, 0, 7, 0])

    def test_collision_average(self):
        out = scatter_write(FieldGrid(np.zeros(5)), [Head(2.0), Head(2.0)], Tensor([1.0, 3.0]))
        assert np.array_equal(out.array, [0, 0, 2, 0, 0])

    def test_input_unmodified_and_count_checked(self):
        f = FieldGrid(np.zeros(3))
        scatter_write(f, [Head(1.0)], Tensor([5.0]))
        assert np.array_equal(f.array, np.zeros(3))
        with pytest.raises(ValueError, match="one value per head"):
            scatter_write(f, [Head(1.0)], Tensor([1.0, 2.0]))

    def test_roundtrip_integer_positions(self):
        f = FieldGrid(np.arange(6.0), "replicate")
        heads = [Head(float(i)) for i in range(6)]
        vals = ad.concat([read_patch(f, h) for h in heads])
        out = scatter_write(f, heads, vals)
        assert np.array_equal(out.array, f.array)


class TestAttentionUpdate:
    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(0)
        f = FieldGrid(rng.random((1, 4, 4)), "replicate")
        A = np.zeros((16, 9))
        A[:, 4] = 1.0
        out = attention_update(f, Tensor(A), None, 1)
        assert np.allclose(out.array, f.array, atol=1e-15)

    @pytest.mark.parametrize("alpha", [0.05, 0.1, 0.2])
    def test_diffusion_kernel_matches_exact_heat_step(self, alpha):
        rng = np.random.default_rng(int(alpha * 100))
        u = rng.random((16, 16))
        f = FieldGrid(u[None], "replicate")
        A = np.zeros((256, 9))
        A[:, 4] = 1.0 - 4.0 * alpha
        for col in (1, 3, 5, 7):
            A[:, col] = alpha
        out = attention_update(f, Tensor(A), None, 1)
        expect = heat.heat_step_exact(u, alpha)
        assert np.abs(out.array[0] - expect).max() <= 1e-12

    def test_sigmoid_of_zero_kernel(self):
        f = FieldGrid(np.random.default_rng(1).random((1, 3, 3)))
        out = attention_update(f, Tensor(np.zeros((9, 9))), ad.sigmoid, 1)
        assert np.allclose(out.array, 0.5)

    def test_kernel_exceeding_support_rejected(self):
        f = FieldGrid(np.zeros((1, 3, 3)))
        with pytest.raises(ValueError, match="support"):
            attention_update(f, Tensor(np.zeros((9, 25))), None, 1)


class TestMoveHeads:
    def test_plain_move(self):
        out = move_heads([Head(2.0)], [0.5], (10,))
        assert out[0].position[0] == 2.5

    def test_clamp_at_extent(self):
        out = move_heads([Head(9.8)], [1.0], (10,))
        assert 9.99 < out[0].position[0] < 10.0

    def test_zero_delta_identity(self):
        out = move_heads([Head(4.25)], [0.0], (10,))
        assert out[0].position[0] == 4.25

    def test_dense_rejects_motion(self):
        with pytest.raises(ValueError, match="dense"):
            move_heads([Head(1.0)], [0.5], (10,), dense=True)


class TestRollout:
    def test_zero_steps(self):
        f0 = FieldGrid(np.ones(4))
        trace = rollout(MachineSpec(controller=lambda p: p), f0, 0)
        assert len(trace) == 1 and trace.fields[0] is f0

    def test_identity_controller_fixed_point(self):
        f0 = FieldGrid(np.array([0.2, -0.4, 0.8]), "periodic")

        def controller(patches):
            return ad.narrow(patches, 1, 1, 1).reshape((3,))

        trace = rollout(MachineSpec(controller=controller, radius=1), f0, 5)
        for f in trace.fields:
            assert np.allclose(f.array, f0.array, atol=1e-15)

    def test_exact_table_controller_reproduces_rule110(self):
        from nftm import ca

        rule = ca.rule_truth_table(110)
        table = Tensor(rule.table.astype(np.float64) * 20.0 - 10.0)  # logits per pattern

        def controller(patches):
            # neighborhood value as a 3-bit index, then a table lookup done
            # with differentiable ops (affine against one-hot selectors)
            idx = patches.data @ np.array([4.0, 2.0, 1.0])
            onehot = np.eye(8)[idx.astype(int)]
            return ad.reshape(ad.affine(Tensor(onehot), ad.reshape(table, (8, 1)), Tensor(np.zeros(1))), (patches.shape[0],))

        spec = MachineSpec(
            controller=controller,
            g=lambda v: ad.ste_binarize(ad.sigmoid(v)),
            radius=1,
        )
        rng = np.random.default_rng(9)
        f0 = (rng.random(31) < 0.5).astype(np.float64)
        trace = rollout(spec, FieldGrid(f0, "periodic"), 20)
        expect = ca.ca1d_rollout_exact(f0, rule, 20)
        got = np.stack([f.array for f in trace.fields])
        assert np.array_equal(got, expect)

    def test_hook_clamps_known_cells(self):
        known = np.array([1.0, 0.0, 0.0, 0.0])
        mask = np.array([1.0, 0.0, 0.0, 0.0])

        def controller(patches):
            return ad.reshape(ad.asum(patches, axis=1), (4,))

        def clamp_hook(t, f):
            data = ad.add(ad.mul(f.data, Tensor(1.0 - mask)), Tensor(mask * known))
            return FieldGrid(data, f.boundary)

        f0 = FieldGrid(np.array([1.0, 0.5, 0.25, 0.125]), "periodic")
        trace = rollout(MachineSpec(controller=controller, g=ad.tanh, radius=1), f0, 3, hook=clamp_hook)
        for f in trace.fields[1:]:
            assert f.array[0] == 1.0

    def test_nan_reports_step_index(self):
        calls = {"n": 0}

        def controller(patches):
            calls["n"] += 1
            scale = 1.0 if calls["n"] < 3 else 1e308
            return ad.reshape(ad.asum(ad.mul(patches, Tensor(np.full((4, 3), scale))), axis=1), (4,))

        f0 = FieldGrid(np.full(4, 1e10), "periodic")
        with pytest.raises(RolloutError, match="step 3"):
            rollout(MachineSpec(controller=controller, radius=1), f0, 5)

    def test_dense_rollout_rejects_head_motion(self):
        def controller(patches):
            vals = ad.reshape(ad.asum(patches, axis=1), (4,))
            return vals, np.ones(4)

        f0 = FieldGrid(np.zeros(4), "periodic")
        with pytest.raises(ValueError, match="zero head motion"):
            rollout(MachineSpec(controller=controller, radius=1), f0, 1)

    def test_synchronous_scatter_order_invariance(self):
        # writing the same values through any head permutation gives one field
        rng = np.random.default_rng(3)
        f = FieldGrid(rng.random(8), "replicate")
        vals = rng.random(8)
        heads = [Head(float(i)) for i in range(8)]
        base = scatter_write(f, heads, Tensor(vals)).array
        perm = rng.permutation(8)
        shuffled = scatter_write(f, [heads[i] for i in perm], Tensor(vals[perm])).array
        assert np.array_equal(base, shuffled)

    def test_explicit_heads_read_write_move(self):
        def controller(patches):
            vals = ad.concat([ad.reshape(p, (1,)) for p in patches])
            return vals, np.array([[0.5], [0.5]])

        heads = [Head(1.0), Head(3.0)]
        spec = MachineSpec(controller=controller, head_layout=heads, radius=0)
        f0 = FieldGrid(np.arange(6.0), "replicate")
        trace = rollout(spec, f0, 2)
        assert trace.head_tracks[0][0][0] == 1.0
        assert trace.head_tracks[1][0][0] == 1.5
        assert trace.head_tracks[2][1][0] == 4.0


class TestPsnr:
    def test_identical_caps_at_99(self):
        assert psnr(np.ones(5), np.ones(5), 1.0) == 99.0

    def test_known_mses(self):
        assert psnr(np.zeros(1), np.array([0.1]), 1.0) == pytest.approx(20.0)
        assert psnr(np.zeros(1), np.array([0.01]), 1.0) == pytest.approx(40.0)

    def test_shape_and_peak_errors(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(np.zeros(2), np.zeros(3), 1.0)
        with pytest.raises(ValueError, match="peak"):
            psnr(np.zeros(2), np.zeros(2), 0.0)


class TestFieldGridContracts:
    def test_bad_boundary(self):
        with pytest.raises(ValueError, match="boundary"):
            FieldGrid(np.zeros(3), "mirror")

    def test_bad_rank(self):
        with pytest.raises(ValueError, match=r"\(N,\) or \(C,H,W\)"):
            FieldGrid(np.zeros((2, 2)))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            FieldGrid(np.array([1.0, np.inf, 0.0]))
