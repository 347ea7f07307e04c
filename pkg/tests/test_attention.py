import pytest
import torch
from hypothesis import given, settings, strategies as st

from diffattack.attention import (
    AggregatedCrossMap,
    accumulate_cross,
    ext_attention_loss,
    hard_mask,
    soft_mask,
    structure_loss,
    variance_loss,
)
from diffattack.backbone import AttentionRecord
from diffattack.errors import DegenerateInputError, DomainError


def record(cross_rows, resolution, step=1, layer="block0"):
    cross = torch.as_tensor(cross_rows, dtype=torch.float64)
    hw = resolution[0] * resolution[1]
    return AttentionRecord(
        step=step,
        layer_id=layer,
        resolution=resolution,
        cross=cross,
        self_attn=torch.eye(hw, dtype=torch.float64),
    )


def flat_map(values, resolution=None):
    v = torch.as_tensor(values, dtype=torch.float64).reshape(-1)
    if resolution is None:
        resolution = (1, v.numel())
    return AggregatedCrossMap(values=v, resolution=resolution)


class TestAccumulateCross:
    def test_uniform_stays_uniform(self):
        rec = record(torch.full((4, 3), 1.0 / 3), (2, 2))
        out = accumulate_cross([rec], [0, 1, 2])
        assert torch.allclose(out.values, torch.full((4,), 1.0 / 3, dtype=torch.float64))

    def test_two_constant_maps_average(self):
        r1 = record(torch.full((4, 2), 0.2), (2, 2), step=1)
        r2 = record(torch.full((4, 2), 0.6), (2, 2), step=2)
        out = accumulate_cross([r1, r2], [0])
        assert torch.allclose(out.values, torch.full((4,), 0.4, dtype=torch.float64))

    def test_single_column_selection(self):
        rows = torch.tensor([[0.1, 0.9], [0.7, 0.3], [0.5, 0.5], [0.2, 0.8]], dtype=torch.float64)
        out = accumulate_cross([record(rows, (2, 2))], [1])
        assert torch.allclose(out.values, rows[:, 1])

    def test_multi_resolution_fusion_targets_largest(self):
        big = record(torch.full((16, 2), 0.5), (4, 4))
        small = record(torch.full((4, 2), 0.25), (2, 2))
        out = accumulate_cross([big, small], [0])
        assert out.resolution == (4, 4)
        assert torch.allclose(out.values, torch.full((16,), 0.375, dtype=torch.float64))

    def test_errors(self):
        with pytest.raises(DomainError):
            accumulate_cross([], [0])
        rec = record(torch.full((4, 2), 0.5), (2, 2))
        with pytest.raises(DomainError):
            accumulate_cross([rec], [5])
        with pytest.raises(DomainError):
            accumulate_cross([rec], [])


class TestVarianceLoss:
    def test_uniform_is_zero(self):
        assert float(variance_loss(flat_map([0.3, 0.3, 0.3, 0.3]))) == 0.0

    def test_spec_example_one_hot(self):
        # independent oracle: population variance of [1,0,0,0]
        vals = [1.0, 0.0, 0.0, 0.0]
        mean = sum(vals) / 4
        oracle = sum((v - mean) ** 2 for v in vals) / 4
        assert abs(oracle - 0.1875) < 1e-15
        assert abs(float(variance_loss(flat_map(vals))) - 0.1875) < 1e-9

    def test_spec_example_half(self):
        vals = [0.5, 0.5, 0.0, 0.0]
        mean = sum(vals) / 4
        oracle = sum((v - mean) ** 2 for v in vals) / 4
        assert abs(oracle - 0.0625) < 1e-15
        assert abs(float(variance_loss(flat_map(vals))) - 0.0625) < 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=2, max_size=16))
    def test_nonnegative(self, vals):
        v = float(variance_loss(flat_map(vals)))
        assert v >= 0.0
        if len(set(vals)) == 1:
            assert v == 0.0


class TestStructureLoss:
    def test_identical_is_zero(self):
        maps = [torch.rand(4, 4, dtype=torch.float64) for _ in range(3)]
        assert float(structure_loss(maps, [m.clone() for m in maps])) == 0.0

    def test_uniform_offset_example(self):
        a = torch.zeros(2, 2, dtype=torch.float64)
        b = torch.full((2, 2), 0.1, dtype=torch.float64)
        assert abs(float(structure_loss([a], [b])) - 0.01) < 1e-12

    def test_additivity_over_steps(self):
        a = torch.zeros(2, 2, dtype=torch.float64)
        b = torch.full((2, 2), 0.1, dtype=torch.float64)
        single = float(structure_loss([a], [b]))
        double = float(structure_loss([a, a], [b, b]))
        assert abs(double - 2 * single) < 1e-12

    def test_misaligned_errors(self):
        a = torch.zeros(2, 2, dtype=torch.float64)
        with pytest.raises(DomainError):
            structure_loss([a], [a, a])
        with pytest.raises(DomainError):
            structure_loss([a], [torch.zeros(3, 3, dtype=torch.float64)])
        with pytest.raises(DomainError):
            structure_loss([], [])

    def test_gradient_only_through_first_argument(self):
        cur = torch.full((2, 2), 0.4, dtype=torch.float64, requires_grad=True)
        fix = torch.zeros(2, 2, dtype=torch.float64, requires_grad=True)
        structure_loss([cur], [fix]).backward()
        assert cur.grad is not None and float(cur.grad.abs().sum()) > 0
        assert fix.grad is None or float(fix.grad.abs().sum()) == 0


class TestMasks:
    def test_constant_map_gives_ones(self):
        m = flat_map([0.7, 0.7, 0.7, 0.7], (2, 2))
        mask = soft_mask(m, (2, 2))
        assert torch.equal(mask.values, torch.ones(2, 2, dtype=torch.float64))

    def test_max_normalization(self):
        m = flat_map([2.0, 1.0, 0.0, 0.0], (2, 2))
        mask = soft_mask(m, (2, 2))
        expected = torch.tensor([[1.0, 0.5], [0.0, 0.0]], dtype=torch.float64)
        assert torch.allclose(mask.values, expected)

    def test_nearest_upsampling_replicates_blocks(self):
        m = flat_map([1.0, 0.5, 0.25, 0.75], (2, 2))
        mask = soft_mask(m, (4, 4), mode="nearest")
        grid = m.grid() / float(m.values.max())
        for i in range(4):
            for j in range(4):
                assert float(mask.values[i, j]) == float(grid[i // 2, j // 2])

    def test_zero_map_degenerate(self):
        with pytest.raises(DegenerateInputError):
            soft_mask(flat_map([0.0, 0.0], (1, 2)), (2, 2))

    def test_hard_mask_thresholds(self):
        m = flat_map([0.6, 0.5, 1.0, 0.2], (2, 2))
        soft = soft_mask(m, (2, 2))
        hard = hard_mask(soft)
        assert set(float(v) for v in hard.values.reshape(-1)) <= {0.0, 1.0}
        assert float(hard.values[0, 0]) == 1.0  # 0.6 > 0.5
        assert float(hard.values[0, 1]) == 0.0  # 0.5 -> 0
        with pytest.raises(DomainError):
            hard_mask(hard)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0.0, 5.0), min_size=4, max_size=4).filter(lambda v: max(v) > 0))
    def test_soft_mask_bounds_and_peak(self, vals):
        mask = soft_mask(flat_map(vals, (2, 2)), (2, 2))
        assert float(mask.values.min()) >= 0.0
        assert abs(float(mask.values.max()) - 1.0) < 1e-12


class TestExtAttentionLoss:
    def test_identical_maps_zero(self):
        maps = [flat_map([0.2, 0.4, 0.6, 0.8], (2, 2)) for _ in range(3)]
        assert abs(float(ext_attention_loss(maps))) < 1e-12

    def test_two_map_example(self):
        p1 = flat_map([0.2, 0.2, 0.2, 0.2], (2, 2))
        p2 = flat_map([0.6, 0.6, 0.6, 0.6], (2, 2))
        assert abs(float(ext_attention_loss([p1, p2])) - 0.4) < 1e-12

    def test_five_map_example(self):
        p1 = flat_map([0.25] * 4, (2, 2))
        rest = [flat_map([v] * 4, (2, 2)) for v in (0.1, 0.2, 0.3, 0.4)]
        assert abs(float(ext_attention_loss([p1, *rest]))) < 1e-12

    def test_errors(self):
        p1 = flat_map([0.1] * 4, (2, 2))
        with pytest.raises(DomainError):
            ext_attention_loss([p1])
        with pytest.raises(DomainError):
            ext_attention_loss([p1, flat_map([0.1] * 9, (3, 3))])
