import numpy as np
import pytest

from mosa import adapters as adp
from mosa import autodiff as ad
from mosa.adapters import (AdapterConfig, MaskSet, Tensor, adapter_forward_expert,
                           adapter_forward_standard, build_adapter,
                           build_sparse_adapter_baseline, lora_forward, split_masks)
from mosa.errors import ConfigError, IndexRangeError
from mosa.rng import Rng


def make_adapter(d=8, r=4, n=2, hierarchical=True, sparsify_down=False,
                 activation="relu", seed=0, use_bias=True, scale=1.0):
    cfg = AdapterConfig(bottleneck_dim=r, num_experts=n, hierarchical=hierarchical,
                        sparsify_down=sparsify_down, sparsify_up=not hierarchical or True,
                        activation=activation, use_bias=use_bias, scale=scale)
    cfg.validate(d)
    rng = Rng(seed)
    return build_adapter(d, cfg, rng.split(0), rng.split(1))


class TestSplitMasks:
    def test_single_expert_is_all_ones(self):
        ms = split_masks(5, 7, 1, Rng(0))
        assert np.array_equal(ms.masks, np.ones((1, 5, 7)))

    def test_two_by_two_four_experts(self):
        ms = split_masks(2, 2, 4, Rng(1))
        assert ms.counts() == [1, 1, 1, 1]
        ms.validate_partition()

    def test_large_split_exact_quarters(self):
        ms = split_masks(768, 64, 4, Rng(2))
        assert ms.counts() == [12288, 12288, 12288, 12288]

    def test_partition_invariants_sweep(self):
        for rows, cols in [(3, 5), (8, 4), (16, 16), (64, 64)]:
            for n in (1, 2, 3, 4, 5, 8):
                ms = split_masks(rows, cols, n, Rng(rows * 100 + n))
                ms.validate_partition()

    def test_seeded_determinism(self):
        a = split_masks(12, 9, 5, Rng(42))
        b = split_masks(12, 9, 5, Rng(42))
        assert np.array_equal(a.masks, b.masks)

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            split_masks(2, 2, 5, Rng(0))
        with pytest.raises(ConfigError):
            split_masks(2, 2, 0, Rng(0))


class TestAdapterForward:
    def test_zero_init_identity(self):
        adapter = make_adapter()
        x = Tensor(Rng(3).normal((2, 3, 8)))
        out = adapter_forward_standard(adapter, x)
        assert np.array_equal(out.data, x.data)

    def test_hand_example(self):
        cfg = AdapterConfig(bottleneck_dim=1, num_experts=1, hierarchical=False,
                            sparsify_down=False, sparsify_up=False, activation="relu",
                            use_bias=False)
        rng = Rng(0)
        adapter = build_adapter(2, cfg, rng.split(0), rng.split(1))
        adapter.w_down.data = np.array([[1.0], [0.0]])
        adapter.w_up.data = np.array([[1.0, 0.0]])
        out = adapter_forward_standard(adapter, Tensor([2.0, 3.0]))
        assert out.data.tolist() == [4.0, 3.0]

    def test_gradient(self):
        adapter = make_adapter(seed=5)
        adapter.w_up.data = np.asarray(Rng(6).normal((4, 8))) * 0.3
        x = Tensor(Rng(7).normal((2, 8)))

        def f():
            return ad.mean(ad.mul(adapter_forward_standard(adapter, x),
                                  adapter_forward_standard(adapter, x)))

        report = ad.grad_check(f, [adapter.w_down, adapter.w_up, adapter.b_down, adapter.b_up])
        assert report.passed, report.worst

    def test_single_expert_matches_standard(self):
        adapter = make_adapter(n=1)
        adapter.w_up.data = np.asarray(Rng(8).normal((4, 8)))
        x = Tensor(Rng(9).normal((3, 8)))
        a = adapter_forward_standard(adapter, x)
        b = adapter_forward_expert(adapter, x, up_index=0)
        assert np.array_equal(a.data, b.data)

    def test_hierarchical_additivity(self):
        adapter = make_adapter(n=2)
        adapter.w_up.data = np.asarray(Rng(10).normal((4, 8)))
        x = Tensor(Rng(11).normal((2, 8)))
        merged = adapter_forward_standard(adapter, x).data - x.data
        deltas = sum(adapter_forward_expert(adapter, x, up_index=j).data - x.data
                     for j in range(2))
        assert np.max(np.abs(deltas - merged)) < 1e-12

    def test_nonhierarchical_not_additive(self):
        adapter = make_adapter(n=2, hierarchical=False, sparsify_down=True, seed=12)
        adapter.w_up.data = np.asarray(Rng(13).normal((4, 8)))
        adapter.b_down.data = np.asarray(Rng(14).normal((4,))) * 0.5
        x = Tensor(Rng(15).normal((2, 8)))
        merged = adapter_forward_standard(adapter, x).data - x.data
        deltas = sum(adapter_forward_expert(adapter, x, down_index=j, up_index=j).data - x.data
                     for j in range(2))
        assert np.max(np.abs(deltas - merged)) > 1e-6

    def test_masked_entry_is_invisible_to_other_expert(self):
        adapter = make_adapter(n=2, seed=16)
        adapter.w_up.data = np.asarray(Rng(17).normal((4, 8)))
        x = Tensor(Rng(18).normal((2, 8)))
        base = adapter_forward_expert(adapter, x, up_index=0).data
        outside = np.argwhere(adapter.up_masks.mask(1) > 0)[0]
        adapter.w_up.data = adapter.w_up.data.copy()
        adapter.w_up.data[tuple(outside)] += 123.0
        again = adapter_forward_expert(adapter, x, up_index=0).data
        assert np.array_equal(base, again)

    def test_expert_index_validation(self):
        adapter = make_adapter(n=2)
        with pytest.raises(IndexRangeError):
            adapter_forward_expert(adapter, Tensor(np.zeros((1, 8))), up_index=2)
        with pytest.raises(ConfigError):
            adapter_forward_expert(adapter, Tensor(np.zeros((1, 8))), down_index=0, up_index=0)

    def test_storage_parity_across_expert_counts(self):
        sizes = set()
        for n in (1, 2, 4, 8):
            a = make_adapter(n=n)
            sizes.add(sum(t.size for _, t in a.params()))
        assert len(sizes) == 1


class TestSparseBaseline:
    def test_retain_all_is_identity(self):
        adapter = make_adapter(n=1, seed=20)
        adapter.w_up.data = np.asarray(Rng(21).normal((4, 8)))
        pruned = build_sparse_adapter_baseline(adapter, 1.0, Rng(22))
        x = Tensor(Rng(23).normal((2, 8)))
        assert np.array_equal(adapter_forward_standard(adapter, x).data,
                              adapter_forward_standard(pruned, x).data)

    def test_retained_counts(self):
        adapter = make_adapter(d=16, r=6, n=1)
        pruned = build_sparse_adapter_baseline(adapter, 0.25, Rng(24))
        assert int(pruned.retain_down.sum()) == round(0.25 * 16 * 6)
        assert int(pruned.retain_up.sum()) == round(0.25 * 6 * 16)

    def test_invalid_fraction(self):
        with pytest.raises(ConfigError):
            build_sparse_adapter_baseline(make_adapter(), 0.0, Rng(0))


class TestLora:
    def make_lora(self, n=2, d=8, r=4, seed=30):
        cfg = AdapterConfig(kind="lora", bottleneck_dim=r, num_experts=n)
        rng = Rng(seed)
        return adp.build_lora(d, cfg, "q", rng.split(0), rng.split(1))

    def test_zero_b_zero_delta(self):
        mod = self.make_lora()
        out = lora_forward(mod, Tensor(Rng(31).normal((3, 8))))
        assert np.array_equal(out.data, np.zeros((3, 8)))

    def test_single_expert_equals_unmasked(self):
        mod = self.make_lora(n=1)
        mod.b.data = np.asarray(Rng(32).normal((4, 8)))
        x = Tensor(Rng(33).normal((2, 8)))
        assert np.array_equal(lora_forward(mod, x).data,
                              lora_forward(mod, x, expert_index=0).data)

    def test_merged_delta_equals_expert_sum(self):
        mod = self.make_lora(n=3)
        mod.b.data = np.asarray(Rng(34).normal((4, 8)))
        x = Tensor(Rng(35).normal((2, 8)))
        merged = lora_forward(mod, x).data
        total = sum(lora_forward(mod, x, expert_index=k).data for k in range(3))
        assert np.max(np.abs(total - merged)) < 1e-12

    def test_index_out_of_range(self):
        with pytest.raises(IndexRangeError):
            lora_forward(self.make_lora(n=2), Tensor(np.zeros((1, 8))), expert_index=2)


class TestConfigValidation:
    def test_hierarchical_flags_enforced(self):
        with pytest.raises(ConfigError):
            AdapterConfig(hierarchical=True, sparsify_down=True).validate(8)
        with pytest.raises(ConfigError):
            AdapterConfig(hierarchical=True, sparsify_up=False).validate(8)

    def test_expert_count_bound(self):
        with pytest.raises(ConfigError):
            AdapterConfig(bottleneck_dim=2, num_experts=17).validate(8)

    def test_maskset_partition_error(self):
        bad = MaskSet(np.stack([np.ones((2, 2)), np.ones((2, 2))]), seed=0)
        with pytest.raises(Exception):
            bad.validate_partition()


def test_flop_counter_counts_adapter_matmuls():
    adapter = make_adapter(d=8, r=4)
    x = Tensor(Rng(40).normal((3, 8)))
    adp.ADAPTER_FLOPS.reset()
    adapter_forward_standard(adapter, x)
    assert adp.ADAPTER_FLOPS.macs == 3 * 8 * 4 + 3 * 4 * 8
