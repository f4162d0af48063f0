import numpy as np
import pytest

from mosa.adapters import (AdapterConfig, adapter_forward_expert,
                           adapter_forward_standard, build_adapter,
                           build_adapter_set, sparsify_adapter_set)
from mosa.autodiff import Tensor
from mosa.backbone import BackboneConfig, build_backbone, forward
from mosa.dataio import gen_synthetic
from mosa.errors import ConfigError, DataError, IndexRangeError, InternalError
from mosa.inference import (EVAL_CSV_HEADER, EvalReport, count_trainable_from_config,
                            count_trainable_params, evaluate, infer, merge_experts)
from mosa.rng import Rng
from mosa.training import TrainPlan, train

BCFG = BackboneConfig(image_size=8, patch_size=4, channels=1, embed_dim=16,
                      num_layers=2, num_heads=2, num_classes=3)


def setup_model(num_experts=3, kind="adapter", seed=0, perturb=True):
    model = build_backbone(BCFG, Rng(seed).split(1))
    acfg = AdapterConfig(kind=kind, bottleneck_dim=4, num_experts=num_experts)
    adapters = build_adapter_set(BCFG, acfg, Rng(seed).split(2))
    if perturb:
        rng = Rng(seed + 100)
        for _, a in adapters.adapters():
            a.w_up.data = np.asarray(rng.normal(a.w_up.shape)) * 0.3
        for _, m in adapters.loras():
            m.b.data = np.asarray(rng.normal(m.b.shape)) * 0.3
    return model, adapters


class TestMerge:
    def test_merge_is_identity_on_storage(self):
        _, adapters = setup_model()
        before = [a.w_up.data.tobytes() for _, a in adapters.adapters()]
        merged = merge_experts(adapters)
        assert merged.merged
        assert [a.w_up.data.tobytes() for _, a in merged.adapters()] == before

    def test_merged_forward_equals_dense_forward_bitwise(self):
        model, adapters = setup_model()
        images = Rng(3).normal((4, 1, 8, 8))
        merged_logits = infer(model, merge_experts(adapters), images, "merge")
        dense_logits, _ = forward(model, images, adapters)
        assert np.array_equal(merged_logits, dense_logits.data)

    def test_merged_entries_match_per_expert_copy_oracle(self):
        cfg = AdapterConfig(bottleneck_dim=4, num_experts=3)
        rng = Rng(4)
        adapter = build_adapter(16, cfg, rng.split(0), rng.split(1))
        adapter.w_up.data = np.asarray(Rng(5).normal(adapter.w_up.shape))
        expert_copies = [adapter.w_up.data * adapter.up_masks.mask(i) for i in range(3)]
        oracle = np.zeros_like(adapter.w_up.data)
        for i in range(3):
            sel = adapter.up_masks.mask(i) > 0
            oracle[sel] = expert_copies[i][sel]
        assert np.array_equal(oracle, adapter.w_up.data)

    def test_hierarchical_additivity_n3(self):
        cfg = AdapterConfig(bottleneck_dim=4, num_experts=3)
        rng = Rng(6)
        adapter = build_adapter(16, cfg, rng.split(0), rng.split(1))
        adapter.w_up.data = np.asarray(Rng(7).normal(adapter.w_up.shape))
        x = Tensor(Rng(8).normal((2, 16)))
        merged_delta = adapter_forward_standard(adapter, x).data - x.data
        expert_sum = sum(adapter_forward_expert(adapter, x, up_index=j).data - x.data
                         for j in range(3))
        assert np.max(np.abs(expert_sum - merged_delta)) < 1e-12

    def test_invalid_partition_rejected(self):
        _, adapters = setup_model()
        adapters.ffn[0].up_masks.masks[0][0, 0] = 1.0
        adapters.ffn[0].up_masks.masks[1][0, 0] = 1.0
        with pytest.raises(InternalError):
            merge_experts(adapters)


class TestInferModes:
    def test_single_expert_all_modes_agree(self):
        model, adapters = setup_model(num_experts=1)
        images = Rng(9).normal((4, 1, 8, 8))
        outs = [infer(model, adapters, images, mode, rng=Rng(0))
                for mode in ("fixed", "stochastic", "ensemble", "merge")]
        for o in outs[1:]:
            assert np.array_equal(outs[0], o)

    def test_fixed_index_out_of_range(self):
        model, adapters = setup_model(num_experts=2)
        with pytest.raises(IndexRangeError):
            infer(model, adapters, np.zeros((1, 1, 8, 8)), "fixed", fixed_index=2)

    def test_unknown_mode(self):
        model, adapters = setup_model()
        with pytest.raises(ConfigError):
            infer(model, adapters, np.zeros((1, 1, 8, 8)), "router")

    def test_stochastic_deterministic_by_seed(self):
        model, adapters = setup_model()
        images = Rng(10).normal((4, 1, 8, 8))
        a = infer(model, adapters, images, "stochastic", rng=Rng(11))
        b = infer(model, adapters, images, "stochastic", rng=Rng(11))
        assert np.array_equal(a, b)

    def test_modes_differ_with_trained_experts(self):
        model, adapters = setup_model(num_experts=3)
        images = Rng(12).normal((4, 1, 8, 8))
        fixed = infer(model, adapters, images, "fixed")
        merge = infer(model, adapters, images, "merge")
        assert not np.array_equal(fixed, merge)


class TestEvaluate:
    def test_empty_split_rejected(self):
        model, adapters = setup_model()
        empty, _ = gen_synthetic(classes=2, train_per_class=1, val_per_class=1,
                                 channels=1, height=8, width=8, seed=0)
        empty.images = empty.images[:0]
        empty.labels = empty.labels[:0]
        with pytest.raises(DataError):
            evaluate(model, adapters, empty)

    def test_untrained_head_near_chance(self):
        model, adapters = setup_model(perturb=False)
        _, val = gen_synthetic(classes=3, train_per_class=1, val_per_class=60,
                               channels=1, height=8, width=8, difficulty=1.0, seed=13)
        report = evaluate(model, adapters, val, "merge")
        n, p = len(val), 1.0 / 3.0
        sigma = (p * (1 - p) / n) ** 0.5
        assert abs(report.top1 - p) <= 3 * sigma + 1e-9

    def test_ensemble_flops_are_n_times_merge(self):
        for n in (2, 3, 5):
            model, adapters = setup_model(num_experts=n)
            _, val = gen_synthetic(classes=3, train_per_class=1, val_per_class=10,
                                   channels=1, height=8, width=8, seed=14)
            merge_report = evaluate(model, adapters, val, "merge")
            ens_report = evaluate(model, adapters, val, "ensemble")
            assert ens_report.forward_matmul_flops == n * merge_report.forward_matmul_flops

    def test_perfectly_separable_toy_reaches_top1_one(self):
        cfg = BackboneConfig(image_size=8, patch_size=4, channels=1, embed_dim=16,
                             num_layers=2, num_heads=2, num_classes=2)
        model = build_backbone(cfg, Rng(15))
        tr, va = gen_synthetic(classes=2, train_per_class=20, val_per_class=10,
                               channels=1, height=8, width=8, difficulty=0.0, seed=16)
        plan = TrainPlan(epochs=8, warmup_epochs=1, batch_size=10, base_lr=0.05,
                         weight_decay=0.0, alpha=0.0, beta=0.0, seed=16)
        train(model, None, tr, va, plan)
        report = evaluate(model, None, va, "merge")
        assert report.top1 == 1.0

    def test_report_params_match_count(self):
        model, adapters = setup_model()
        _, val = gen_synthetic(classes=3, train_per_class=1, val_per_class=6,
                               channels=1, height=8, width=8, seed=17)
        report = evaluate(model, adapters, val, "merge")
        assert report.trainable_params_excl_classifier == count_trainable_params(model, adapters)

    def test_csv_row_shape(self):
        report = EvalReport(mode="merge", top1=0.5, num_eval_samples=10,
                            trainable_params_excl_classifier=100,
                            forward_matmul_flops=2000, seed=7)
        assert EVAL_CSV_HEADER == "mode,top1,params_excl_head,flops_adapter,seed"
        assert report.csv_row() == "merge,0.5,100,2000,7"

    def test_feature_dump(self, tmp_path):
        model, adapters = setup_model()
        _, val = gen_synthetic(classes=3, train_per_class=1, val_per_class=4,
                               channels=1, height=8, width=8, seed=18)
        path = tmp_path / "features.npy"
        evaluate(model, adapters, val, "merge", feature_dump=path)
        feats = np.load(path)
        assert feats.shape == (len(val), 16)


class TestParamAccounting:
    VIT_B = BackboneConfig(image_size=224, patch_size=16, channels=3, embed_dim=768,
                           num_layers=12, num_heads=12, num_classes=100)

    def test_reference_adapter_count_r64(self):
        acfg = AdapterConfig(bottleneck_dim=64, num_experts=4)
        assert count_trainable_from_config(self.VIT_B, acfg, "mosa") == 1_189_632

    def test_reference_adapter_count_r16(self):
        acfg = AdapterConfig(bottleneck_dim=16, num_experts=4)
        assert count_trainable_from_config(self.VIT_B, acfg, "mosa") == 304_320

    def test_count_is_expert_invariant_and_matches_standard(self):
        counts = {count_trainable_from_config(
            self.VIT_B, AdapterConfig(bottleneck_dim=64, num_experts=n), "mosa")
            for n in (1, 2, 3, 4, 5, 8)}
        assert counts == {1_189_632}

    def test_sparse_adapter_count(self):
        acfg = AdapterConfig(bottleneck_dim=64, num_experts=1, sparsify_up=False)
        count = count_trainable_from_config(self.VIT_B, acfg, "sparse_adapter",
                                            retain_fraction=0.25)
        assert count == round(0.25 * 768 * 64) * 2 * 12 + (64 + 768) * 12
        assert 290_000 < count < 310_000  # ~0.30 M

    def test_lora_rank16_count(self):
        acfg = AdapterConfig(kind="lora", bottleneck_dim=16, num_experts=4)
        assert count_trainable_from_config(self.VIT_B, acfg, "mosl") == 589_824

    def test_houlsby_doubles_count(self):
        acfg = AdapterConfig(bottleneck_dim=64, num_experts=4, insertion="houlsby")
        assert count_trainable_from_config(self.VIT_B, acfg, "mosa") == 2 * 1_189_632

    def test_live_count_matches_config_count(self):
        acfg = AdapterConfig(bottleneck_dim=4, num_experts=2)
        model, adapters = setup_model(num_experts=2)
        assert (count_trainable_params(model, adapters)
                == count_trainable_from_config(BCFG, acfg, "mosa"))

    def test_linear_probe_counts_zero(self):
        model = build_backbone(BCFG, Rng(19))
        assert count_trainable_params(model, None) == 0
        assert count_trainable_from_config(BCFG, None, "linear_probe") == 0

    def test_bias_tuning_counts_match_live(self):
        model = build_backbone(BCFG, Rng(20))
        model.mark_bias_trainable()
        assert (count_trainable_params(model, None)
                == count_trainable_from_config(BCFG, None, "bias"))

    def test_sparse_live_count(self):
        model, adapters = setup_model(num_experts=1)
        pruned = sparsify_adapter_set(adapters, 0.5, Rng(21))
        expected = (round(0.5 * 16 * 4) + round(0.5 * 4 * 16) + 4 + 16) * 2
        assert count_trainable_params(model, pruned) == expected
