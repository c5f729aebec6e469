import numpy as np
import pytest

import irvis.autodiff as ad
from irvis import pccl, tensorio
from irvis.autodiff import grad_check
from irvis.encoder import encode, init_params
from irvis.errors import ConfigError
from irvis.lora import LoraConfig
from irvis.training import (TrainConfig, forgetting_experiment, init_state,
                            linear_probe, lr_at, make_labeled_scenes,
                            make_pretrain_pairs, pooled_features, run_training,
                            to_channels, train_step, trainable_map)


def frozen_teacher(cfg):
    params = init_params(cfg)
    for t in params.values():
        t.requires_grad = False
    return params


def fresh_student(cfg):
    params = init_params(cfg)
    for t in params.values():
        t.requires_grad = True
    return params


class TestSchedule:
    CFG = TrainConfig(epochs=10, warmup_epochs=2, base_lr=1.5e-4,
                      steps_per_epoch=5)

    def test_starts_at_zero(self):
        assert lr_at(0, self.CFG) == 0.0

    def test_peak_at_warmup_end_exact(self):
        assert lr_at(10, self.CFG) == self.CFG.base_lr

    def test_final_step_zero(self):
        assert abs(lr_at(50, self.CFG)) <= 1e-12
        assert lr_at(51, self.CFG) == 0.0

    def test_junction_continuity(self):
        # warmup approaches base_lr linearly; cosine starts at base_lr
        assert abs(lr_at(9, self.CFG) - self.CFG.base_lr * 9 / 10) <= 1e-18
        assert abs(lr_at(10, self.CFG) - lr_at(11, self.CFG)) < self.CFG.base_lr * 0.01

    def test_warmup_monotone_then_decay_monotone(self):
        vals = [lr_at(s, self.CFG) for s in range(51)]
        assert all(b > a for a, b in zip(vals[:10], vals[1:11]))
        assert all(b < a for a, b in zip(vals[10:50], vals[11:51]))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=2, warmup_epochs=3)
        with pytest.raises(ConfigError):
            TrainConfig(loss_kind="triplet")
        with pytest.raises(ConfigError):
            TrainConfig(base_lr=0.0)


class TestToChannels:
    def test_expand_gray(self):
        img = np.random.default_rng(0).random((1, 4, 4))
        out = to_channels(img, 3)
        assert out.shape == (3, 4, 4)
        assert all(np.array_equal(out[c], img[0]) for c in range(3))

    def test_collapse_rgb(self):
        img = np.random.default_rng(1).random((3, 4, 4))
        assert np.array_equal(to_channels(img, 1), img.mean(axis=0, keepdims=True))

    def test_identity_and_error(self):
        img = np.zeros((3, 4, 4))
        assert to_channels(img, 3) is img
        with pytest.raises(ConfigError):
            to_channels(np.zeros((2, 4, 4)), 3)


class TestTrainStep:
    def test_zero_coefficients_leave_params_untouched(self, toy_cfg):
        teacher = frozen_teacher(toy_cfg)
        student = fresh_student(toy_cfg)
        before = {k: t.data.copy() for k, t in student.items()}
        cfg = TrainConfig(epochs=2, warmup_epochs=0, alpha=0.0, beta=0.0,
                          base_lr=1e-2, steps_per_epoch=1)
        state = init_state(student)
        metrics = train_step(state, make_pretrain_pairs(2, seed=0), teacher,
                             toy_cfg, cfg)
        assert metrics["loss"] == 0.0
        for k in student:
            assert np.array_equal(student[k].data, before[k]), k

    def test_zero_lr_with_zero_weight_decay_freezes_params(self, toy_cfg):
        teacher = frozen_teacher(toy_cfg)
        student = fresh_student(toy_cfg)
        before = {k: t.data.copy() for k, t in student.items()}
        # warmup covers the whole schedule, so step 0 sees lr exactly 0
        cfg = TrainConfig(epochs=1, warmup_epochs=1, base_lr=1e-2,
                          weight_decay=0.0, steps_per_epoch=4)
        state = init_state(student)
        train_step(state, make_pretrain_pairs(2, seed=0), teacher, toy_cfg, cfg)
        for k in student:
            assert np.array_equal(student[k].data, before[k]), k

    def test_metrics_schema(self, toy_cfg):
        teacher = frozen_teacher(toy_cfg)
        state = init_state(fresh_student(toy_cfg))
        cfg = TrainConfig(epochs=2, warmup_epochs=1, steps_per_epoch=1)
        m = train_step(state, make_pretrain_pairs(2, seed=1), teacher, toy_cfg, cfg)
        assert sorted(m) == ["l_iv", "l_vv", "loss", "lr", "step"]
        assert m["step"] == 0 and state.step == 1
        assert np.isfinite(m["loss"])

    def test_teacher_bytes_unchanged_by_run(self, toy_cfg):
        teacher = frozen_teacher(toy_cfg)
        ref = tensorio.checkpoint_bytes({k: t.data for k, t in teacher.items()})
        state = init_state(fresh_student(toy_cfg))
        cfg = TrainConfig(epochs=3, warmup_epochs=1, base_lr=1e-3, batch_size=4)
        run_training(make_pretrain_pairs(8, seed=2), teacher, state, toy_cfg, cfg)
        assert tensorio.checkpoint_bytes(
            {k: t.data for k, t in teacher.items()}) == ref

    def test_lora_run_changes_adapters_and_pos_embed_only(self, toy_cfg):
        from irvis.lora import attach
        teacher = frozen_teacher(toy_cfg)
        student = fresh_student(toy_cfg)
        adapters = attach(student, LoraConfig(rank=4, dropout=0.0), seed=0)
        before = {k: t.data.copy() for k, t in student.items()}
        state = init_state(student, adapters)
        cfg = TrainConfig(epochs=3, warmup_epochs=1, base_lr=1e-3, batch_size=4,
                          lora=LoraConfig(rank=4, dropout=0.0))
        run_training(make_pretrain_pairs(8, seed=3), teacher, state, toy_cfg, cfg)
        for k in student:
            if k == "pos_embed":
                assert not np.array_equal(student[k].data, before[k])
            else:
                assert np.array_equal(student[k].data, before[k]), k
        assert any(np.abs(a.B.data).max() > 0 for a in adapters.values())

    def test_run_is_deterministic(self, toy_cfg):
        teacher = frozen_teacher(toy_cfg)
        logs = []
        for _ in range(2):
            state = init_state(fresh_student(toy_cfg))
            cfg = TrainConfig(epochs=3, warmup_epochs=1, base_lr=1e-3,
                              batch_size=4, seed=5)
            run_training(make_pretrain_pairs(8, seed=4), teacher, state, toy_cfg,
                         cfg)
            logs.append(state.log)
        assert logs[0] == logs[1]

    def test_loss_decreases_on_fixed_batch(self, toy_cfg):
        teacher = frozen_teacher(toy_cfg)
        state = init_state(fresh_student(toy_cfg))
        cfg = TrainConfig(epochs=50, warmup_epochs=0, base_lr=1e-2,
                          weight_decay=0.0, batch_size=4, steps_per_epoch=1)
        batch = make_pretrain_pairs(4, seed=3)
        first = train_step(state, batch, teacher, toy_cfg, cfg)["loss"]
        for _ in range(49):
            last = train_step(state, batch, teacher, toy_cfg, cfg)["loss"]
        assert last < 0.5 * first


class TestEndToEndGradients:
    @pytest.mark.parametrize("loss_kind", ["pccl", "mse", "nce",
                                           "pccl_softmax_variant"])
    def test_param_gradient_matches_finite_differences(self, toy_cfg, loss_kind):
        teacher = frozen_teacher(toy_cfg)
        student = fresh_student(toy_cfg)
        sample = make_pretrain_pairs(1, seed=6)[0]
        vis = to_channels(sample.visible.data, toy_cfg.channels)
        ir = to_channels(sample.infrared.data, toy_cfg.channels)
        teacher_out = encode(vis, teacher, toy_cfg)
        f_vf = teacher_out.features
        labels = pccl.pseudo_labels(teacher_out.attention_last, 0.6)
        name = "blocks.1.qkv.weight"

        def full_loss(t):
            p = dict(student)
            p[name] = t
            f_i = encode(ir, p, toy_cfg).features
            f_v = encode(vis, p, toy_cfg).features
            if loss_kind == "mse":
                di, dv = f_i - f_vf, f_v - f_vf
                return ad.tmean(ad.mul(di, di)) + ad.tmean(ad.mul(dv, dv))
            s_iv = pccl.similarity(f_i, f_vf, 0.04)
            s_vv = pccl.similarity(f_v, f_vf, 0.04)
            if loss_kind == "nce":
                return (ad.diag_cross_entropy(s_iv.values)
                        + ad.diag_cross_entropy(s_vv.values))
            if loss_kind == "pccl_softmax_variant":
                return (pccl.loss_variant_softmax(s_iv, labels)
                        + pccl.loss_variant_softmax(s_vv, labels))
            return pccl.loss_pccl(pccl.loss_iv(s_iv, labels),
                                  pccl.loss_vv(s_vv, labels), 1.0, 1.0)

        err = grad_check(full_loss, student[name], sample=12, seed=2)
        assert err < 1e-4, loss_kind


class TestProbe:
    def test_separable_features_give_perfect_accuracy(self):
        rng = np.random.default_rng(7)
        n = 20
        labels = ["a" if i % 4 < 2 else "b" for i in range(n)]
        feats = rng.normal(size=(n, 6)) * 0.01
        feats[:, 0] += [5.0 if lab == "a" else -5.0 for lab in labels]
        assert linear_probe(feats, labels) == 1.0

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(8)
        feats = rng.normal(size=(200, 4))
        labels = list(rng.choice(["a", "b"], size=200))
        assert linear_probe(feats, labels) < 0.75

    def test_single_class_returns_prior(self):
        feats = np.random.default_rng(9).normal(size=(6, 3))
        assert linear_probe(feats, ["a"] * 6) == 1.0

    def test_validation(self):
        with pytest.raises(ConfigError):
            linear_probe(np.zeros((4, 2)), ["a", "b"])
        with pytest.raises(ConfigError):
            linear_probe(np.zeros((1, 2)), ["a"])

    def test_labeled_scenes_balanced_across_split(self):
        _, labels = make_labeled_scenes(16, seed=0)
        even = {labels[i] for i in range(0, 16, 2)}
        odd = {labels[i] for i in range(1, 16, 2)}
        assert even == odd == {"person", "vehicle"}


class TestForgettingGrid:
    def test_tiny_grid_shape_and_ordering(self, toy_cfg):
        cfg = TrainConfig(epochs=2, warmup_epochs=1, base_lr=3e-3, batch_size=4,
                          lora=LoraConfig(rank=4, dropout=0.0), seed=0)
        report = forgetting_experiment(toy_cfg, cfg, seeds=(0,), n_pairs=4,
                                       n_probe=8)
        assert [r["row"] for r in report] == ["a", "b", "c", "d", "e"]
        by_row = {r["row"]: r for r in report}
        assert by_row["a"]["trainable_params"] == 0
        assert by_row["d"]["trainable_params"] < by_row["b"]["trainable_params"]
        assert by_row["d"]["uses_lora"] and not by_row["d"]["uses_vv"]
        for r in report:
            assert 0.0 <= r["visible_probe"] <= 1.0
            assert 0.0 <= r["infrared_probe"] <= 1.0


def test_pooled_features_shape(toy_cfg, toy_params):
    samples, _ = make_labeled_scenes(4, seed=1)
    feats = pooled_features(samples, toy_params, toy_cfg)
    assert feats.shape == (4, toy_cfg.dim)
    ir = pooled_features(samples, toy_params, toy_cfg, modality="infrared")
    assert not np.array_equal(feats, ir)


def test_trainable_map_respects_flags(toy_cfg):
    student = fresh_student(toy_cfg)
    state = init_state(student)
    assert sorted(trainable_map(state)) == sorted(student)
    student["norm.weight"].requires_grad = False
    assert "norm.weight" not in trainable_map(state)
