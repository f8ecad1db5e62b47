"""Optimizer, schedule, fold, and training-pipeline tests.

The slow tests live at the bottom: a bitwise determinism check over two
full toy runs and a single-phantom overfit run that must cross 0.95
whole-tumor Dice after snapshot averaging.
"""

import math

import numpy as np
import pytest

from voxelforge.augment import AugmentPolicy
from voxelforge.preprocess import PreprocMode, pad_to_multiple, prepare_case
from voxelforge.tensornet import Tensor, save_params
from voxelforge.train import (
    AdamState,
    FoldSplit,
    ScheduleA,
    ScheduleB,
    SWAConfig,
    SWAState,
    TrainConfig,
    TrainError,
    adam_step,
    cosine_lr,
    filter_training_set,
    five_fold_split,
    select_best_epoch,
    swa_cycle_lr,
    swa_update,
    train_pipeline_A,
    train_pipeline_B,
    validation_loss,
)
from voxelforge.unet3d import ArchConfig, DiceLossSpec, build_model, forward
from voxelforge.volio import generate_phantom, labelmap_to_regions


def _params(values: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {n: Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for n, a in values.items()}


def _toy_config(width=2, patch=(16, 16, 16), seed=0, policy=None) -> TrainConfig:
    return TrainConfig(
        arch=ArchConfig(base_width=width),
        dice=DiceLossSpec(),
        policy=policy or AugmentPolicy(),
        preproc_mode=PreprocMode.ZSCORE_NONZERO,
        patch=patch,
        seed=seed,
    )


class TestAdam:
    def test_zero_gradient_leaves_parameters_unchanged(self):
        params = _params({"w": np.array([1.0, -2.0, 3.5])})
        state = AdamState.init(params)
        before = params["w"].data.copy()
        adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"].data, before)
        assert state.step == 1

    def test_first_step_is_signed_learning_rate(self):
        # after bias correction the first update is -lr*g/(|g|+eps)
        g = np.array([0.5, -3.0, 1e-3, 7.0])
        params = _params({"w": np.zeros(4)})
        state = AdamState.init(params)
        adam_step(params, {"w": g}, state, lr=1e-2)
        expected = -1e-2 * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(params["w"].data, expected, rtol=1e-12, atol=0)
        # the relative gap from -lr*sign(g) is eps/|g|, largest for the
        # smallest component here (1e-8 / 1e-3)
        np.testing.assert_allclose(params["w"].data, -1e-2 * np.sign(g), rtol=1e-4)

    def test_matches_textbook_recurrence(self):
        rng = np.random.default_rng(3)
        p0 = rng.normal(size=(4, 3))
        params = _params({"w": p0})
        state = AdamState.init(params)
        # reference: classic two-term moment updates in float64
        m = np.zeros_like(p0)
        v = np.zeros_like(p0)
        ref = p0.copy()
        lr = 3e-3
        for t in range(1, 8):
            g = rng.normal(size=(4, 3))
            adam_step(params, {"w": g}, state, lr)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            ref -= lr * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(params["w"].data, ref, rtol=1e-10)

    def test_ten_steps_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            params = _params({"a": rng.normal(size=5), "b": rng.normal(size=(2, 2))})
            state = AdamState.init(params)
            for _ in range(10):
                grads = {n: rng.normal(size=p.data.shape) for n, p in params.items()}
                adam_step(params, grads, state, lr=1e-3)
            return {n: p.data.tobytes() for n, p in params.items()}

        assert run() == run()

    def test_missing_gradient_errors(self):
        params = _params({"w": np.ones(2)})
        with pytest.raises(TrainError, match="missing gradient"):
            adam_step(params, {}, AdamState.init(params), lr=1e-3)

    def test_shape_mismatch_errors(self):
        params = _params({"w": np.ones(2)})
        with pytest.raises(TrainError, match="shape"):
            adam_step(params, {"w": np.ones(3)}, AdamState.init(params), lr=1e-3)

    def test_non_finite_gradient_errors(self):
        params = _params({"w": np.ones(2)})
        with pytest.raises(TrainError, match="non-finite"):
            adam_step(params, {"w": np.array([1.0, np.nan])}, AdamState.init(params), lr=1e-3)

    def test_state_defaults(self):
        state = AdamState.init(_params({"w": np.ones(3)}))
        assert (state.beta1, state.beta2, state.eps) == (0.9, 0.999, 1e-8)
        assert state.weight_decay == 0.0
        assert state.step == 0


class TestCosineSchedule:
    def test_frozen_values(self):
        sched = ScheduleA()
        assert cosine_lr(0, sched) == 1e-4
        assert cosine_lr(50, sched) == 1e-4
        assert cosine_lr(100, sched) == 1e-4
        assert math.isclose(cosine_lr(150, sched), 5e-5, rel_tol=1e-12)
        assert cosine_lr(200, sched) == 0.0

    def test_closed_form_at_every_epoch(self):
        sched = ScheduleA()
        for epoch in range(sched.epochs_total + 1):
            if epoch <= sched.flat_epochs:
                expected = sched.lr0
            else:
                frac = (epoch - sched.flat_epochs) / (sched.epochs_total - sched.flat_epochs)
                expected = sched.lr0 * 0.5 * (1 + math.cos(math.pi * frac))
            assert cosine_lr(epoch, sched) == expected

    def test_monotone_after_flat(self):
        sched = ScheduleA()
        values = [cosine_lr(e, sched) for e in range(sched.flat_epochs, sched.epochs_total + 1)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_out_of_range_errors(self):
        sched = ScheduleA()
        with pytest.raises(ValueError):
            cosine_lr(-1, sched)
        with pytest.raises(ValueError):
            cosine_lr(201, sched)

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            ScheduleA(epochs_total=100, flat_epochs=150)
        with pytest.raises(ValueError):
            ScheduleA(lr0=0.0)


class TestSwaCycleSchedule:
    def test_restart_value(self):
        swa = SWAConfig()
        assert swa_cycle_lr(0, swa) == 5e-5

    def test_midpoint(self):
        swa = SWAConfig()
        assert math.isclose(swa_cycle_lr(15, swa), 2.5e-5, rel_tol=1e-12)

    def test_monotone_within_cycle(self):
        swa = SWAConfig()
        values = [swa_cycle_lr(e, swa) for e in range(swa.cycle_epochs)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_out_of_range_errors(self):
        swa = SWAConfig()
        with pytest.raises(ValueError):
            swa_cycle_lr(swa.cycle_epochs, swa)
        with pytest.raises(ValueError):
            swa_cycle_lr(-1, swa)

    def test_defaults_give_150_extra_epochs_and_50_snapshots(self):
        swa = SWAConfig()
        assert swa.total_epochs == 150
        assert swa.total_snapshots == 50

    def test_snapshot_divisibility_enforced(self):
        with pytest.raises(ValueError, match="divide"):
            SWAConfig(cycle_epochs=30, snapshot_every=4)

    def test_positive_fields_enforced(self):
        with pytest.raises(ValueError):
            SWAConfig(lr_restart=0.0)
        with pytest.raises(ValueError):
            SWAConfig(cycles=0)


class TestScheduleB:
    def test_endpoints(self):
        sched = ScheduleB()
        assert sched.lr_at(0) == 1e-4
        assert math.isclose(sched.lr_at(200), 5e-5, rel_tol=1e-12)
        assert sched.lr_at(400) == 0.0

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ScheduleB().lr_at(401)

    def test_validation(self):
        with pytest.raises(ValueError):
            ScheduleB(batch=0)


class TestSwaMean:
    def _snapshot(self, rng):
        return {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}

    def test_single_snapshot_is_identity(self):
        rng = np.random.default_rng(0)
        snap = self._snapshot(rng)
        state = swa_update(SWAState(), snap)
        assert state.count == 1
        for name in snap:
            np.testing.assert_array_equal(state.mean[name], snap[name])

    def test_two_snapshots_average(self):
        rng = np.random.default_rng(1)
        s1, s2 = self._snapshot(rng), self._snapshot(rng)
        state = SWAState()
        swa_update(state, s1)
        swa_update(state, s2)
        for name in s1:
            np.testing.assert_allclose(state.mean[name], (s1[name] + s2[name]) / 2, rtol=1e-15)

    def test_fifty_snapshots_match_two_pass_mean(self):
        rng = np.random.default_rng(2)
        snaps = [self._snapshot(rng) for _ in range(50)]
        state = SWAState()
        for snap in snaps:
            swa_update(state, snap)
        assert state.count == 50
        for name in snaps[0]:
            expected = np.mean([s[name] for s in snaps], axis=0)
            np.testing.assert_allclose(state.mean[name], expected, atol=1e-6)

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        snaps = [self._snapshot(rng) for _ in range(12)]
        forward_state = SWAState()
        reverse_state = SWAState()
        for snap in snaps:
            swa_update(forward_state, snap)
        for snap in reversed(snaps):
            swa_update(reverse_state, snap)
        for name in snaps[0]:
            np.testing.assert_allclose(forward_state.mean[name], reverse_state.mean[name], atol=1e-6)

    def test_params_are_float32(self):
        state = swa_update(SWAState(), {"a": np.ones(3, dtype=np.float64)})
        assert state.params()["a"].dtype == np.float32

    def test_name_change_rejected(self):
        state = swa_update(SWAState(), {"a": np.ones(2)})
        with pytest.raises(ValueError, match="names"):
            swa_update(state, {"b": np.ones(2)})


class TestFolds:
    def test_ten_cases_even_folds(self):
        ids = [f"case{i:02d}" for i in range(10)]
        split = five_fold_split(ids, seed=7)
        assert [len(f) for f in split.folds] == [2] * 5

    def test_eleven_cases_sizes(self):
        ids = [f"case{i:02d}" for i in range(11)]
        split = five_fold_split(ids, seed=7)
        assert sorted(len(f) for f in split.folds) == [2, 2, 2, 2, 3]

    def test_disjoint_and_exhaustive(self):
        ids = [f"case{i:02d}" for i in range(23)]
        split = five_fold_split(ids, seed=5)
        flat = [cid for fold in split.folds for cid in fold]
        assert len(flat) == len(ids)
        assert set(flat) == set(ids)

    def test_deterministic_and_seed_sensitive(self):
        ids = [f"case{i:02d}" for i in range(25)]
        assert five_fold_split(ids, 9).folds == five_fold_split(ids, 9).folds
        assert five_fold_split(ids, 9).folds != five_fold_split(ids, 10).folds

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            five_fold_split(["a", "b", "a"], seed=0)

    def test_train_val_partition(self):
        split = FoldSplit((("a", "b"), ("c",), ("d",), ("e",), ("f",)))
        train, val = split.train_val(0)
        assert val == ["a", "b"]
        assert sorted(train) == ["c", "d", "e", "f"]

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="two folds"):
            FoldSplit((("a",), ("a",)))

    def test_unbalanced_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            FoldSplit((("a", "b", "c"), ("d",)))


class TestSelectionAndFiltering:
    def test_lowest_loss_selected(self):
        assert select_best_epoch([0.9, 0.4, 0.6]) == 1

    def test_strictly_decreasing_selects_last(self):
        assert select_best_epoch([0.5, 0.4, 0.3, 0.2]) == 3

    def test_tie_keeps_earliest(self):
        assert select_best_epoch([0.5, 0.3, 0.3, 0.4]) == 1

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            select_best_epoch([])

    def test_quantile_one_keeps_everything(self):
        losses = {f"c{i}": float(i) for i in range(10)}
        assert sorted(filter_training_set(losses, 1.0)) == sorted(losses)

    def test_quantile_09_drops_exactly_the_worst_of_ten(self):
        losses = {f"c{i}": float(i) for i in range(10)}
        kept = filter_training_set(losses, 0.9)
        assert sorted(kept) == sorted(set(losses) - {"c9"})

    def test_uniform_losses_drop_nothing(self):
        losses = {f"c{i}": 0.25 for i in range(8)}
        assert sorted(filter_training_set(losses, 0.5)) == sorted(losses)

    def test_invalid_quantile(self):
        with pytest.raises(ValueError):
            filter_training_set({"a": 1.0}, 0.0)
        with pytest.raises(ValueError):
            filter_training_set({"a": 1.0}, 1.5)


class TestTrainConfig:
    def test_patch_must_divide_by_8(self):
        with pytest.raises(ValueError, match="divisible by 8"):
            _toy_config(patch=(20, 24, 24))

    def test_valid_patch_accepted(self):
        assert _toy_config(patch=(16, 24, 32)).patch == (16, 24, 32)


class TestPipelineA:
    def test_toy_schedule_produces_four_snapshots(self):
        cases = [generate_phantom(s, (16, 16, 16)) for s in (0, 1)]
        cfg = _toy_config()
        sched = ScheduleA(
            epochs_total=20,
            flat_epochs=10,
            lr0=1e-3,
            swa=SWAConfig(lr_restart=5e-4, cycle_epochs=6, snapshot_every=3, cycles=2),
        )
        model, manifest = train_pipeline_A(cases, cfg, sched)
        assert manifest["swa_snapshots"] == 4
        # snapshots land at the end of epochs 3 and 6 within each cycle
        assert manifest["snapshot_epochs"] == [22, 25, 28, 31]
        assert len(manifest["epochs"]) == 20 + 12
        assert manifest["adam_reset_at_swa"] is True

    def test_manifest_lrs_match_schedules(self):
        cases = [generate_phantom(3, (16, 16, 16))]
        cfg = _toy_config()
        swa = SWAConfig(lr_restart=5e-4, cycle_epochs=4, snapshot_every=2, cycles=1)
        sched = ScheduleA(epochs_total=6, flat_epochs=3, lr0=1e-3, swa=swa)
        _, manifest = train_pipeline_A(cases, cfg, sched)
        lrs = [rec["lr"] for rec in manifest["epochs"]]
        expected = [cosine_lr(e, sched) for e in range(6)]
        expected += [swa_cycle_lr(e, swa) for e in range(4)]
        assert lrs == expected

    def test_every_epoch_records_finite_loss(self):
        cases = [generate_phantom(4, (16, 16, 16))]
        sched = ScheduleA(
            epochs_total=4,
            flat_epochs=2,
            lr0=1e-3,
            swa=SWAConfig(lr_restart=5e-4, cycle_epochs=2, snapshot_every=2, cycles=1),
        )
        _, manifest = train_pipeline_A(cases, _toy_config(), sched)
        for rec in manifest["epochs"]:
            assert math.isfinite(rec["train_loss"])

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            train_pipeline_A([], _toy_config(), ScheduleA())

    def test_determinism_bitwise(self, tmp_path):
        cases = [generate_phantom(s, (16, 16, 16)) for s in (0, 1)]
        sched = ScheduleA(
            epochs_total=6,
            flat_epochs=3,
            lr0=1e-3,
            swa=SWAConfig(lr_restart=5e-4, cycle_epochs=6, snapshot_every=3, cycles=1),
        )
        paths = []
        manifests = []
        for i in range(2):
            model, manifest = train_pipeline_A(cases, _toy_config(policy=AugmentPolicy(p_flip=0.5)), sched)
            path = tmp_path / f"run{i}.tnpk"
            save_params(model.state_dict(), path)
            paths.append(path)
            manifests.append(manifest)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert manifests[0] == manifests[1]


class TestPipelineB:
    def _run(self):
        train_cases = [generate_phantom(s, (16, 16, 16)) for s in (0, 1, 2)]
        val_cases = [generate_phantom(9, (16, 16, 16))]
        cfg = _toy_config(seed=1)
        sched = ScheduleB(epochs_max=3, lr0=1e-3, batch=2)
        model, manifest = train_pipeline_B(train_cases, val_cases, cfg, sched)
        return model, manifest, val_cases, cfg

    def test_selected_epoch_minimizes_validation_loss(self):
        model, manifest, val_cases, cfg = self._run()
        vals = [rec["val_loss"] for rec in manifest["epochs"]]
        assert manifest["selected_epoch"] == select_best_epoch(vals)
        assert manifest["selected_val_loss"] == min(vals)
        assert all(manifest["selected_val_loss"] <= v for v in vals)

    def test_returned_model_reproduces_selected_loss(self):
        model, manifest, val_cases, cfg = self._run()
        prepared = [prepare_case(v, lm, cfg.preproc_mode) for v, lm in val_cases]
        recomputed = validation_loss(model, prepared, cfg)
        assert math.isclose(recomputed, manifest["selected_val_loss"], rel_tol=1e-12)

    def test_empty_validation_set_rejected(self):
        cases = [generate_phantom(0, (16, 16, 16))]
        with pytest.raises(ValueError, match="validation"):
            train_pipeline_B(cases, [], _toy_config(), ScheduleB(epochs_max=1))

    def test_empty_training_set_rejected(self):
        cases = [generate_phantom(0, (16, 16, 16))]
        with pytest.raises(ValueError, match="training"):
            train_pipeline_B([], cases, _toy_config(), ScheduleB(epochs_max=1))


def _hard_wt_dice(model, phantom, mode) -> float:
    v, lm = prepare_case(*phantom, mode)
    padded, _ = pad_to_multiple(v, 8)
    model.eval()
    main, _ = forward(model, Tensor(padded.data[None]))
    z, y, x = lm.spatial_dims
    pred = main.data[0, 2, :z, :y, :x] >= 0.5
    truth = labelmap_to_regions(lm).wt
    tp = np.count_nonzero(pred & truth)
    fp = np.count_nonzero(pred & ~truth)
    fn = np.count_nonzero(~pred & truth)
    return 2 * tp / (2 * tp + fp + fn)


class TestOverfitInvariant:
    def test_single_phantom_reaches_wt_dice_above_095(self):
        # one fixed case, no augmentation: the averaged model must
        # memorize the whole tumor almost exactly
        phantom = generate_phantom(0, (32, 32, 32))
        cfg = _toy_config(width=4, patch=(32, 32, 32))
        sched = ScheduleA(
            epochs_total=320,
            flat_epochs=200,
            lr0=3e-3,
            swa=SWAConfig(lr_restart=3e-4, cycle_epochs=6, snapshot_every=3, cycles=2),
        )
        model, manifest = train_pipeline_A([phantom], cfg, sched)
        assert manifest["epochs"][0]["train_loss"] > manifest["epochs"][319]["train_loss"]
        dice = _hard_wt_dice(model, phantom, cfg.preproc_mode)
        assert dice > 0.95, f"overfit whole-tumor dice {dice:.4f}"
