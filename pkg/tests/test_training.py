"""Schedule, optimizer, batch assembly, and train-loop behavior."""

import json

import numpy as np
import pytest

import xgrain.autograd as ag
from xgrain.errors import ContractError
from xgrain.objectives import AlignmentModel
from xgrain.training import (
    AblationFlags,
    OptimizerState,
    Schedule,
    TrainSettings,
    assemble_batch,
    clip_gradients,
    lr_at,
    optimizer_step,
    train,
)

from conftest import micro_config


# ---------------------------------------------------------------------------
# learning-rate schedule

REFERENCE = Schedule(lr_start=1e-5, lr_peak=1e-4, lr_end=1e-5,
                     warmup_steps=2500, total_steps=20000)


def test_schedule_anchor_values_exact():
    assert lr_at(0, REFERENCE) == 1e-5
    assert lr_at(2500, REFERENCE) == 1e-4
    assert lr_at(20000, REFERENCE) == 1e-5


def test_warmup_midpoint_value():
    assert lr_at(1250, REFERENCE) == pytest.approx(5.5e-5, rel=1e-12)


def test_interior_points_follow_linear_segments():
    for step in (250, 500, 1000, 1750, 2250):
        t = step / REFERENCE.warmup_steps
        want = 1e-5 * (1 - t) + 1e-4 * t
        assert lr_at(step, REFERENCE) == pytest.approx(want, rel=1e-12)
    for step in (3000, 7000, 11000, 15000, 19000):
        t = (step - 2500) / (20000 - 2500)
        want = 1e-4 * (1 - t) + 1e-5 * t
        assert lr_at(step, REFERENCE) == pytest.approx(want, rel=1e-12)


def test_schedule_continuous_at_warmup_boundary():
    w = REFERENCE.warmup_steps
    left = lr_at(w, REFERENCE)
    right = lr_at(w + 1, REFERENCE)
    assert left == REFERENCE.lr_peak
    # the first decay step moves by exactly one segment slope
    slope = (REFERENCE.lr_end - REFERENCE.lr_peak) / (REFERENCE.total_steps - w)
    assert right == pytest.approx(REFERENCE.lr_peak + slope, rel=1e-12)


def test_constant_schedule():
    s = Schedule(lr_start=3e-4, lr_peak=3e-4, lr_end=3e-4, warmup_steps=10, total_steps=100)
    for step in (0, 5, 10, 50, 100):
        assert lr_at(step, s) == 3e-4


def test_zero_warmup_starts_at_peak():
    s = Schedule(lr_start=1e-5, lr_peak=2e-4, lr_end=1e-6, warmup_steps=0, total_steps=50)
    assert lr_at(0, s) == 2e-4
    assert lr_at(50, s) == 1e-6


def test_all_warmup_schedule_ends_at_peak():
    s = Schedule(lr_start=0.0, lr_peak=1e-3, lr_end=5e-4, warmup_steps=40, total_steps=40)
    assert lr_at(0, s) == 0.0
    assert lr_at(20, s) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(40, s) == 1e-3


def test_schedule_validation():
    with pytest.raises(ContractError):
        Schedule(lr_start=1e-5, lr_peak=1e-4, lr_end=1e-5, warmup_steps=11, total_steps=10)
    with pytest.raises(ContractError):
        Schedule(lr_start=1e-5, lr_peak=1e-4, lr_end=1e-5, warmup_steps=0, total_steps=0)
    with pytest.raises(ContractError):
        Schedule(lr_start=-1e-5, lr_peak=1e-4, lr_end=1e-5, warmup_steps=5, total_steps=10)
    with pytest.raises(ContractError):
        lr_at(-1, REFERENCE)
    with pytest.raises(ContractError):
        lr_at(REFERENCE.total_steps + 1, REFERENCE)


def test_default_settings_schedule():
    s = TrainSettings().schedule()
    assert lr_at(0, s) == 5e-5
    assert lr_at(300, s) == 5e-4
    assert lr_at(3000, s) == 5e-5


# ---------------------------------------------------------------------------
# optimizer

def _param(values) -> dict[str, ag.Tensor]:
    t = ag.Tensor(np.asarray(values, dtype=np.float64))
    t.requires_grad = True
    return {"p": t}


def test_zero_gradient_without_decay_leaves_params():
    params = _param([1.0, -2.0, 3.0])
    params["p"].grad = np.zeros(3)
    state = OptimizerState(params, weight_decay=0.0)
    assert optimizer_step(params, state, lr=1e-2)
    assert state.t == 1
    np.testing.assert_array_equal(params["p"].data, [1.0, -2.0, 3.0])


def test_zero_gradient_with_decay_shrinks_params():
    params = _param([1.0, -2.0, 3.0])
    params["p"].grad = np.zeros(3)
    state = OptimizerState(params, weight_decay=0.1)
    assert optimizer_step(params, state, lr=0.5)
    np.testing.assert_allclose(params["p"].data,
                               np.array([1.0, -2.0, 3.0]) * (1 - 0.5 * 0.1), rtol=1e-15)


def test_first_step_closed_form():
    params = _param([2.0])
    params["p"].grad = np.array([0.4])
    state = OptimizerState(params, weight_decay=0.02)
    assert optimizer_step(params, state, lr=1e-3)
    # bias correction cancels on step one: update = lr * g / (|g| + eps)
    want = 2.0 * (1 - 1e-3 * 0.02) - 1e-3 * 0.4 / (0.4 + state.eps)
    np.testing.assert_allclose(params["p"].data, [want], rtol=1e-12)


def test_quadratic_converges():
    # update magnitude is capped near lr, so arrive on a large rate first and
    # then anneal to kill the steady-state oscillation around the optimum
    params = _param([10.0])
    state = OptimizerState(params, weight_decay=0.0)
    for i in range(1500):
        x = params["p"].data[0]
        params["p"].grad = np.array([2.0 * (x - 3.0)])
        optimizer_step(params, state, lr=5e-2 if i < 500 else 1e-3)
    assert abs(params["p"].data[0] - 3.0) < 1e-3


def test_nonfinite_gradient_skips_step():
    params = _param([1.0, 2.0])
    params["p"].grad = np.array([np.nan, 0.0])
    state = OptimizerState(params, weight_decay=0.02)
    assert not optimizer_step(params, state, lr=1e-2)
    assert state.t == 0
    np.testing.assert_array_equal(params["p"].data, [1.0, 2.0])
    np.testing.assert_array_equal(state.m["p"], [0.0, 0.0])
    params["p"].grad = np.array([0.1, 0.1])
    assert optimizer_step(params, state, lr=1e-2)


def test_moments_stay_float64_for_float32_params():
    t = ag.Tensor(np.ones(4, dtype=np.float32))
    t.requires_grad = True
    params = {"w": t}
    state = OptimizerState(params)
    assert state.m["w"].dtype == np.float64
    assert state.v["w"].dtype == np.float64
    t.grad = np.full(4, 0.25, dtype=np.float32)
    optimizer_step(params, state, lr=1e-3)
    assert state.m["w"].dtype == np.float64
    assert params["w"].data.dtype == np.float32


def test_optimizer_state_round_trip():
    params = _param([1.0, 2.0, 3.0])
    state = OptimizerState(params, weight_decay=0.02)
    rng = np.random.default_rng(0)
    for _ in range(3):
        params["p"].grad = rng.normal(size=3)
        optimizer_step(params, state, lr=1e-3)
    restored = OptimizerState.from_arrays(params, state.arrays(), weight_decay=0.02)
    assert restored.t == state.t == 3
    np.testing.assert_array_equal(restored.m["p"], state.m["p"])
    np.testing.assert_array_equal(restored.v["p"], state.v["p"])

    # continuing from the restored state reproduces the original trajectory
    clone = _param(params["p"].data.copy())
    clone_state = OptimizerState.from_arrays(clone, state.arrays(), weight_decay=0.02)
    g = rng.normal(size=3)
    params["p"].grad = g.copy()
    clone["p"].grad = g.copy()
    optimizer_step(params, state, lr=1e-3)
    optimizer_step(clone, clone_state, lr=1e-3)
    np.testing.assert_array_equal(clone["p"].data, params["p"].data)


# ---------------------------------------------------------------------------
# gradient clipping

def test_clip_scales_down_large_gradients():
    a = ag.Tensor(np.zeros(3))
    b = ag.Tensor(np.zeros(4))
    a.grad = np.full(3, 2.0)
    b.grad = np.full(4, -2.0)
    params = {"a": a, "b": b}
    before = float(np.sqrt(sum((p.grad ** 2).sum() for p in params.values())))
    returned = clip_gradients(params, max_norm=1.0)
    assert returned == pytest.approx(before, rel=1e-12)
    after = float(np.sqrt(sum((p.grad ** 2).sum() for p in params.values())))
    assert after == pytest.approx(1.0, rel=1e-9)
    # direction preserved
    assert np.all(a.grad > 0) and np.all(b.grad < 0)


def test_clip_leaves_small_gradients_untouched():
    a = ag.Tensor(np.zeros(2))
    a.grad = np.array([0.3, -0.4])
    returned = clip_gradients({"a": a}, max_norm=1.0)
    assert returned == pytest.approx(0.5, rel=1e-12)
    np.testing.assert_array_equal(a.grad, [0.3, -0.4])


def test_clip_skips_missing_gradients():
    a = ag.Tensor(np.zeros(2))
    b = ag.Tensor(np.zeros(2))
    b.grad = np.array([3.0, 4.0])
    returned = clip_gradients({"a": a, "b": b}, max_norm=1.0)
    assert returned == pytest.approx(5.0, rel=1e-12)
    assert a.grad is None


# ---------------------------------------------------------------------------
# batch assembly

def test_half_batch_annotated(tiny_train):
    assert tiny_train.annotated and tiny_train.caption_only
    rng = np.random.default_rng(11)
    by_id = {r.image_id: r for r in tiny_train.records}
    for _ in range(100):
        batch = assemble_batch(tiny_train, 8, AblationFlags(), rng)
        assert len(batch.record_ids) == 8
        assert batch.images.shape[0] == 8
        annotated = sum(1 for rid in batch.record_ids if by_id[rid].concepts)
        assert annotated == 4


def test_every_slot_contributes_a_caption_pair(tiny_train):
    rng = np.random.default_rng(12)
    batch = assemble_batch(tiny_train, 6, AblationFlags(), rng)
    caption_slots = [slot for slot, _, box, kind in batch.pairs if kind == "caption"]
    assert sorted(caption_slots) == list(range(6))
    for _, _, box, kind in batch.pairs:
        if kind == "caption":
            assert box is None
        else:
            assert box is not None
            assert kind in ("object", "region")


def test_annotated_slots_contribute_one_concept_pair(tiny_train):
    rng = np.random.default_rng(13)
    by_id = {r.image_id: r for r in tiny_train.records}
    batch = assemble_batch(tiny_train, 8, AblationFlags(), rng)
    concept_counts = {slot: 0 for slot in range(8)}
    for slot, _, _, kind in batch.pairs:
        if kind != "caption":
            concept_counts[slot] += 1
    for slot, rid in enumerate(batch.record_ids):
        assert concept_counts[slot] == (1 if by_id[rid].concepts else 0)


def test_ablation_flags_filter_concept_kinds(tiny_train):
    for flags, banned in ((AblationFlags(no_object=True), "object"),
                          (AblationFlags(no_region=True), "region")):
        rng = np.random.default_rng(14)
        for _ in range(20):
            batch = assemble_batch(tiny_train, 8, flags, rng)
            kinds = {kind for _, _, _, kind in batch.pairs}
            assert banned not in kinds


def test_ablations_see_identical_record_streams(tiny_train):
    """Flag settings must not perturb which records get sampled."""
    variants = [AblationFlags(), AblationFlags(no_object=True),
                AblationFlags(no_region=True), AblationFlags(no_bbox_loss=True)]
    streams = []
    for flags in variants:
        rng = np.random.default_rng(15)
        ids = []
        for _ in range(50):
            ids.append(tuple(assemble_batch(tiny_train, 8, flags, rng).record_ids))
        streams.append(ids)
    for other in streams[1:]:
        assert other == streams[0]


def test_assemble_batch_rejects_tiny_batches(tiny_train):
    with pytest.raises(ContractError):
        assemble_batch(tiny_train, 1, AblationFlags(), np.random.default_rng(0))


def test_empty_datasets_are_rejected(tiny_train, tmp_path):
    from xgrain.data import Dataset
    with pytest.raises(ContractError):
        Dataset(tmp_path, [], tiny_train.vocab)
    # assemble_batch keeps its own guard for hand-built dataset objects
    hollow = Dataset.__new__(Dataset)
    hollow.records = []
    hollow.annotated = []
    hollow.caption_only = []
    with pytest.raises(ContractError):
        assemble_batch(hollow, 4, AblationFlags(), np.random.default_rng(0))


# ---------------------------------------------------------------------------
# train loop

METRIC_KEYS = {"step", "lr", "l_bbox", "l_cl", "l_match", "l_mlm", "total"}


def _read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _smoke_settings(**overrides) -> TrainSettings:
    base = dict(total_steps=3, warmup_steps=1, lr_start=1e-4, lr_peak=1e-3,
                lr_end=1e-4, batch_size=4, checkpoint_interval=10, seed=9)
    base.update(overrides)
    return TrainSettings(**base)


def test_train_smoke_writes_metrics_and_checkpoint(small_model, tiny_train, tmp_path):
    settings = _smoke_settings()
    result = train(small_model, tiny_train, settings, tmp_path)
    assert result["steps_run"] == 3
    lines = _read_metrics(tmp_path / "metrics.jsonl")
    assert [line["step"] for line in lines] == [1, 2, 3]
    schedule = settings.schedule()
    for line in lines:
        assert set(line) == METRIC_KEYS
        assert line["lr"] == lr_at(line["step"] - 1, schedule)
        assert np.isfinite(line["total"])
        assert line["total"] == pytest.approx(
            line["l_bbox"] + line["l_cl"] + line["l_match"] + line["l_mlm"], rel=1e-6)
    assert result["final"] == lines[-1]
    assert (tmp_path / "checkpoint" / "manifest.json").exists()


def test_no_bbox_loss_flag_zeroes_box_term(small_model, tiny_train, tmp_path):
    train(small_model, tiny_train, _smoke_settings(total_steps=2), tmp_path,
          flags=AblationFlags(no_bbox_loss=True))
    for line in _read_metrics(tmp_path / "metrics.jsonl"):
        assert line["l_bbox"] == 0.0
        assert line["l_cl"] > 0 and line["l_match"] > 0 and line["l_mlm"] > 0


def test_checkpoint_round_trips_params_and_optimizer(small_model, tiny_train, tmp_path):
    train(small_model, tiny_train, _smoke_settings(checkpoint_interval=3), tmp_path)
    loaded, step, opt_arrays = AlignmentModel.load(tmp_path / "checkpoint")
    assert step == 3
    assert opt_arrays is not None and int(opt_arrays["t"][0]) == 3
    live = small_model.params()
    for name, tensor in loaded.params().items():
        np.testing.assert_array_equal(tensor.data, live[name].data, err_msg=name)


def test_resume_appends_and_continues_numbering(small_model, tiny_train, tmp_path):
    settings = _smoke_settings(total_steps=4, checkpoint_interval=2)
    train(small_model, tiny_train, _smoke_settings(total_steps=2, checkpoint_interval=2),
          tmp_path)
    loaded, step, opt_arrays = AlignmentModel.load(tmp_path / "checkpoint")
    assert step == 2
    optimizer = OptimizerState.from_arrays(loaded.params(), opt_arrays,
                                           weight_decay=settings.weight_decay)
    result = train(loaded, tiny_train, settings, tmp_path, start_step=2, optimizer=optimizer)
    assert result["steps_run"] == 2
    lines = _read_metrics(tmp_path / "metrics.jsonl")
    assert [line["step"] for line in lines] == [1, 2, 3, 4]


def test_train_rejects_finished_start_step(small_model, tiny_train, tmp_path):
    with pytest.raises(ContractError):
        train(small_model, tiny_train, _smoke_settings(total_steps=2), tmp_path, start_step=2)


def test_nonfinite_loss_names_offending_records(small_model, tiny_train, tmp_path):
    # poison only the box head: every other loss stays finite, the total does not
    poisoned = small_model.params()["heads.bbox_fc2.b"]
    poisoned.data = np.full_like(poisoned.data, np.nan)
    with pytest.raises(ContractError, match="offending batch records"):
        train(small_model, tiny_train, _smoke_settings(), tmp_path)
