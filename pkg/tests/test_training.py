import io
import json
import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from multilevel_clip.encoders import ScenarioModel, Tokenizer, save_checkpoint
from multilevel_clip.exceptions import InvalidParameterError, TrainingDivergedError
from multilevel_clip.synth import SceneConfig, generate_scene
from multilevel_clip.training import (
    LambdaSchedule,
    TrainConfig,
    build_optimizer,
    fit_model,
    lambda_kd,
    lr_at_step,
    set_learning_rate,
    train,
    warmup_steps_for,
)

from conftest import small_encoder_config, words_for
from oracles import oracle_lambda, oracle_lr

ANNEAL_1 = LambdaSchedule.parse("anneal:1-0")
ANNEAL_10 = LambdaSchedule.parse("anneal:10-0")


# ------------------------------------------------------------------- lambda

def test_schedule_parse():
    assert LambdaSchedule.parse("fixed:10") == LambdaSchedule("fixed", 10.0)
    assert (ANNEAL_1.start, ANNEAL_1.mid, ANNEAL_1.end) == (1.0, 0.5, 0.0)
    assert (ANNEAL_10.start, ANNEAL_10.mid, ANNEAL_10.end) == (10.0, 1.0, 0.0)
    assert LambdaSchedule.parse("anneal:4-2:3").mid == 3.0
    assert LambdaSchedule.parse("none").value == 0.0
    assert LambdaSchedule.parse(ANNEAL_1.describe()) == ANNEAL_1
    for bad in ("fixed", "anneal:1", "cosine:1-0", "fixed:-1"):
        with pytest.raises(InvalidParameterError):
            LambdaSchedule.parse(bad)
    with pytest.raises(InvalidParameterError):
        LambdaSchedule("anneal", p1=0.7, p2=0.4)


def test_lambda_examples():
    assert lambda_kd(0.2, ANNEAL_1) == 1.0
    assert lambda_kd(0.55, ANNEAL_1) == pytest.approx(0.75, abs=1e-12)
    assert lambda_kd(0.85, ANNEAL_10) == pytest.approx(0.5, abs=1e-12)
    assert lambda_kd(1.0, ANNEAL_1) == 0.0
    assert lambda_kd(0.3, LambdaSchedule("fixed", 10.0)) == 10.0


@pytest.mark.parametrize("p", [0.0, 0.1, 0.4, 0.45, 0.6, 0.7, 0.8, 0.95, 1.0])
@pytest.mark.parametrize("sched,args", [(ANNEAL_1, (1, 0.5, 0)), (ANNEAL_10, (10, 1, 0))])
def test_lambda_matches_oracle(p, sched, args):
    assert lambda_kd(p, sched) == pytest.approx(oracle_lambda(p, *args), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("sched", [ANNEAL_1, ANNEAL_10])
def test_lambda_continuity(sched):
    for bp in (sched.p1, sched.p2):
        left, right = lambda_kd(bp, sched), lambda_kd(math.nextafter(bp, 2), sched)
        assert abs(left - right) <= 1e-12


@given(st.floats(0, 1), st.floats(0, 1))
def test_lambda_anneal_is_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert lambda_kd(lo, ANNEAL_10) >= lambda_kd(hi, ANNEAL_10)


def test_lambda_rejects_out_of_range_progress():
    with pytest.raises(InvalidParameterError):
        lambda_kd(1.5, ANNEAL_1)


# ----------------------------------------------------------------------- lr

def test_lr_examples():
    total, base = 1000, 2e-5
    w = warmup_steps_for(total, 0.1)
    assert w == 100
    assert lr_at_step(0, total, base) == pytest.approx(base * 1e-3, rel=1e-12)
    assert lr_at_step(w, total, base) == pytest.approx(base, rel=1e-12)
    assert lr_at_step(total - 1, total, base) < 1e-3 * base
    left = base * (1e-3 + (1 - 1e-3) * (w - 1e-9) / w)
    assert abs(lr_at_step(w, total, base) - left) <= 1e-12 * base + 1e-15


@pytest.mark.parametrize("step,total,frac", [(0, 50, 0.1), (3, 50, 0.1), (5, 50, 0.1),
                                             (27, 50, 0.1), (49, 50, 0.1), (10, 300, 0.25)])
def test_lr_matches_oracle(step, total, frac):
    assert lr_at_step(step, total, 1e-3, frac) == pytest.approx(oracle_lr(step, total, 1e-3, frac),
                                                               rel=1e-9, abs=1e-18)


def test_lr_out_of_range():
    with pytest.raises(InvalidParameterError):
        lr_at_step(10, 10, 1e-3)


# -------------------------------------------------------------- optimizer

def test_train_config_validation():
    with pytest.raises(InvalidParameterError):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(warmup_fraction=1.0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(caption_templates=("no slot",))
    assert TrainConfig(lambda_kd="fixed:10").lambda_kd.value == 10.0


def test_optimizer_groups(small_model):
    opt = build_optimizer(small_model, TrainConfig(base_lr=2e-5))
    set_learning_rate(opt, 2e-5)
    main, kd = opt.param_groups
    assert kd["params"] == [small_model.log_kd_temperature]
    assert kd["lr"] == pytest.approx(2e-6, rel=1e-12) and kd["weight_decay"] == 0.0
    assert main["lr"] == 2e-5 and main["weight_decay"] == 0.2
    assert opt.defaults["betas"] == (0.9, 0.999) and opt.defaults["eps"] == 1e-8
    n_main = sum(1 for n, _ in small_model.named_parameters() if n != "log_kd_temperature")
    assert len(main["params"]) == n_main


def test_decoupled_weight_decay():
    w = torch.nn.Parameter(torch.tensor([2.0, -1.0], dtype=torch.float64))
    opt = torch.optim.AdamW([w], lr=0.1, weight_decay=0.2)
    w.grad = torch.zeros_like(w)
    opt.step()
    assert torch.allclose(w.detach(), torch.tensor([2.0, -1.0], dtype=torch.float64) * (1 - 0.1 * 0.2),
                          rtol=0, atol=1e-15)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def records32():
    cfg = SceneConfig(image_size=32)
    return [generate_scene(cfg, seed=(7, i), scene_id=f"t{i}") for i in range(32)]


def _fit(records, **kw):
    torch.manual_seed(0)
    model = ScenarioModel(small_encoder_config(), Tokenizer(words_for(records)))
    cfg = TrainConfig(**{"epochs": 2, "batch_size": 8, "base_lr": 3e-3,
                         "ema_warmup_steps": 2, **kw})
    history, ema, _ = fit_model(model, records, cfg)
    return model, history, ema


def _bytes(model):
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    return buf.getvalue()


def test_training_descends(records32):
    _, history, _ = _fit(records32, epochs=4)
    first = sum(h["L_total"] for h in history[:4]) / 4
    last = sum(h["L_total"] for h in history[-4:]) / 4
    assert last < first
    assert len(history) == 16
    assert {"step", "L_total", "L_KD", "L_CA_global", "L_CA_object", "L_CA_relation",
            "lambda_kd", "lr", "temperature_global", "kd_temperature"} <= set(history[0])


def test_training_is_deterministic(records32):
    a, ha, _ = _fit(records32)
    b, hb, _ = _fit(records32)
    assert _bytes(a) == _bytes(b)
    assert ha == hb


def test_lambda_changes_the_result(records32):
    a, _, _ = _fit(records32, lambda_kd="fixed:1")
    b, hb, _ = _fit(records32, lambda_kd="fixed:10")
    assert _bytes(a) != _bytes(b)
    assert {h["lambda_kd"] for h in hb} == {10.0}


def test_no_kd_run_logs_zero_weight(records32):
    _, history, _ = _fit(records32, lambda_kd="none")
    assert all(h["lambda_kd"] == 0.0 and h["L_KD"] == 0.0 for h in history)


def test_anneal_steps_at_epoch_boundaries(records32):
    _, history, _ = _fit(records32, epochs=4, lambda_kd="anneal:1-0")
    per_epoch = [history[i * 4]["lambda_kd"] for i in range(4)]
    expected = [lambda_kd((e + 1) / 4, ANNEAL_1) for e in range(4)]
    assert per_epoch == pytest.approx(expected, abs=1e-12)


def test_too_few_scenes_for_a_batch(records32):
    with pytest.raises(InvalidParameterError):
        _fit(records32[:4])


def test_divergence_is_reported(records32, tmp_path):
    torch.manual_seed(0)
    model = ScenarioModel(small_encoder_config(), Tokenizer(words_for(records32)))
    with torch.no_grad():
        model.vision_global.proj.weight.fill_(float("nan"))
    log = tmp_path / "m.jsonl"
    with pytest.raises(TrainingDivergedError) as info:
        fit_model(model, records32, TrainConfig(epochs=1, batch_size=8), metrics_log=log)
    assert info.value.step == 0
    assert json.loads(log.read_text().splitlines()[-1])["error"] == "non-finite loss"


def test_train_writes_checkpoints(small_dataset, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=8, base_lr=1e-3)
    result = train(cfg, small_dataset, tmp_path / "model.pt",
                   encoder_config=small_encoder_config())
    assert result.checkpoint.exists()
    assert [p.name for p in result.epoch_checkpoints] == ["model.epoch01.pt", "model.epoch02.pt"]
    lines = result.metrics_log.read_text().splitlines()
    assert len(lines) == len(result.history) == 2 * (32 // 8)
    again = train(cfg, small_dataset, tmp_path / "again.pt", encoder_config=small_encoder_config())
    assert result.checkpoint.read_bytes() == again.checkpoint.read_bytes()
