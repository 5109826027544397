import json
import math

import numpy as np
import pytest
import torch

from conftest import tiny_config
from segssl.pretrain import (CheckpointError, NumericalAbort, collapse_diagnostics, epoch_batches, init_state,
                             load_checkpoint, param_groups, pretrain, read_archive, save_checkpoint, train_step,
                             write_archive)
from segssl.schedules import CosineSchedule, ScheduleSet
from segssl.views import ViewPair


def flat(module):
    return torch.cat([t.detach().flatten().double() for t in module.state_dict().values()])


def fixed_pairs(rng, n=4, frames=60, bins=16):
    return [ViewPair(rng.random((frames, bins), dtype=np.float32), rng.random((frames, bins), dtype=np.float32), 0.6)
            for _ in range(n)]


# ---------------------------------------------------------------- schedules

def test_ema_schedule_endpoints_and_midpoint():
    ema = CosineSchedule(0.99, 1.0, 100)
    assert ema(0) == 0.99
    assert ema(100) == 1.0
    assert ema(50) == pytest.approx(0.995, abs=1e-12)


def test_lr_schedule_warmup_and_end():
    lr = CosineSchedule(5e-4, 1e-6, 100, warmup_steps=10)
    assert lr(0) == 0.0
    assert lr(5) == pytest.approx(2.5e-4)
    assert lr(10) == 5e-4
    assert lr(100) == 1e-6
    values = [lr(s) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_weight_decay_schedule_rises():
    sched = ScheduleSet.build(200, 20, 1e-3)
    assert sched.at(0)["wd"] == 0.04
    assert sched.at(200)["wd"] == 0.4
    wd = [sched.at(s)["wd"] for s in range(201)]
    assert all(a <= b for a, b in zip(wd, wd[1:]))
    m = [sched.at(s)["m"] for s in range(201)]
    assert all(a <= b for a, b in zip(m, m[1:]))


def test_schedule_matches_closed_form():
    s = CosineSchedule(2.0, 0.5, 40, warmup_steps=8)
    for step in range(8, 41):
        tau = (step - 8) / 32
        assert s(step) == pytest.approx(0.5 + 1.5 * (1 + math.cos(math.pi * tau)) / 2, abs=1e-12)


def test_schedule_out_of_range():
    with pytest.raises(ValueError):
        CosineSchedule(1.0, 0.0, 10)(11)
    with pytest.raises(ValueError):
        CosineSchedule(1.0, 0.0, 10, warmup_steps=11)


# ---------------------------------------------------------------- optimizer setup

def test_weight_decay_exclusions(tiny_cfg):
    state = init_state(tiny_cfg, 8)
    groups = param_groups(state.student)
    named = {id(p): n for n, p in state.student.named_parameters()}
    no_decay = {named[id(p)] for p in groups[1]["params"]}
    decay = {named[id(p)] for p in groups[0]["params"]}
    assert "encoder.cls_token" in no_decay and "encoder.pos_embed" in no_decay
    assert all(n.endswith(("bias", "norm1.weight", "norm2.weight", "bn.weight")) or "token" in n or "pos" in n
               for n in no_decay)
    assert all(n.endswith("weight") for n in decay)
    assert len(no_decay) + len(decay) == sum(1 for _ in state.student.parameters())


def test_teacher_not_in_optimizer(tiny_cfg):
    state = init_state(tiny_cfg, 8)
    opt_ids = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    assert not opt_ids & {id(p) for p in state.teacher.parameters()}


def test_warmup_capped_at_run_length():
    cfg = tiny_config(schedules={"warmup_epochs": 10}, data={"epochs": 2})
    state = init_state(cfg, 8)
    assert state.schedules.lr.warmup_steps == state.total_steps == 4


# ---------------------------------------------------------------- training steps

def test_zero_lr_leaves_student_unchanged(rng):
    cfg = tiny_config(schedules={"peak_lr": 0.0, "min_lr": 0.0, "ema_override": 1.0})
    state = init_state(cfg, 8)
    s0 = flat(state.student.encoder)
    t0 = [p.detach().clone() for p in state.teacher.parameters()]
    pairs = fixed_pairs(rng)
    for _ in range(3):
        train_step(state, pairs)
    assert torch.equal(flat(state.student.encoder), s0)
    assert all(torch.equal(a, b) for a, b in zip(state.teacher.parameters(), t0))


def test_zero_momentum_copies_student(rng):
    cfg = tiny_config(schedules={"ema_override": 0.0})
    state = init_state(cfg, 8)
    train_step(state, fixed_pairs(rng))
    assert torch.equal(flat(state.teacher.encoder), flat(state.student.encoder))
    assert torch.equal(flat(state.teacher.projector), flat(state.student.projector))


def test_loss_decreases_on_fixed_batch(rng):
    cfg = tiny_config(data={"epochs": 200, "batch_size": 4}, schedules={"warmup_epochs": 10})
    state = init_state(cfg, 4)
    pairs = fixed_pairs(rng)
    losses = [train_step(state, pairs)[0] for _ in range(200)]
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_nonfinite_loss_aborts_with_dump(rng):
    state = init_state(tiny_config(), 8)
    pairs = fixed_pairs(rng)
    pairs[0].x[0, 0] = np.nan
    with pytest.raises(NumericalAbort) as err:
        train_step(state, pairs)
    assert err.value.dump["step"] == 0 and "param_norms" in err.value.dump


def test_batch_of_one_rejected(rng):
    with pytest.raises(ValueError):
        train_step(init_state(tiny_config(), 8), fixed_pairs(rng, n=1))


def test_epoch_batches_regenerate(tiny_specs):
    state = init_state(tiny_config(), len(tiny_specs))
    first = list(epoch_batches(state, tiny_specs, 1))
    state.bank.load_state([])
    again = list(epoch_batches(state, tiny_specs, 1))
    assert [b for b, _ in first] == [0, 1]
    for (_, p), (_, q) in zip(first, again):
        assert all(np.array_equal(a.x_prime, b.x_prime) for a, b in zip(p, q))


# ---------------------------------------------------------------- collapse diagnostics

def test_collapse_diagnostics_identical_inputs(tiny_cfg):
    state = init_state(tiny_cfg, 8)
    probe = torch.rand(1, 60, 16).expand(6, 60, 16).clone()
    rep = collapse_diagnostics(state.teacher, probe)
    assert rep.cosine_mean == pytest.approx(1.0, abs=1e-5)
    assert rep.embed_std == pytest.approx(0.0, abs=1e-5)


def test_collapse_diagnostics_brute_force(tiny_cfg):
    state = init_state(tiny_cfg, 8)
    probe = torch.randn(8, 60, 16) * torch.linspace(0.1, 3, 8)[:, None, None]
    rep = collapse_diagnostics(state.teacher, probe)
    state.teacher.eval()
    with torch.no_grad():
        h = state.teacher.encoder(probe).tokens[:, 0].double().numpy()
        z = state.teacher(probe).double().numpy()
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    pairs = [z[i] @ z[j] for i in range(8) for j in range(8) if i != j]
    assert rep.cosine_mean == pytest.approx(np.mean(pairs), abs=1e-5)
    np.testing.assert_allclose(rep.per_dim_std, h.std(axis=0), atol=1e-6)
    assert rep.per_dim_std.shape == (tiny_cfg.encoder.dim,)


# ---------------------------------------------------------------- full loop and checkpoints

def test_pretrain_deterministic(tiny_specs):
    cfg = tiny_config()
    _, a = pretrain(cfg, tiny_specs)
    _, b = pretrain(cfg, tiny_specs)
    assert a == b and len(a) == 6


def test_pretrain_writes_metrics_and_checkpoint(tmp_path, tiny_specs):
    state, losses = pretrain(tiny_config(), tiny_specs, tmp_path)
    lines = [json.loads(x) for x in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["loss"] for r in lines] == losses
    assert {"step", "lr", "wd", "m", "cosine_mean", "embed_std"} <= set(lines[0])
    assert lines[1]["cosine_mean"] is not None  # end of the first epoch
    manifest, _ = read_archive(tmp_path / "checkpoint.bin")
    assert manifest["step"] == 6 and manifest["config_hash"] == state.cfg.digest()


def test_checkpoint_round_trip(tmp_path, tiny_specs):
    cfg = tiny_config()
    state, _ = pretrain(cfg, tiny_specs, max_steps=3)
    save_checkpoint(state, tmp_path / "ck.bin")
    back = load_checkpoint(tmp_path / "ck.bin", cfg)
    assert back.step == 3
    for a, b in ((state.student, back.student), (state.teacher, back.teacher)):
        for (n, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(x, y), n
    assert all(np.array_equal(x, y) for x, y in zip(state.bank.state(), back.bank.state()))


def test_resume_matches_uninterrupted(tmp_path, tiny_specs):
    cfg = tiny_config(data={"epochs": 5})
    full, full_losses = pretrain(cfg, tiny_specs)
    part, first = pretrain(cfg, tiny_specs, tmp_path, max_steps=5)
    resumed = load_checkpoint(tmp_path / "checkpoint.bin", cfg)
    resumed, rest = pretrain(cfg, tiny_specs, state=resumed)
    assert first + rest == full_losses
    assert torch.equal(flat(resumed.student), flat(full.student))
    assert torch.equal(flat(resumed.teacher), flat(full.teacher))


def test_corrupted_archive_rejected(tmp_path, tiny_specs):
    state, _ = pretrain(tiny_config(), tiny_specs, max_steps=1)
    path = tmp_path / "ck.bin"
    save_checkpoint(state, path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch_rejected(tmp_path, tiny_specs):
    state, _ = pretrain(tiny_config(), tiny_specs, max_steps=1)
    save_checkpoint(state, tmp_path / "ck.bin")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck.bin", tiny_config(data={"seed": 8}))


def test_archive_round_trip_dtypes(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, -2], dtype=np.int64),
               "c": np.zeros((0, 4)), "d": np.array(True)}
    write_archive(tmp_path / "x.bin", {"k": 1}, tensors)
    manifest, back = read_archive(tmp_path / "x.bin")
    assert manifest == {"k": 1}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)
