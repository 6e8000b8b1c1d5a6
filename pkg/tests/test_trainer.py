import json

import numpy as np
import pytest
import torch

from agesynth.conditioning import Health
from agesynth.data import PhantomSpec, SliceDataset, generate_phantom_dataset
from agesynth.data.dataset import DatasetError
from agesynth.losses import AgeRange
from agesynth.networks import ConfigError, NetworkConfig, parameter_checksum
from agesynth.trainer import (
    ModelState,
    PairSampler,
    TrainConfig,
    TrainingDiverged,
    critic_step,
    generator_step,
    load_checkpoint,
    lr_at,
    make_batch,
    resolve_config,
    sample_training_pair,
    save_checkpoint,
    train,
)

TINY = NetworkConfig(widths=(2, 2, 2, 4))


@pytest.fixture(scope="module")
def dataset():
    return SliceDataset.from_phantoms(generate_phantom_dataset(PhantomSpec(), 20, 11), split=None)


def _cfg(**kw):
    base = dict(network=TINY, batch_size=2, warmup_epochs=1, warmup_critic_iters=3, critic_iters=2,
                steps_per_epoch=2, max_steps=6, learning_rate=1e-3)
    return TrainConfig(**{**base, **kw})


def test_paper_defaults():
    c = TrainConfig()
    assert (c.learning_rate, c.betas, c.critic_iters, c.warmup_epochs, c.warmup_critic_iters) == (1e-4, (0.5, 0.999), 5, 20, 50)
    assert [c.critic_updates_for_epoch(e) for e in (0, 19, 20, 300)] == [50, 50, 5, 5]


def test_lr_decay():
    assert lr_at(1e-4, 1e-4, 0) == 1e-4
    assert lr_at(1e-4, 1e-4, 10_000) == pytest.approx(5e-5)


def test_config_round_trip():
    c = _cfg(age_range=AgeRange(20, 90))
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


def test_pairs_are_young_to_old(dataset):
    sampler = PairSampler(dataset)
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = sample_training_pair(dataset, _cfg(), rng, sampler)
        assert p.a_i < sampler.threshold <= p.a_o and p.a_d > 0
    with pytest.raises(DatasetError):
        PairSampler(dataset.subset(np.flatnonzero(dataset.ages == dataset.ages.max())))


def test_batch_codes(dataset):
    sampler = PairSampler(dataset)
    yi, oi = sampler.draw_indices(np.random.default_rng(1), 4)
    b = make_batch(dataset, yi, oi, TINY)
    assert b.x_i.shape == (4, 1, 208, 160) and b.a_d_code.shape == (4, 100)
    assert torch.equal(b.a_d_code.sum(1).double(), b.a_o - b.a_i)
    assert torch.equal(b.a_o_code.sum(1).double(), b.a_o)
    assert b.zero_code.sum() == 0


def test_update_isolation(dataset):
    cfg = resolve_config(_cfg(), dataset)
    state = ModelState(cfg)
    sampler = PairSampler(dataset)
    batch = make_batch(dataset, *sampler.draw_indices(state.rng, 2), TINY)
    g0, d0 = parameter_checksum(state.G), parameter_checksum(state.D)
    critic_step(state, batch)
    g1, d1 = parameter_checksum(state.G), parameter_checksum(state.D)
    assert g1 == g0 and d1 != d0
    generator_step(state, batch)
    assert parameter_checksum(state.D) == d1 and parameter_checksum(state.G) != g1
    assert all(p.requires_grad for p in state.D.parameters())


def test_schedule_from_log(dataset, tmp_path):
    res = train(_cfg(), dataset, out_dir=tmp_path)
    rows = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["critic_iters"] for r in rows] == [3, 3, 2, 2, 2, 2]
    assert [r["epoch"] for r in rows] == [0, 0, 1, 1, 2, 2]
    assert rows[-1]["critic_updates"] == res.state.critic_updates == 14
    assert (tmp_path / "final.pt").exists() and (tmp_path / "train_config.json").exists()


def test_resume_matches_uninterrupted(dataset, tmp_path):
    cfg = _cfg(max_steps=8, checkpoint_every=4)
    full = train(cfg, dataset, out_dir=tmp_path / "full")
    train(cfg, dataset, out_dir=tmp_path / "part", stop_after=4)
    resumed = train(cfg, dataset, out_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoints" / "step_0000004.pt")
    for a, b in zip(full.state.G.parameters(), resumed.state.G.parameters()):
        assert torch.allclose(a, b, atol=1e-6, rtol=0)
    logs = [(tmp_path / d / "train_log.jsonl").read_text().splitlines() for d in ("full", "part")]
    assert len(logs[1]) == 8
    for x, y in zip(logs[0], logs[1]):
        x, y = json.loads(x), json.loads(y)
        assert x["step"] == y["step"] and x["g_loss"] == pytest.approx(y["g_loss"], abs=1e-6)


def test_training_is_deterministic(dataset):
    a = train(_cfg(max_steps=3), dataset)
    b = train(_cfg(max_steps=3), dataset)
    assert parameter_checksum(a.state.G) == parameter_checksum(b.state.G)
    assert [r["d_loss"] for r in a.log] == [r["d_loss"] for r in b.log]


def test_checkpoint_descriptor_mismatch(dataset, tmp_path):
    cfg = resolve_config(_cfg(), dataset)
    path = save_checkpoint(ModelState(cfg), tmp_path / "c.pt")
    assert load_checkpoint(path).step == 0
    other = TrainConfig(network=NetworkConfig(widths=(2, 2, 2, 8)))
    with pytest.raises(ConfigError):
        load_checkpoint(path, other)
    (tmp_path / "junk.pt").write_bytes(b"junk")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "junk.pt")


def test_divergence_reports_diagnostics(dataset, tmp_path):
    cfg = resolve_config(_cfg(), dataset)
    state = ModelState(cfg)
    with torch.no_grad():
        next(state.D.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, dataset, out_dir=tmp_path, resume=state)
    assert info.value.diagnostics["where"] == "critic_step"
    assert info.value.diagnostics["nonfinite_critic_params"]
    assert (tmp_path / "diverged.json").exists()


def test_critic_descends_on_fixed_batch(dataset):
    cfg = resolve_config(_cfg(learning_rate=1e-3), dataset)
    state = ModelState(cfg)
    batch = make_batch(dataset, *PairSampler(dataset).draw_indices(state.rng, 4), TINY)
    losses = [critic_step(state, batch) for _ in range(50)]
    assert all(l["gp"] >= 0 for l in losses)
    assert np.mean([l["d_loss"] for l in losses[-5:]]) < np.mean([l["d_loss"] for l in losses[:5]])


def test_generator_log_accounting(dataset):
    cfg = resolve_config(_cfg(), dataset)
    state = ModelState(cfg)
    batch = make_batch(dataset, *PairSampler(dataset).draw_indices(state.rng, 2), TINY)
    log = generator_step(state, batch)
    w = cfg.loss_weights
    total = w.lambda_gan * log["g_gan"] + w.lambda_id * log["g_id"] + w.lambda_rec * log["g_rec"]
    assert log["g_loss"] == pytest.approx(total, rel=1e-6)
