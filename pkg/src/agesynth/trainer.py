"""WGAN-GP training loop with young/old pair sampling.

A training "step" is one generator update. Before each one the critic is
updated ``warmup_critic_iters`` times while ``epoch < warmup_epochs`` and
``critic_iters`` times afterwards. Every random draw (pair indices,
interpolation weights) comes from a single numpy ``Generator`` whose state is
checkpointed, so a resumed run replays the uninterrupted one exactly.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import pickle
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .conditioning import Health, encode_age, encode_age_delta, encode_health
from .data.dataset import DatasetError, SliceDataset
from .losses import (
    AgeRange,
    LossWeights,
    critic_loss,
    generator_adversarial_loss,
    gradient_penalty,
    identity_loss,
    reconstruction_loss,
    total_generator_loss,
)
from .networks import ConfigError, Critic, Generator, NetworkConfig, init_discriminator, init_generator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "agesynth-checkpoint/1"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    critic_iters: int = 5
    warmup_epochs: int = 20
    warmup_critic_iters: int = 50
    learning_rate: float = 1e-4
    lr_decay: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = 16
    seed: int = 0
    young_old_threshold: float | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    age_range: AgeRange | None = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    steps_per_epoch: int | None = None
    max_steps: int | None = None
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.epochs <= 0:
            raise ConfigError("epochs must be > 0")
        if self.critic_iters < 1 or self.warmup_critic_iters < 1:
            raise ConfigError("critic iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.lr_decay < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigError("lr_decay, batch_size and warmup_epochs must be non-negative (batch_size >= 1)")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.descriptor()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if isinstance(d.get("age_range"), dict):
            d["age_range"] = AgeRange(**d["age_range"])
        if isinstance(d.get("network"), dict):
            d["network"] = NetworkConfig.from_descriptor(d["network"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def critic_updates_for_epoch(self, epoch: int) -> int:
        return self.warmup_critic_iters if epoch < self.warmup_epochs else self.critic_iters


@dataclass
class TrainingPair:
    x_i: np.ndarray
    y_o: np.ndarray
    a_i: float
    a_o: float
    h_i: Health
    h_o: Health
    subject_in: str
    subject_out: str

    @property
    def a_d(self) -> float:
        return self.a_o - self.a_i


@dataclass
class PairBatch:
    x_i: torch.Tensor
    y_o: torch.Tensor
    a_i: torch.Tensor
    a_o: torch.Tensor
    a_d_code: torch.Tensor
    a_o_code: torch.Tensor
    zero_code: torch.Tensor
    h_i_code: torch.Tensor
    h_o_code: torch.Tensor

    def __len__(self) -> int:
        return self.x_i.shape[0]


class PairSampler:
    """Draws (young x_i, old y_o) pairs at matching axial slice positions."""

    def __init__(self, dataset: SliceDataset, threshold: float | None = None) -> None:
        self.dataset = dataset
        years = np.floor(dataset.ages)
        self.threshold = float(np.median(years)) if threshold is None else float(threshold)
        self.young = np.flatnonzero(years < self.threshold)
        old = np.flatnonzero(years >= self.threshold)
        if len(self.young) == 0 or len(old) == 0:
            raise DatasetError(f"need subjects on both sides of the young/old threshold {self.threshold}")
        self.old_by_slice = {k: old[dataset.slice_index[old] == k] for k in np.unique(dataset.slice_index[old])}
        self.young = self.young[np.isin(dataset.slice_index[self.young], list(self.old_by_slice))]
        if len(self.young) == 0:
            raise DatasetError("no young slice has an old slice at the same axial position")

    def draw_indices(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        yi = self.young[rng.integers(0, len(self.young), size=n)]
        u = rng.random(size=n)
        oi = np.empty(n, dtype=np.int64)
        for j, k in enumerate(self.dataset.slice_index[yi]):
            pool = self.old_by_slice[k]
            oi[j] = pool[min(int(u[j] * len(pool)), len(pool) - 1)]
        return yi, oi


def sample_training_pair(dataset: SliceDataset, config: TrainConfig, rng: np.random.Generator,
                         sampler: PairSampler | None = None) -> TrainingPair:
    sampler = sampler or PairSampler(dataset, config.young_old_threshold)
    (i,), (o,) = sampler.draw_indices(rng, 1)
    ds = dataset
    return TrainingPair(ds.images[i], ds.images[o], float(np.floor(ds.ages[i])), float(np.floor(ds.ages[o])),
                        ds.health[i], ds.health[o], ds.subject_ids[i], ds.subject_ids[o])


def make_batch(dataset: SliceDataset, yi: np.ndarray, oi: np.ndarray, cfg: NetworkConfig) -> PairBatch:
    scheme = cfg.scheme
    a_i = np.floor(dataset.ages[yi])
    a_o = np.floor(dataset.ages[oi])

    def codes(fn, values):
        return torch.from_numpy(np.stack([fn(v) for v in values]))

    return PairBatch(
        x_i=torch.from_numpy(dataset.images[yi])[:, None],
        y_o=torch.from_numpy(dataset.images[oi])[:, None],
        a_i=torch.from_numpy(a_i),
        a_o=torch.from_numpy(a_o),
        a_d_code=codes(lambda p: encode_age_delta(p[0], p[1], scheme), zip(a_i, a_o)),
        a_o_code=codes(lambda a: encode_age(a, scheme), a_o),
        zero_code=codes(lambda a: encode_age(0, scheme), a_i),
        h_i_code=codes(encode_health, [dataset.health[i] for i in yi]),
        h_o_code=codes(encode_health, [dataset.health[i] for i in oi]),
    )


def lr_at(lr0: float, decay: float, iterations: int) -> float:
    """Inverse-time decay: lr0 / (1 + decay * iterations)."""
    return lr0 / (1.0 + decay * iterations)


class ModelState:
    """Both networks, their optimizers, counters and the sampling RNG."""

    def __init__(self, config: TrainConfig) -> None:
        self.config = config
        self.G: Generator = init_generator(config.network)
        self.D: Critic = init_discriminator(config.network)
        self.opt_G = torch.optim.Adam(self.G.parameters(), lr=config.learning_rate, betas=config.betas)
        self.opt_D = torch.optim.Adam(self.D.parameters(), lr=config.learning_rate, betas=config.betas)
        self.step = 0
        self.critic_updates = 0
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

    @property
    def descriptor(self) -> dict:
        return self.config.network.descriptor()

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "descriptor": self.descriptor,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "generator": self.G.state_dict(),
            "critic": self.D.state_dict(),
            "opt_generator": self.opt_G.state_dict(),
            "opt_critic": self.opt_D.state_dict(),
            "step": self.step,
            "critic_updates": self.critic_updates,
            "rng_state": self.rng.bit_generator.state,
        }

    def load_state_dict(self, ckpt: dict) -> None:
        if ckpt.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not an agesynth checkpoint (format {ckpt.get('format')!r})")
        if ckpt["descriptor"] != self.descriptor:
            raise ConfigError(f"checkpoint architecture {ckpt['descriptor']} does not match {self.descriptor}")
        self.G.load_state_dict(ckpt["generator"])
        self.D.load_state_dict(ckpt["critic"])
        self.opt_G.load_state_dict(ckpt["opt_generator"])
        self.opt_D.load_state_dict(ckpt["opt_critic"])
        self.step = int(ckpt["step"])
        self.critic_updates = int(ckpt["critic_updates"])
        self.rng.bit_generator.state = ckpt["rng_state"]


def save_checkpoint(state: ModelState, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state.state_dict(), tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, config: TrainConfig | None = None) -> ModelState:
    """Restore a ModelState. With ``config``, its architecture must match the archive."""
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not an agesynth checkpoint")
    if config is None:
        config = TrainConfig.from_dict(ckpt["config"])
    state = ModelState(config)
    state.load_state_dict(ckpt)
    return state


def _check_finite(values: dict, state: ModelState, where: str) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        diag = {
            "where": where,
            "step": state.step,
            "critic_updates": state.critic_updates,
            "losses": values,
            "nonfinite_generator_params": [n for n, p in state.G.named_parameters() if not torch.isfinite(p).all()],
            "nonfinite_critic_params": [n for n, p in state.D.named_parameters() if not torch.isfinite(p).all()],
        }
        raise TrainingDiverged(f"non-finite {sorted(bad)} in {where} at step {state.step}", diag)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def critic_step(state: ModelState, batch: PairBatch, weights: LossWeights | None = None) -> dict:
    """One critic update; the generator is only evaluated, never changed."""
    cfg = state.config
    weights = weights or cfg.loss_weights
    with torch.no_grad():
        fake = state.G(batch.x_i, batch.a_d_code, batch.h_o_code)
    w_real = state.D(batch.y_o, batch.a_o_code, batch.h_o_code)
    w_fake = state.D(fake, batch.a_o_code, batch.h_o_code)
    eps = torch.from_numpy(state.rng.random(len(batch))).to(fake.dtype)
    gp = gradient_penalty(state.D, fake, batch.y_o, batch.a_o_code, batch.h_o_code, eps)
    lr = lr_at(cfg.learning_rate, cfg.lr_decay, state.critic_updates)
    w_dist = w_real.mean() - w_fake.mean()
    values = {"d_loss": (-w_dist + weights.lambda_gp * gp).item(), "gp": gp.item(), "w_dist": w_dist.item()}
    _check_finite(values, state, "critic_step")
    loss = critic_loss(w_real, w_fake, gp, weights)
    _set_lr(state.opt_D, lr)
    state.opt_D.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_D.step()
    state.critic_updates += 1
    values["lr_d"] = lr
    return values


def generator_step(state: ModelState, batch: PairBatch, weights: LossWeights | None = None,
                   age_range: AgeRange | None = None) -> dict:
    """One generator update on the weighted adversarial + identity + reconstruction loss."""
    cfg = state.config
    weights = weights or cfg.loss_weights
    age_range = age_range or cfg.age_range
    if age_range is None:
        raise ConfigError("generator_step needs an age range")
    state.D.requires_grad_(False)
    try:
        fake = state.G(batch.x_i, batch.a_d_code, batch.h_o_code)
        l_gan = generator_adversarial_loss(state.D(fake, batch.a_o_code, batch.h_o_code))
        l_id = identity_loss(batch.x_i, fake, batch.a_i, batch.a_o, age_range)
        same = state.G(batch.x_i, batch.zero_code, batch.h_i_code)
        l_rec = reconstruction_loss(batch.x_i, same)
        total = total_generator_loss(l_gan, l_id, l_rec, weights)
        lr = lr_at(cfg.learning_rate, cfg.lr_decay, state.step)
        values = {"g_loss": total.item(), "g_gan": l_gan.item(), "g_id": l_id.item(), "g_rec": l_rec.item()}
        _check_finite(values, state, "generator_step")
        _set_lr(state.opt_G, lr)
        state.opt_G.zero_grad(set_to_none=True)
        total.backward()
        state.opt_G.step()
    finally:
        state.D.requires_grad_(True)
    state.step += 1
    values["lr_g"] = lr
    return values


@dataclass
class TrainResult:
    state: ModelState
    log: list[dict]


def resolve_config(config: TrainConfig, dataset: SliceDataset) -> TrainConfig:
    """Fill data-dependent defaults (age range, threshold, epoch length)."""
    years = np.floor(dataset.ages)
    updates = {}
    if config.age_range is None:
        updates["age_range"] = AgeRange(float(years.min()), float(years.max()))
    if config.young_old_threshold is None:
        updates["young_old_threshold"] = float(np.median(years))
    if config.steps_per_epoch is None:
        n_young = int((years < updates.get("young_old_threshold", config.young_old_threshold)).sum())
        updates["steps_per_epoch"] = max(1, math.ceil(n_young / config.batch_size))
    return replace(config, **updates) if updates else config


def total_steps(config: TrainConfig) -> int:
    n = config.epochs * config.steps_per_epoch
    return n if config.max_steps is None else min(n, config.max_steps)


def train(
    config: TrainConfig,
    dataset: SliceDataset,
    *,
    out_dir: str | os.PathLike | None = None,
    resume: ModelState | str | os.PathLike | None = None,
    stop_after: int | None = None,
) -> TrainResult:
    """Run (or continue) training until ``total_steps`` generator updates.

    ``stop_after`` halts early after that many generator updates in total,
    leaving a state that can be resumed. The returned log holds one record
    per generator step; with ``out_dir`` the records also go to
    ``train_log.jsonl`` and checkpoints to ``checkpoints/``.
    """
    config = resolve_config(config, dataset)
    if isinstance(resume, ModelState):
        state = resume
    elif resume is not None:
        state = load_checkpoint(resume, config)
    else:
        state = ModelState(config)
    if state.descriptor != config.network.descriptor():
        raise ConfigError("resumed state architecture differs from the configuration")
    state.config = config
    sampler = PairSampler(dataset, config.young_old_threshold)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if state.step else "w")
    end = total_steps(config)
    if stop_after is not None:
        end = min(end, stop_after)
    records: list[dict] = []
    try:
        while state.step < end:
            epoch = state.step // config.steps_per_epoch
            n_critic = config.critic_updates_for_epoch(epoch)
            d_logs = []
            for _ in range(n_critic):
                yi, oi = sampler.draw_indices(state.rng, config.batch_size)
                d_logs.append(critic_step(state, make_batch(dataset, yi, oi, config.network)))
            yi, oi = sampler.draw_indices(state.rng, config.batch_size)
            g_log = generator_step(state, make_batch(dataset, yi, oi, config.network))
            rec = {
                "step": state.step,
                "epoch": epoch,
                "critic_iters": n_critic,
                "critic_updates": state.critic_updates,
                **{k: float(np.mean([d[k] for d in d_logs])) for k in ("d_loss", "gp", "w_dist")},
                "lr_d": d_logs[-1]["lr_d"],
                **g_log,
            }
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, out / "checkpoints" / f"step_{state.step:07d}.pt")
            if state.step % 100 == 0:
                log.info("step %d epoch %d d_loss %.4f g_loss %.4f rec %.4f",
                         state.step, epoch, rec["d_loss"], rec["g_loss"], rec["g_rec"])
    except TrainingDiverged as exc:
        if out is not None:
            (out / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=2))
        raise
    finally:
        if log_fh is not None:
            log_fh.close()
    if out is not None:
        save_checkpoint(state, out / "final.pt")
        (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2))
    return TrainResult(state, records)
