"""Conditioned generator and Wasserstein critic for 208x160 slices.

Generator: encoder (4 stride-2 conv stages) -> v1; [v1, h_o] -> dense -> v2;
[v2, a_d] -> dense -> 13x10 map -> decoder mirror with long skips from every
encoder stage above the bottleneck (and the input image) -> tanh.

Critic: same encoder and conditioning scheme on the absolute target age a_o,
a dense judge producing one unbounded score, plus one long skip carrying
pooled first-stage features straight to the judge.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import HEALTH_CODE_LEN, EncodingKind, EncodingScheme

IMAGE_SHAPE = (208, 160)
N_STAGES = 4
BOTTLENECK_SHAPE = (IMAGE_SHAPE[0] >> N_STAGES, IMAGE_SHAPE[1] >> N_STAGES)
V1_SIZE = 128
SUPPORTED_V2 = (65, 130, 260)
IMAGE_EPS = 1e-6


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class Embedding(str, enum.Enum):
    TRANSFORMER = "transformer"
    CONCAT_ALL = "concat_all"


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture descriptor shared by both networks.

    ``widths`` are the encoder channel counts per stage; the decoder mirrors
    them. The descriptor is stored in every checkpoint and compared on load.
    """

    widths: tuple[int, ...] = (16, 32, 64, 128)
    v1_size: int = V1_SIZE
    v2_size: int = 130
    encoding: str = EncodingKind.ORDINAL.value
    age_groups: int = 10
    embedding: str = Embedding.TRANSFORMER.value
    judge_hidden: int = 64
    bottleneck_dense_layers: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != N_STAGES or min(self.widths) < 1:
            raise ConfigError(f"widths must list {N_STAGES} positive channel counts, got {self.widths}")
        if self.v2_size not in SUPPORTED_V2:
            raise ConfigError(f"unsupported v2 size {self.v2_size}; choose from {SUPPORTED_V2}")
        try:
            EncodingKind(self.encoding)
            Embedding(self.embedding)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.bottleneck_dense_layers != 1:
            raise ConfigError("only one dense layer after the age concatenation is implemented")
        self.scheme  # validates age_groups

    @property
    def scheme(self) -> EncodingScheme:
        try:
            return EncodingScheme(EncodingKind(self.encoding), self.age_groups)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def age_length(self) -> int:
        return self.scheme.age_length

    def descriptor(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_descriptor(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "widths": tuple(d["widths"])})


def _act(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, 0.2)


class ConvEncoder(nn.Module):
    """Four stride-2 stages, 208x160 -> 13x10, then a projection to v1."""

    def __init__(self, widths: tuple[int, ...], v1_size: int) -> None:
        super().__init__()
        chans = (1, *widths)
        self.stages = nn.ModuleList(
            nn.Conv2d(cin, cout, kernel_size=4, stride=2, padding=1) for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.project = nn.Linear(widths[-1] * BOTTLENECK_SHAPE[0] * BOTTLENECK_SHAPE[1], v1_size)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        for stage in self.stages:
            x = _act(stage(x))
            feats.append(x)
        return self.project(x.flatten(1)), feats


class Generator(nn.Module):
    def __init__(self, cfg: NetworkConfig) -> None:
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.encoder = ConvEncoder(w, cfg.v1_size)
        if cfg.embedding == Embedding.TRANSFORMER.value:
            self.health_dense = nn.Linear(cfg.v1_size + HEALTH_CODE_LEN, cfg.v2_size)
            z_size = cfg.v2_size + cfg.age_length
        else:
            self.health_dense = None
            z_size = cfg.v1_size + HEALTH_CODE_LEN + cfg.age_length
        self.expand = nn.Linear(z_size, w[-1] * BOTTLENECK_SHAPE[0] * BOTTLENECK_SHAPE[1])
        # The deepest stage already feeds v1, so the first decoder stage sees the
        # bottleneck alone; stage k > 0 also consumes encoder stage N-1-k.
        outs = (*reversed(w[:-1]), w[0])
        ins = [w[-1]] + list(outs[:-1])
        skip_ch = [0, *reversed(w[:-1])]
        self.decoder = nn.ModuleList(
            nn.ConvTranspose2d(cin + skip, cout, kernel_size=4, stride=2, padding=1)
            for cin, skip, cout in zip(ins, skip_ch, outs)
        )
        self.head = nn.Conv2d(w[0] + 1, 1, kernel_size=3, padding=1)

    def forward(
        self, x: torch.Tensor, a_d: torch.Tensor, h_o: torch.Tensor, *, use_skips: bool = True
    ) -> torch.Tensor:
        v1, feats = self.encoder(x)
        if self.health_dense is not None:
            v2 = _act(self.health_dense(torch.cat([v1, h_o], dim=1)))
            z = torch.cat([v2, a_d], dim=1)
        else:
            z = torch.cat([v1, h_o, a_d], dim=1)
        y = _act(self.expand(z)).view(-1, self.cfg.widths[-1], *BOTTLENECK_SHAPE)
        skips = [*reversed(feats[:-1]), x]
        if not use_skips:
            skips = [torch.zeros_like(s) for s in skips]
        y = _act(self.decoder[0](y))
        for stage, skip in zip(self.decoder[1:], skips):
            y = _act(stage(torch.cat([y, skip], dim=1)))
        return torch.tanh(self.head(torch.cat([y, skips[-1]], dim=1)))


class Critic(nn.Module):
    def __init__(self, cfg: NetworkConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = ConvEncoder(cfg.widths, cfg.v1_size)
        if cfg.embedding == Embedding.TRANSFORMER.value:
            self.health_dense = nn.Linear(cfg.v1_size + HEALTH_CODE_LEN, cfg.v2_size)
            z_size = cfg.v2_size + cfg.age_length
        else:
            self.health_dense = None
            z_size = cfg.v1_size + HEALTH_CODE_LEN + cfg.age_length
        self.judge = nn.Sequential(
            nn.Linear(z_size + cfg.widths[0], cfg.judge_hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(cfg.judge_hidden, 1),
        )

    def forward(self, x: torch.Tensor, a_o: torch.Tensor, h_o: torch.Tensor) -> torch.Tensor:
        v1, feats = self.encoder(x)
        if self.health_dense is not None:
            z = torch.cat([_act(self.health_dense(torch.cat([v1, h_o], dim=1))), a_o], dim=1)
        else:
            z = torch.cat([v1, h_o, a_o], dim=1)
        skip = feats[0].mean(dim=(2, 3))
        return self.judge(torch.cat([z, skip], dim=1)).squeeze(1)


def _seeded_build(cls, cfg: NetworkConfig, salt: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed * 2 + salt)
        return cls(cfg)


def init_generator(cfg: NetworkConfig) -> Generator:
    return _seeded_build(Generator, cfg, 0)


def init_discriminator(cfg: NetworkConfig) -> Critic:
    return _seeded_build(Critic, cfg, 1)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def parameter_checksum(net: nn.Module) -> str:
    """Hash of every parameter's bytes; equal iff parameters are bitwise equal."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def check_slice(x, name: str = "image") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.shape != IMAGE_SHAPE:
        raise ShapeError(f"{name} must have shape {IMAGE_SHAPE}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} has non-finite pixels")
    if arr.min() < -1 - IMAGE_EPS or arr.max() > 1 + IMAGE_EPS:
        raise ValueError(f"{name} intensities outside [-1, 1]")
    return arr


def _check_code(code, length: int, name: str) -> np.ndarray:
    arr = np.asarray(code, dtype=np.float32)
    if arr.shape != (length,):
        raise ShapeError(f"{name} must have shape ({length},), got {arr.shape}")
    return arr


@torch.no_grad()
def generator_forward(G: Generator, x_i, a_d, h_o) -> np.ndarray:
    """Synthesize one slice. Inputs are validated numpy-like arrays."""
    x = torch.from_numpy(check_slice(x_i, "x_i"))[None, None]
    a = torch.from_numpy(_check_code(a_d, G.cfg.age_length, "a_d"))[None]
    h = torch.from_numpy(_check_code(h_o, HEALTH_CODE_LEN, "h_o"))[None]
    return G(x, a, h)[0, 0].numpy()


@torch.no_grad()
def discriminator_forward(D: Critic, x, a_o, h_o) -> float:
    t = torch.from_numpy(check_slice(x))[None, None]
    a = torch.from_numpy(_check_code(a_o, D.cfg.age_length, "a_o"))[None]
    h = torch.from_numpy(_check_code(h_o, HEALTH_CODE_LEN, "h_o"))[None]
    return float(D(t, a, h)[0])

