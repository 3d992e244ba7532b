"""STDAT encoder and the two-tower BehaveFormer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Dropout, LayerNorm, Linear, Module, Parameter, Tensor

PDF_GUARD = 1e-12


class ModelConfigError(ValueError):
    pass


@dataclass
class StdatConfig:
    seq_len: int
    channels: int
    blocks: int = 5
    temporal_heads: int = 5
    channel_heads: int = 10
    gaussians: int = 20
    hidden: int = 256
    embedding: int = 64
    dropout: float = 0.1
    kernels: tuple[int, ...] = (1, 3, 5)

    def __post_init__(self):
        self.kernels = tuple(self.kernels)
        if self.blocks < 1:
            raise ModelConfigError("at least one dual attention block is required")
        if self.channels % self.temporal_heads:
            raise ModelConfigError(f"temporal heads {self.temporal_heads} must divide channels {self.channels}")
        if self.seq_len % self.channel_heads:
            raise ModelConfigError(f"channel heads {self.channel_heads} must divide sequence length {self.seq_len}")


@dataclass
class BehaveFormerConfig:
    keystroke: StdatConfig
    imu: StdatConfig | None = None
    fusion_dim: int = 64
    seed: int = 0
    imu_sensors: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["imu_sensors"] = list(self.imu_sensors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BehaveFormerConfig":
        imu = StdatConfig(**d["imu"]) if d.get("imu") else None
        return cls(StdatConfig(**d["keystroke"]), imu, d.get("fusion_dim", 64), d.get("seed", 0),
                   tuple(d.get("imu_sensors", ())))


# Per-dataset settings: block counts and head counts per tower.
PRESETS = {
    "aalto": dict(keystroke=dict(blocks=6, temporal_heads=5, channel_heads=10)),
    "hmog": dict(keystroke=dict(blocks=5, temporal_heads=5, channel_heads=10),
                 imu=dict(blocks=5, temporal_heads=6, channel_heads=10)),
    "humidb": dict(keystroke=dict(blocks=5, temporal_heads=3, channel_heads=10),
                   imu=dict(blocks=5, temporal_heads=6, channel_heads=10)),
}


def preset_config(dataset: str, window: int = 50, imu_channels: int | None = 36, seed: int = 0) -> BehaveFormerConfig:
    p = PRESETS[dataset]
    channels = 3 if dataset == "humidb" else 10
    key = StdatConfig(seq_len=window, channels=channels, **p["keystroke"])
    imu = None
    if "imu" in p and imu_channels:
        imu = StdatConfig(seq_len=100, channels=imu_channels, **p["imu"])
    return BehaveFormerConfig(key, imu, seed=seed)


class GaussianRangeEncoder(Module):
    """Learnable positional encoding: per-position mixture weights over K Gaussians times range embeddings."""

    def __init__(self, seq_len: int, channels: int, k: int, rng: np.random.Generator):
        super().__init__()
        if k < 1:
            raise ModelConfigError("GRE needs at least one Gaussian")
        self.seq_len = seq_len
        self.means = Parameter(np.arange(k) * seq_len / k)
        self.log_std = Parameter(np.full(k, math.log(seq_len / k)))
        self.ranges = Parameter(rng.uniform(-0.1, 0.1, size=(k, channels)))

    def weights(self, n: int | None = None) -> Tensor:
        """Row-normalised pdf matrix (n x K)."""
        n = self.seq_len if n is None else n
        pos = Tensor(np.arange(n, dtype=np.float64).reshape(n, 1))
        std = nx.exp(self.log_std)
        z = nx.div(nx.sub(pos, self.means), std)
        pdf = nx.div(nx.exp(nx.scale(nx.square(z), -0.5)), nx.scale(std, math.sqrt(2 * math.pi)))
        pdf = nx.add(pdf, PDF_GUARD)
        return nx.div(pdf, nx.sum_(pdf, axis=1, keepdims=True))

    def forward(self, n: int | None = None) -> Tensor:
        return nx.matmul(self.weights(n), self.ranges)


class MultiHeadSelfAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if d_model % heads:
            raise ModelConfigError(f"{heads} heads do not divide model width {d_model}")
        self.heads = heads
        self.d_model = d_model
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, L, _ = x.shape
        x = nx.reshape(x, (*lead, L, self.heads, self.d_model // self.heads))
        nd = x.ndim
        return nx.permute(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_model:
            raise nx.ShapeError(f"attention: input width {x.shape[-1]} != model width {self.d_model}")
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(self.d_model // self.heads))
        attn = nx.softmax(scores, axis=-1)
        self.last_attention = attn.data
        ctx = nx.matmul(attn, v)
        nd = ctx.ndim
        ctx = nx.permute(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
        ctx = nx.reshape(ctx, x.shape)
        return self.out(ctx)


class ConvBranch(Module):
    """conv -> batch norm -> dropout -> ReLU on the single-channel N x M map."""

    def __init__(self, size: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.conv = nx.Conv2d(size, rng)
        self.norm = nx.BatchNorm()
        self.drop = Dropout(dropout, rng)

    def forward(self, x: Tensor) -> Tensor:
        return nx.relu(self.drop(self.norm(self.conv(x))))


class DualAttentionBlock(Module):
    def __init__(self, cfg: StdatConfig, rng: np.random.Generator):
        super().__init__()
        self.temporal = MultiHeadSelfAttention(cfg.channels, cfg.temporal_heads, rng)
        self.channel = MultiHeadSelfAttention(cfg.seq_len, cfg.channel_heads, rng)
        self.norm1 = LayerNorm(cfg.channels)
        self.branches = [ConvBranch(k, cfg.dropout, rng) for k in cfg.kernels]
        self.norm2 = LayerNorm(cfg.channels)

    def forward(self, x: Tensor) -> Tensor:
        v = nx.add(self.temporal(x), nx.transpose(self.channel(nx.transpose(x))))
        v_bar = self.norm1(nx.add(v, x))
        c = self.branches[0](v_bar)
        for branch in self.branches[1:]:
            c = nx.add(c, branch(v_bar))
        return self.norm2(nx.add(c, v_bar))


class STDAT(Module):
    def __init__(self, cfg: StdatConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.gre = GaussianRangeEncoder(cfg.seq_len, cfg.channels, cfg.gaussians, rng)
        self.blocks = [DualAttentionBlock(cfg, rng) for _ in range(cfg.blocks)]
        self.fc1 = Linear(cfg.seq_len * cfg.channels, cfg.hidden, rng)
        self.fc2 = Linear(cfg.hidden, cfg.embedding, rng)

    def forward(self, x) -> Tensor:
        x = nx.as_tensor(x)
        expected = (self.cfg.seq_len, self.cfg.channels)
        if x.shape[-2:] != expected:
            raise nx.ShapeError(f"STDAT expects (..., {expected[0]}, {expected[1]}), got {x.shape}")
        if x.ndim == 2:
            # a single N x M sequence gives a single embedding
            return nx.reshape(self(nx.reshape(x, (1,) + expected)), (self.cfg.embedding,))
        h = nx.add(x, self.gre())
        for block in self.blocks:
            h = block(h)
        h = nx.reshape(h, x.shape[:-2] + (-1,))
        return self.fc2(nx.relu(self.fc1(h)))


class BehaveFormer(Module):
    def __init__(self, cfg: BehaveFormerConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.keystroke = STDAT(cfg.keystroke, rng)
        self.imu = STDAT(cfg.imu, rng) if cfg.imu is not None else None
        self.fusion = (
            Linear(cfg.keystroke.embedding + cfg.imu.embedding, cfg.fusion_dim, rng) if cfg.imu is not None else None
        )

    @property
    def dual(self) -> bool:
        return self.imu is not None

    @property
    def embedding_dim(self) -> int:
        return self.cfg.fusion_dim if self.dual else self.cfg.keystroke.embedding

    def forward(self, xk, ximu=None) -> Tensor:
        if self.dual != (ximu is not None):
            raise ModelConfigError(
                "IMU input given to a keystroke-only model" if ximu is not None else "dual-tower model needs IMU input"
            )
        fk = self.keystroke(xk)
        if not self.dual:
            return fk
        return self.fusion(nx.concat([fk, self.imu(ximu)], axis=-1))

    def shape_table(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(arr.shape) for name, arr in self.state_dict().items()}
