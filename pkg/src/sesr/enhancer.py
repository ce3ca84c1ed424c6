"""Residual/skip convolutional auto-encoder for magnitude-spectrogram enhancement.

Tensors are laid out (batch, channels, time, freq).  With the default config a
(300, 257) spectrogram is encoded as

    (300,257,1) -> (300,129,16) -> (150,65,32) -> (75,33,64) -> (38,17,128) -> (19,5,256)

then flattened to (19, 1280), optionally concatenated with a speaker embedding
tiled over time (19, 1536), projected to (19, 512), passed through a
bidirectional GRU (19, 1280) and reshaped back to (19, 5, 256).  The decoder
mirrors the encoder; each decoder stage consumes its input concatenated along
the channel axis with the matching encoder activation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

FULL_FEATURES = (16, 32, 64, 128, 256)
FULL_STRIDES = ((1, 2), (2, 2), (2, 2), (2, 2), (2, 4))
OUTPUT_ACTIVATIONS = {"relu": F.relu, "softplus": F.softplus}


@dataclass(frozen=True)
class EnhancerConfig:
    features: tuple = FULL_FEATURES
    strides: tuple = FULL_STRIDES
    dense: int = 512
    emb_dim: int = 0  # 0 for SE1, 256 for SE2
    n_bins: int = 257
    kernel: int = 3
    slope: float = 0.2
    output: str = "relu"  # or "softplus"; both are nonnegative

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(int(f) for f in self.features))
        object.__setattr__(self, "strides", tuple(tuple(int(s) for s in st) for st in self.strides))
        if len(self.features) != len(self.strides):
            raise ValueError("features and strides must have the same number of stages")
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output!r}")
        if self.bottleneck_dim % 2:
            raise ValueError("flattened bottleneck width must be even (split across GRU directions)")

    @property
    def freq_sizes(self) -> list[int]:
        sizes = [self.n_bins]
        for _, sf in self.strides:
            sizes.append(math.ceil(sizes[-1] / sf))
        return sizes

    @property
    def bottleneck_dim(self) -> int:
        return self.freq_sizes[-1] * self.features[-1]

    @property
    def gru_hidden(self) -> int:
        return self.bottleneck_dim // 2

    def with_embedding(self, emb_dim: int) -> "EnhancerConfig":
        d = asdict(self)
        d["emb_dim"] = emb_dim
        return EnhancerConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        d["strides"] = [list(s) for s in self.strides]
        return d


def time_sizes(n_frames: int, strides) -> list[int]:
    sizes = [n_frames]
    for st, _ in strides:
        sizes.append(math.ceil(sizes[-1] / st))
    return sizes


class EnhancerNet(nn.Module):
    def __init__(self, cfg: EnhancerConfig = EnhancerConfig()):
        super().__init__()
        self.cfg = cfg
        k, pad = cfg.kernel, cfg.kernel // 2
        chans = (1,) + cfg.features

        # padding k//2 with stride s gives ceil(n / s) outputs for k = 3
        self.encoder = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], k, stride=cfg.strides[i], padding=pad)
            for i in range(len(cfg.features))
        )
        self.dense = nn.Linear(cfg.bottleneck_dim + cfg.emb_dim, cfg.dense)
        self.gru = nn.GRU(cfg.dense, cfg.gru_hidden, batch_first=True, bidirectional=True)
        # decoder stage i maps concat(prev, skip_i) -> chans[i], reversed
        self.decoder = nn.ModuleList(
            nn.ConvTranspose2d(2 * chans[i + 1], chans[i], k, stride=cfg.strides[i], padding=pad)
            for i in reversed(range(len(cfg.features)))
        )

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None, trace: list | None = None):
        """``x``: (B, T, F) magnitudes; ``emb``: (B, emb_dim) for SE2, None for SE1.

        If ``trace`` is a list, (name, (T, F, C)) shape rows are appended to it.
        """
        cfg = self.cfg
        if x.ndim != 3 or x.shape[-1] != cfg.n_bins:
            raise ValueError(f"expected (batch, T, {cfg.n_bins}) input, got {tuple(x.shape)}")
        if cfg.emb_dim and emb is None:
            raise ValueError("this enhancer expects a speaker embedding")
        if not cfg.emb_dim and emb is not None:
            raise ValueError("this enhancer takes no speaker embedding")
        if emb is not None and (emb.ndim != 2 or emb.shape != (x.shape[0], cfg.emb_dim)):
            raise ValueError(f"embedding must be (batch, {cfg.emb_dim}), got {tuple(emb.shape)}")

        def note(name, t):
            if trace is not None:
                trace.append((name, tuple(t.shape[1:])))

        h = x.unsqueeze(1)
        skips = []
        for conv in self.encoder:
            h = F.leaky_relu(conv(h), cfg.slope)
            skips.append(h)
            note("encoder", h.permute(0, 2, 3, 1))

        b, c, t, f = h.shape
        z = h.permute(0, 2, 3, 1).reshape(b, t, f * c)
        note("reshape", z)
        if emb is not None:
            z = torch.cat([z, emb.unsqueeze(1).expand(b, t, cfg.emb_dim)], dim=-1)
            note("concat", z)
        z = F.leaky_relu(self.dense(z), cfg.slope)
        note("dense", z)
        z, _ = self.gru(z)
        note("bigru", z)
        h = z.reshape(b, t, f, c).permute(0, 3, 1, 2)
        note("reshape", h.permute(0, 2, 3, 1))

        n = len(self.decoder)
        for j, deconv in enumerate(self.decoder):
            skip = skips[n - 1 - j]
            target = skips[n - 2 - j].shape[-2:] if j < n - 1 else x.shape[-2:]
            h = deconv(torch.cat([h, skip], dim=1), output_size=list(target))
            h = OUTPUT_ACTIVATIONS[cfg.output](h) if j == n - 1 else F.leaky_relu(h, cfg.slope)
        return h.squeeze(1)


def warm_start_from(se2: EnhancerNet, se1: EnhancerNet, init_std: float = 1e-3, generator=None):
    """Copy SE1 weights into SE2; the dense-layer columns that read the
    embedding get small random values."""
    state = se1.state_dict()
    dense_w = state.pop("dense.weight")
    own = se2.state_dict()
    for name, value in state.items():
        own[name].copy_(value)
    with torch.no_grad():
        w = own["dense.weight"]
        w[:, : dense_w.shape[1]] = dense_w
        w[:, dense_w.shape[1] :] = init_std * torch.randn(
            w.shape[0], w.shape[1] - dense_w.shape[1], generator=generator, dtype=w.dtype
        )
    se2.load_state_dict(own)


def mae_loss(clean: torch.Tensor, enhanced: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all time-frequency cells (and the batch)."""
    if clean.shape != enhanced.shape:
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(enhanced.shape)}")
    return (clean - enhanced).abs().mean()
