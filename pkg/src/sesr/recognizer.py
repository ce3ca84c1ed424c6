"""ResNet-20 speaker classifier.

CIFAR-style layout: 3x3 stem, three stages of three basic blocks (16/32/64
channels, stride 2 between stages), global average pooling over time and
frequency, then FC(-> 256) whose pre-activation output is the speaker
embedding, ReLU, and FC(-> speakers) for the logits.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


@dataclass(frozen=True)
class RecognizerConfig:
    n_speakers: int
    widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 3
    emb_dim: int = 256
    stem_stride: tuple = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "stem_stride", tuple(int(s) for s in self.stem_stride))
        if self.n_speakers < 1:
            raise ValueError("n_speakers must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["stem_stride"] = list(self.stem_stride)
        return d


class SrOutput(NamedTuple):
    logits: torch.Tensor
    embedding: torch.Tensor


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class RecognizerNet(nn.Module):
    def __init__(self, cfg: RecognizerConfig):
        super().__init__()
        self.cfg = cfg
        w0 = cfg.widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(1, w0, 3, cfg.stem_stride, 1, bias=False), nn.BatchNorm2d(w0), nn.ReLU()
        )
        layers, cin = [], w0
        for i, w in enumerate(cfg.widths):
            for j in range(cfg.blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(cin, w, stride))
                cin = w
        self.blocks = nn.Sequential(*layers)
        self.fc1 = nn.Linear(cin, cfg.emb_dim)
        self.fc2 = nn.Linear(cfg.emb_dim, cfg.n_speakers)

    def forward(self, x: torch.Tensor) -> SrOutput:
        if x.ndim != 3:
            raise ValueError(f"expected (batch, T, F) input, got {tuple(x.shape)}")
        h = self.blocks(self.stem(x.unsqueeze(1)))
        h = h.mean(dim=(2, 3))
        emb = self.fc1(h)
        return SrOutput(self.fc2(F.relu(emb)), emb)


def ce_loss(logits: torch.Tensor, targets: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Categorical cross entropy of softmax(logits) against integer targets.

    ``reduction="sum"`` is the literal batch sum; the default averages over
    the batch.
    """
    if logits.ndim != 2:
        raise ValueError("logits must be (batch, classes)")
    targets = torch.as_tensor(targets, dtype=torch.long, device=logits.device)
    if targets.shape != logits.shape[:1]:
        raise ValueError("one target per sample required")
    if targets.numel() and (int(targets.max()) >= logits.shape[1] or int(targets.min()) < 0):
        raise ValueError(f"target index out of range for {logits.shape[1]} classes")
    nll = -torch.log_softmax(logits, dim=1).gather(1, targets[:, None]).squeeze(1)
    if reduction == "sum":
        return nll.sum()
    if reduction == "mean":
        return nll.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError("embedding dimensions differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate embedding (zero vector)")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def save_embedding(path, vector, utt_id: str, stage: str) -> None:
    """float32 binary plus ``.json`` sidecar ``{utt_id, dim, stage}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    v = np.asarray(vector, dtype="<f4").ravel()
    v.tofile(path)
    sidecar = {"utt_id": utt_id, "dim": int(v.size), "stage": stage}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_embedding(path) -> tuple[np.ndarray, dict]:
    meta = json.loads(Path(str(path) + ".json").read_text())
    v = np.fromfile(path, dtype="<f4")
    if v.size != meta["dim"]:
        raise ValueError(f"{path}: expected {meta['dim']} values, found {v.size}")
    return v, meta
