"""Three-stage training protocol and checkpoint container.

Stages, in order:

``step1_independent``
    SE1 learns MAE(clean, SE1(noisy)); SR1 learns CE on SE1's output with the
    enhancer output detached, so the recognizer loss does not reach SE1.
``step1_joint``
    SE1 and SR1 fine-tuned together on ``L_SE + L_SR`` with gradients of the
    recognizer loss flowing back through SE1.
``step2``
    SE2 (warm-started from SE1) is trained on ``L_SE + L_SR``.  SE1 and SR1
    are frozen; the Step-1 embedding ``SR1(SE1(noisy)).embedding`` conditions
    SE2, and SR2, which *is* SR1, classifies SE2's output.

``sid`` is the recognizer-only baseline trained directly on noisy input.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dsp import crop_start
from .enhancer import EnhancerConfig, EnhancerNet, mae_loss, warm_start_from
from .recognizer import RecognizerConfig, RecognizerNet, SrOutput, ce_loss
from .seeding import rng_for, torch_seed_for

log = logging.getLogger(__name__)

STAGES = ("step1_independent", "step1_joint", "step2")
ALL_STAGES = STAGES + ("sid",)
PREREQUISITE = {"step1_independent": None, "step1_joint": "step1_independent", "step2": "step1_joint", "sid": None}


class StageOrderError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


# --- configuration ------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int = 10
    batch_size: int = 32
    lr_init: float = 1e-3
    lr_decay_per_epoch: float = 0.9
    seed: int = 0
    steps_per_epoch: int | None = None  # None: one pass over the data
    crop_frames: int = 300
    se_loss_weight: float = 1.0
    sr_loss_weight: float = 1.0
    ce_reduction: str = "mean"

    def __post_init__(self):
        if self.stage not in ALL_STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not self.lr_init > 0:
            raise ValueError("lr_init must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr_init * self.lr_decay_per_epoch**epoch


@dataclass(frozen=True)
class ModelConfig:
    enhancer: EnhancerConfig
    recognizer: RecognizerConfig

    @classmethod
    def full(cls, n_speakers: int) -> "ModelConfig":
        return cls(EnhancerConfig(), RecognizerConfig(n_speakers))

    @classmethod
    def desk(cls, n_speakers: int) -> "ModelConfig":
        """Narrow variant for CPU-scale runs: same topology and encoder strides;
        the recognizer stem is strided 2x2."""
        return cls(
            EnhancerConfig(features=(8, 16, 16, 32, 32), dense=128),
            RecognizerConfig(n_speakers, widths=(8, 16, 32), stem_stride=(2, 2)),
        )

    @property
    def se2(self) -> EnhancerConfig:
        return self.enhancer.with_embedding(self.recognizer.emb_dim)

    def to_dict(self) -> dict:
        return {"enhancer": self.enhancer.to_dict(), "recognizer": self.recognizer.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        enh = dict(d["enhancer"])
        enh["emb_dim"] = 0
        return cls(EnhancerConfig(**enh), RecognizerConfig(**d["recognizer"]))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- the cascade ----------------------------------------------------------------------


class SESRSystem(nn.Module):
    """SE1, SR1 and SE2.  ``sr2`` is an alias of ``sr1``, not a copy."""

    def __init__(self, model: ModelConfig, with_se: bool = True):
        super().__init__()
        self.model = model
        self.se1 = EnhancerNet(model.enhancer) if with_se else None
        self.sr1 = RecognizerNet(model.recognizer)
        self.se2 = None

    @property
    def sr2(self) -> RecognizerNet:
        return self.sr1

    def add_se2(self, warm_start: bool = True, generator=None) -> EnhancerNet:
        self.se2 = EnhancerNet(self.model.se2)
        if warm_start and self.se1 is not None:
            warm_start_from(self.se2, self.se1, generator=generator)
        return self.se2

    def blocks(self) -> dict[str, nn.Module]:
        out = {"se1": self.se1, "sr1": self.sr1, "se2": self.se2}
        return {k: v for k, v in out.items() if v is not None}

    def sid_forward(self, x) -> SrOutput:
        return self.sr1(x)

    def step1_forward(self, x):
        enhanced = self.se1(x)
        return enhanced, self.sr1(enhanced)

    def step1_embedding(self, x) -> torch.Tensor:
        return self.sr1(self.se1(x)).embedding

    def step2_forward(self, x):
        """``(enhanced2, SrOutput)``; the Step-1 embedding is computed without gradient."""
        with torch.no_grad():
            emb = self.step1_embedding(x)
        enhanced = self.se2(x, emb)
        return enhanced, self.sr2(enhanced)


def block_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- data -------------------------------------------------------------------------


@dataclass
class PairedData:
    """Full-length (T_i, F) magnitude spectrograms and integer speaker labels."""

    noisy: list
    clean: list
    speakers: np.ndarray
    n_speakers: int
    utt_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        if not self.noisy:
            raise ValueError("empty training manifest")
        if not (len(self.noisy) == len(self.clean) == len(self.speakers)):
            raise ValueError("noisy/clean/speaker lists differ in length")
        if self.speakers.max() >= self.n_speakers or self.speakers.min() < 0:
            raise ValueError("speaker label outside the inventory")

    def __len__(self):
        return len(self.noisy)

    def _crop(self, i, start, frames):
        def one(a):
            a = a[start : start + frames]
            if len(a) < frames:
                a = np.concatenate([a, np.zeros((frames - len(a), a.shape[1]), a.dtype)])
            return a

        return one(self.noisy[i]), one(self.clean[i])

    def batches(self, cfg: StageConfig, epoch: int):
        rng = rng_for(cfg.seed, f"batches/{cfg.stage}/{epoch}")
        n = len(self)
        per_pass = math.ceil(n / cfg.batch_size)
        steps = cfg.steps_per_epoch or per_pass
        order = np.array([], dtype=np.int64)
        for _ in range(steps):
            if len(order) == 0:
                order = rng.permutation(n)
            idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
            noisy, clean = [], []
            for i in idx:
                start = crop_start(len(self.noisy[i]), cfg.crop_frames, rng)
                a, b = self._crop(i, start, cfg.crop_frames)
                noisy.append(a)
                clean.append(b)
            yield (
                torch.from_numpy(np.stack(noisy)).float(),
                torch.from_numpy(np.stack(clean)).float(),
                torch.from_numpy(self.speakers[idx]),
            )


# --- losses -------------------------------------------------------------------------


def joint_loss(clean, enhanced, logits, target, se_weight=1.0, sr_weight=1.0, reduction="mean"):
    """``L_SE + L_SR``; weights other than 1 exist only for diagnostics."""
    return se_weight * mae_loss(clean, enhanced) + sr_weight * ce_loss(logits, target, reduction)


# --- checkpoints ----------------------------------------------------------------------

MAGIC = b"SESRCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: ModelConfig
    stage: str
    epoch: int
    complete: bool
    se1_params: dict | None
    sr1_params: dict | None
    se2_params: dict | None
    rng_state: dict = field(default_factory=dict)
    optimizer: dict | None = None
    speakers: list = field(default_factory=list)
    stage_config: dict | None = None
    history: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.model.hash()

    @classmethod
    def from_system(cls, system: SESRSystem, stage, epoch, complete, **kw) -> "Checkpoint":
        def sd(m):
            return None if m is None else {k: v.detach().clone() for k, v in m.state_dict().items()}

        return cls(
            system.model, stage, epoch, complete, sd(system.se1), sd(system.sr1), sd(system.se2),
            rng_state={"torch": torch.get_rng_state().clone()}, **kw
        )

    def build_system(self) -> SESRSystem:
        system = SESRSystem(self.model, with_se=self.se1_params is not None)
        if self.se1_params is not None:
            system.se1.load_state_dict(self.se1_params)
        system.sr1.load_state_dict(self.sr1_params)
        if self.se2_params is not None:
            system.add_se2(warm_start=False)
            system.se2.load_state_dict(self.se2_params)
        return system


def _tensor_blocks(ckpt: Checkpoint):
    blocks = {}
    for tag in ("se1", "sr1", "se2"):
        params = getattr(ckpt, f"{tag}_params")
        if params is not None:
            for name, t in params.items():
                blocks[f"{tag}/{name}"] = t
    for name, t in ckpt.rng_state.items():
        blocks[f"rng/{name}"] = t
    if ckpt.optimizer is not None:
        for idx, state in ckpt.optimizer["state"].items():
            for key, t in state.items():
                blocks[f"optim/{idx}/{key}"] = t
    return blocks


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Versioned binary container: magic, version, JSON header, raw little-endian
    tensor blocks, SHA-256 trailer over everything before it."""
    payload = io.BytesIO()
    index = []
    for name, t in _tensor_blocks(ckpt).items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": payload.tell(), "nbytes": len(raw)})
        payload.write(raw)
    header = {
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "complete": ckpt.complete,
        "config_hash": ckpt.config_hash,
        "model": ckpt.model.to_dict(),
        "speakers": list(ckpt.speakers),
        "stage_config": ckpt.stage_config,
        "history": ckpt.history,
        "optimizer_groups": None if ckpt.optimizer is None else ckpt.optimizer["param_groups"],
        "blocks": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + payload.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def load_checkpoint(path, expected_config_hash: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or tampered)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen])
    payload = memoryview(body)[start + hlen :]

    model = ModelConfig.from_dict(header["model"])
    if model.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match stored model config")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise CheckpointError(
            f"{path}: config hash {header['config_hash']} != expected {expected_config_hash}"
        )

    tensors = {}
    for b in header["blocks"]:
        arr = np.frombuffer(payload[b["offset"] : b["offset"] + b["nbytes"]], dtype=np.dtype(b["dtype"]))
        tensors[b["name"]] = torch.from_numpy(arr.reshape(b["shape"]).copy())

    def group(prefix):
        found = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
        return found or None

    optimizer = None
    if header["optimizer_groups"] is not None:
        state: dict = {}
        for k, v in (group("optim") or {}).items():
            idx, key = k.split("/", 1)
            state.setdefault(int(idx), {})[key] = v
        optimizer = {"state": state, "param_groups": header["optimizer_groups"]}

    return Checkpoint(
        model=model,
        stage=header["stage"],
        epoch=header["epoch"],
        complete=header["complete"],
        se1_params=group("se1"),
        sr1_params=group("sr1"),
        se2_params=group("se2"),
        rng_state=group("rng") or {},
        optimizer=optimizer,
        speakers=header["speakers"],
        stage_config=header["stage_config"],
        history=header["history"],
    )


# --- stage runner -------------------------------------------------------------------


def _check_finite(value: float, stage: str, epoch: int):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss in {stage} epoch {epoch}")


def recalibrate_bn(recognizer: nn.Module, front, data: PairedData, batch_size: int = 16) -> None:
    """Recompute BatchNorm statistics as exact averages over the full-length
    training inputs, with all weights fixed.  ``front`` maps a noisy batch to
    what the recognizer sees (identity for SID, SE1 for Step 1)."""
    bns = [m for m in recognizer.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None  # cumulative average
    by_len: dict[int, list[int]] = {}
    for i, x in enumerate(data.noisy):
        by_len.setdefault(len(x), []).append(i)
    recognizer.train()
    with torch.no_grad():
        for length in sorted(by_len):
            idx = by_len[length]
            for k in range(0, len(idx), batch_size):
                x = torch.from_numpy(np.stack([data.noisy[i] for i in idx[k : k + batch_size]])).float()
                recognizer(front(x))
    for m, mom in zip(bns, saved):
        m.momentum = mom


def _run_stage(system, stage_cfg, data, trainable, step_fn, *, resume, train_modes, eval_modules,
               log_path, checkpoint_path, speakers, finalize=None):
    params = [p for m in trainable for p in m.parameters()]
    optimizer = torch.optim.Adam(params, lr=stage_cfg.lr_init)
    start_epoch = 0
    history = []
    if resume is not None:
        start_epoch = resume.epoch
        history = list(resume.history)
        if resume.optimizer is not None:
            optimizer.load_state_dict(resume.optimizer)
        if "torch" in resume.rng_state:
            torch.set_rng_state(resume.rng_state["torch"])

    ckpt = None
    for epoch in range(start_epoch, stage_cfg.epochs):
        lr = stage_cfg.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for m in train_modes:
            m.train()
        for m in eval_modules:
            m.eval()
        t0 = time.perf_counter()
        sums = np.zeros(3)
        n = 0
        for noisy, clean, spk in data.batches(stage_cfg, epoch):
            optimizer.zero_grad(set_to_none=True)
            l_se, l_sr = step_fn(noisy, clean, spk)
            loss = stage_cfg.se_loss_weight * l_se + stage_cfg.sr_loss_weight * l_sr
            _check_finite(loss.item(), stage_cfg.stage, epoch)
            loss.backward()
            optimizer.step()
            sums += (l_se.item(), l_sr.item(), loss.item())
            n += 1
        means = sums / max(n, 1)
        if finalize is not None and epoch + 1 == stage_cfg.epochs:
            finalize()
        record = {"stage": stage_cfg.stage, "epoch": epoch, "lr": lr, "L_SE": means[0],
                  "L_SR": means[1], "L": means[2], "steps": n, "wall_time": time.perf_counter() - t0}
        history.append(record)
        log.info("%s epoch %d lr %.3g L_SE %.4f L_SR %.4f", stage_cfg.stage, epoch, lr, means[0], means[1])
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        ckpt = Checkpoint.from_system(
            system, stage_cfg.stage, epoch + 1, epoch + 1 == stage_cfg.epochs,
            optimizer=optimizer.state_dict(), speakers=speakers,
            stage_config=asdict(stage_cfg), history=history,
        )
        if checkpoint_path is not None:
            save_checkpoint(ckpt, checkpoint_path)

    if ckpt is None:  # zero epochs, or resumed at the end
        ckpt = Checkpoint.from_system(system, stage_cfg.stage, stage_cfg.epochs, True,
                                      optimizer=optimizer.state_dict(), speakers=speakers,
                                      stage_config=asdict(stage_cfg), history=history)
        if checkpoint_path is not None:
            save_checkpoint(ckpt, checkpoint_path)
    return ckpt


def _resume_or_require(ckpt: Checkpoint | None, stage: str) -> tuple[Checkpoint | None, bool]:
    """Returns ``(checkpoint, resuming)``; enforces stage ordering."""
    if ckpt is not None and ckpt.stage == stage and not ckpt.complete:
        return ckpt, True
    need = PREREQUISITE[stage]
    if need is None:
        return None, False
    if ckpt is None:
        raise StageOrderError(f"{stage} requires a completed {need} checkpoint")
    if ckpt.stage != need or not ckpt.complete:
        raise StageOrderError(
            f"{stage} requires a completed {need} checkpoint, got "
            f"{'complete' if ckpt.complete else 'partial'} {ckpt.stage}"
        )
    return ckpt, False


def _fresh_system(model: ModelConfig, cfg: StageConfig, with_se: bool) -> SESRSystem:
    torch.manual_seed(torch_seed_for(cfg.seed, f"init/{cfg.stage}"))
    return SESRSystem(model, with_se=with_se)


def _check_inventory(data: PairedData, model: ModelConfig):
    if data.n_speakers != model.recognizer.n_speakers:
        raise ValueError(
            f"speaker count mismatch: data has {data.n_speakers}, model expects "
            f"{model.recognizer.n_speakers}"
        )


def train_step1_independent(data: PairedData, cfg: StageConfig, model: ModelConfig, *,
                            resume: Checkpoint | None = None, log_path=None,
                            checkpoint_path=None, speakers=()) -> Checkpoint:
    cfg = replace(cfg, stage="step1_independent")
    _check_inventory(data, model)
    resume, resuming = _resume_or_require(resume, cfg.stage)
    system = resume.build_system() if resuming else _fresh_system(model, cfg, with_se=True)

    def step(noisy, clean, spk):
        enhanced = system.se1(noisy)
        out = system.sr1(enhanced.detach())
        return mae_loss(clean, enhanced), ce_loss(out.logits, spk, cfg.ce_reduction)

    return _run_stage(system, cfg, data, [system.se1, system.sr1], step,
                      resume=resume if resuming else None, train_modes=[system.se1, system.sr1],
                      eval_modules=[], log_path=log_path, checkpoint_path=checkpoint_path,
                      speakers=list(speakers), finalize=lambda: recalibrate_bn(system.sr1, system.se1, data))


def finetune_step1_joint(ckpt: Checkpoint, data: PairedData, cfg: StageConfig, *, log_path=None,
                         checkpoint_path=None) -> Checkpoint:
    cfg = replace(cfg, stage="step1_joint")
    ckpt, resuming = _resume_or_require(ckpt, cfg.stage)
    _check_inventory(data, ckpt.model)
    system = ckpt.build_system()

    def step(noisy, clean, spk):
        enhanced, out = system.step1_forward(noisy)
        return mae_loss(clean, enhanced), ce_loss(out.logits, spk, cfg.ce_reduction)

    return _run_stage(system, cfg, data, [system.se1, system.sr1], step,
                      resume=ckpt if resuming else None, train_modes=[system.se1, system.sr1],
                      eval_modules=[], log_path=log_path, checkpoint_path=checkpoint_path,
                      speakers=ckpt.speakers, finalize=lambda: recalibrate_bn(system.sr1, system.se1, data))


def prepare_step2(system: SESRSystem, cfg: StageConfig, warm_start: bool = True) -> SESRSystem:
    """Attach a fresh SE2 and freeze SE1/SR1(=SR2)."""
    gen = torch.Generator().manual_seed(torch_seed_for(cfg.seed, "init/se2"))
    torch.manual_seed(torch_seed_for(cfg.seed, "init/step2"))
    system.add_se2(warm_start=warm_start, generator=gen)
    for m in (system.se1, system.sr1):
        for p in m.parameters():
            p.requires_grad_(False)
    return system


def train_step2(ckpt: Checkpoint, data: PairedData, cfg: StageConfig, *, warm_start: bool = True,
                log_path=None, checkpoint_path=None) -> Checkpoint:
    if ckpt is None:
        raise StageOrderError("step2 requires a completed step1_joint checkpoint")
    cfg = replace(cfg, stage="step2")
    ckpt, resuming = _resume_or_require(ckpt, cfg.stage)
    _check_inventory(data, ckpt.model)
    system = ckpt.build_system()
    if resuming:
        for m in (system.se1, system.sr1):
            for p in m.parameters():
                p.requires_grad_(False)
    else:
        prepare_step2(system, cfg, warm_start)

    def step(noisy, clean, spk):
        enhanced, out = system.step2_forward(noisy)
        return mae_loss(clean, enhanced), ce_loss(out.logits, spk, cfg.ce_reduction)

    return _run_stage(system, cfg, data, [system.se2], step,
                      resume=ckpt if resuming else None, train_modes=[system.se2],
                      eval_modules=[system.se1, system.sr1], log_path=log_path,
                      checkpoint_path=checkpoint_path, speakers=ckpt.speakers)


def train_sid_baseline(data: PairedData, cfg: StageConfig, model: ModelConfig, *,
                       resume: Checkpoint | None = None, log_path=None, checkpoint_path=None,
                       speakers=()) -> Checkpoint:
    """Recognizer alone on noisy input (the SID baseline)."""
    cfg = replace(cfg, stage="sid")
    _check_inventory(data, model)
    resume, resuming = _resume_or_require(resume, cfg.stage)
    system = resume.build_system() if resuming else _fresh_system(model, cfg, with_se=False)

    def step(noisy, clean, spk):
        out = system.sr1(noisy)
        return torch.zeros(()), ce_loss(out.logits, spk, cfg.ce_reduction)

    return _run_stage(system, cfg, data, [system.sr1], step,
                      resume=resume if resuming else None, train_modes=[system.sr1],
                      eval_modules=[], log_path=log_path, checkpoint_path=checkpoint_path,
                      speakers=list(speakers), finalize=lambda: recalibrate_bn(system.sr1, nn.Identity(), data))
