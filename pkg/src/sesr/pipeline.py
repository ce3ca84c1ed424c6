"""Feature extraction, inference and evaluation glue, plus the desk-scale
experiment (synthetic micro-corpus, all three systems, all metrics)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import metrics
from .dsp import Spectrogram, StftConfig, Waveform, istft, magnitude, stft
from .mixing import CATEGORIES, mix_at_snr
from .recognizer import cosine_score
from .seeding import rng_for, set_deterministic
from .synth import random_voice, synth_noise, synth_utterance
from .training import (
    ModelConfig,
    PairedData,
    SESRSystem,
    StageConfig,
    finetune_step1_joint,
    train_sid_baseline,
    train_step1_independent,
    train_step2,
)

log = logging.getLogger(__name__)

SYSTEMS = ("sid", "step1", "step2")
STAGE_SYSTEM = {"sid": "sid", "step1_independent": "step1", "step1_joint": "step1", "step2": "step2"}


def spectrogram(w: Waveform, cfg: StftConfig | None = None) -> np.ndarray:
    return magnitude(stft(w, cfg)).values.astype(np.float32)


@torch.no_grad()
def infer(system: SESRSystem, kind: str, specs, batch_size: int = 16) -> dict:
    """Run one system over full-length spectrograms (eval mode).

    Returns ``logits`` (N, M), ``embeddings`` (N, D) and ``enhanced`` (list of
    (T_i, F) arrays, or None for the SID baseline).
    """
    if kind not in SYSTEMS:
        raise ValueError(f"unknown system {kind!r}")
    system.eval()
    n = len(specs)
    logits, embs, enhanced = [None] * n, [None] * n, [None] * n
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(specs):
        by_len.setdefault(len(s), []).append(i)
    for idx in by_len.values():
        for k in range(0, len(idx), batch_size):
            chunk = idx[k : k + batch_size]
            x = torch.from_numpy(np.stack([specs[i] for i in chunk])).float()
            if kind == "sid":
                enh, out = None, system.sid_forward(x)
            elif kind == "step1":
                enh, out = system.step1_forward(x)
            else:
                enh, out = system.step2_forward(x)
            for j, i in enumerate(chunk):
                logits[i] = out.logits[j].numpy()
                embs[i] = out.embedding[j].numpy()
                enhanced[i] = None if enh is None else enh[j].numpy()
    return {
        "logits": np.stack(logits),
        "embeddings": np.stack(embs),
        "enhanced": None if kind == "sid" else enhanced,
    }


def reconstruct(enhanced_mag: np.ndarray, noisy: Waveform, cfg: StftConfig | None = None) -> Waveform:
    """Enhanced magnitude + noisy phase -> waveform of the noisy input's length."""
    c = stft(noisy, cfg)
    return istft(Spectrogram(enhanced_mag.astype(np.float64), c.config), c, length=len(noisy))


def identification(logits, targets) -> dict:
    m = logits.shape[1]
    return {"top1": metrics.topk_accuracy(logits, targets, 1),
            "top5": metrics.topk_accuracy(logits, targets, min(5, m))}


def verification(enroll: dict, test: dict, trials) -> dict:
    """Cosine scores of enrollment vs test embeddings over ``(a, b, same)`` trials."""
    scores = [cosine_score(enroll[a], test[b]) for a, b, _ in trials]
    s = metrics.ScoreSet(scores, [t[2] for t in trials])
    return {"eer": metrics.eer(s), "dcf": metrics.avg_dcf(s)}


# --- desk-scale experiment ------------------------------------------------------------


@dataclass
class Utterance:
    utt_id: str
    speaker: int
    clean: Waveform
    noisy: Waveform
    category: str
    snr_db: float


@dataclass
class DeskConfig:
    n_speakers: int = 10
    train_utts: int = 12
    test_utts: int = 8
    duration: float = 2.0
    snr_db: float = 0.0
    noise_per_category: int = 3
    noise_duration: float = 6.0
    categories: tuple = CATEGORIES
    crop_frames: int = 64
    batch_size: int = 16
    steps_per_epoch: int = 20
    independent_epochs: int = 10
    joint_epochs: int = 5
    step2_epochs: int = 6
    model: str = "desk"
    metrics: tuple = ("sid", "sv", "stoi")

    def stage(self, name: str, epochs: int, seed: int) -> StageConfig:
        return StageConfig(stage=name, epochs=epochs, batch_size=self.batch_size, seed=seed,
                           steps_per_epoch=self.steps_per_epoch, crop_frames=self.crop_frames)


def synth_micro_corpus(desk: DeskConfig, seed: int):
    """(train, test) utterance lists; every utterance mixed at ``desk.snr_db``
    with a random category / clip / offset."""
    rng = rng_for(seed, "corpus")
    voices = [random_voice(rng) for _ in range(desk.n_speakers)]
    noises = {c: [synth_noise(c, desk.noise_duration, rng) for _ in range(desk.noise_per_category)]
              for c in desk.categories}
    mix_rng = rng_for(seed, "mix")

    def make(split, count):
        out = []
        for s, voice in enumerate(voices):
            for u in range(count):
                clean = synth_utterance(voice, desk.duration, rng)
                cat = desk.categories[mix_rng.integers(len(desk.categories))]
                noise = noises[cat][mix_rng.integers(len(noises[cat]))]
                noisy = mix_at_snr(clean, noise, desk.snr_db, int(mix_rng.integers(len(noise))))
                out.append(Utterance(f"{split}-spk{s:02d}-{u:02d}", s, clean, noisy, cat, desk.snr_db))
        return out

    return make("train", desk.train_utts), make("test", desk.test_utts)


def to_paired(utts, n_speakers: int) -> PairedData:
    return PairedData(
        noisy=[spectrogram(u.noisy) for u in utts],
        clean=[spectrogram(u.clean) for u in utts],
        speakers=[u.speaker for u in utts],
        n_speakers=n_speakers,
        utt_ids=[u.utt_id for u in utts],
    )


def evaluate_system(system: SESRSystem, kind: str, utts, metric_set=("sid", "sv", "stoi"), seed: int = 0) -> dict:
    noisy_specs = [spectrogram(u.noisy) for u in utts]
    targets = np.array([u.speaker for u in utts])
    out = infer(system, kind, noisy_specs)
    result = {}
    if "sid" in metric_set:
        result.update(identification(out["logits"], targets))
    if "sv" in metric_set:
        # enrollment: clean utterances through the same system
        enroll = infer(system, kind, [spectrogram(u.clean) for u in utts])["embeddings"]
        trials = metrics.make_trials({u.utt_id: u.speaker for u in utts}, rng_for(seed, "trials"))
        ids = {u.utt_id: i for i, u in enumerate(utts)}
        result.update(verification({k: enroll[i] for k, i in ids.items()},
                                   {k: out["embeddings"][i] for k, i in ids.items()}, trials))
    if "stoi" in metric_set:
        result["stoi_noisy"] = float(np.mean([metrics.stoi(u.clean, u.noisy) for u in utts]))
        if out["enhanced"] is not None:
            result["stoi_enhanced"] = float(np.mean([
                metrics.stoi(u.clean, reconstruct(e, u.noisy)) for u, e in zip(utts, out["enhanced"])
            ]))
    return result


def run_desk_experiment(seed: int, desk: DeskConfig = DeskConfig()) -> dict:
    """Train SID, SESR-Step1 and SESR-Step2 on one seeded micro-corpus and
    evaluate all three on its held-out noisy test split."""
    set_deterministic()
    train, test = synth_micro_corpus(desk, seed)
    data = to_paired(train, desk.n_speakers)
    model = getattr(ModelConfig, desk.model)(desk.n_speakers)

    indep = desk.stage("step1_independent", desk.independent_epochs, seed)
    ck1 = train_step1_independent(data, indep, model)
    ck1 = finetune_step1_joint(ck1, data, desk.stage("step1_joint", desk.joint_epochs, seed))
    ck2 = train_step2(ck1, data, desk.stage("step2", desk.step2_epochs, seed))
    # the baseline gets as many recognizer updates as Step 1 in total
    sid = train_sid_baseline(
        data, desk.stage("sid", desk.independent_epochs + desk.joint_epochs, seed), model
    )

    results = {
        "sid": evaluate_system(sid.build_system(), "sid", test, desk.metrics, seed),
        "step1": evaluate_system(ck1.build_system(), "step1", test, desk.metrics, seed),
        "step2": evaluate_system(ck2.build_system(), "step2", test, desk.metrics, seed),
    }
    results["history"] = {"sid": sid.history, "step1": ck1.history, "step2": ck2.history}
    return results
