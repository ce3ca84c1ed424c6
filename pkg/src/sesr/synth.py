"""Synthetic micro-corpus: source-filter "speech" with per-speaker voice
parameters, plus noise / music / babble clips.

Speakers differ in pitch range, vocal-tract length (formant scaling),
spectral tilt, formant bandwidth and a fixed high resonance.  Utterances are
random syllable strings (fricative/burst onset + vowel) with pauses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE, Waveform, write_wav
from .mixing import CATEGORIES

VOWELS = np.array(
    [
        (730, 1090, 2440),
        (270, 2290, 3010),
        (300, 870, 2240),
        (530, 1840, 2480),
        (570, 840, 2410),
        (660, 1720, 2410),
        (440, 1020, 2240),
        (490, 1350, 1690),
    ],
    dtype=np.float64,
)
FORMANT_LEVELS = (1.0, 0.5, 0.35)


@dataclass(frozen=True)
class Voice:
    f0: float
    tract: float  # formant scale
    tilt: float  # source lowpass pole
    bandwidth: float
    extra_formant: float
    breath: float


def random_voice(rng: np.random.Generator) -> Voice:
    female = rng.random() < 0.5
    return Voice(
        f0=float(rng.uniform(170, 250) if female else rng.uniform(85, 140)),
        tract=float(rng.uniform(1.05, 1.2) if female else rng.uniform(0.85, 1.0)),
        tilt=float(rng.uniform(0.85, 0.97)),
        bandwidth=float(rng.uniform(50, 130)),
        extra_formant=float(rng.uniform(2800, 4600)),
        breath=float(rng.uniform(0.02, 0.15)),
    )


def _resonator(x, freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    # unit gain at the resonance peak
    gain = abs(np.polyval(a[::-1], np.exp(-1j * theta)))
    return signal.lfilter([gain], a, x)


def _syllable(voice: Voice, rng, sr):
    n_vowel = int(sr * rng.uniform(0.09, 0.22))
    n_cons = int(sr * rng.uniform(0.02, 0.07))

    f0 = voice.f0 * rng.uniform(0.85, 1.15) * np.linspace(1.0, rng.uniform(0.85, 1.1), n_vowel)
    f0 *= 1 + 0.01 * rng.standard_normal(n_vowel).cumsum() / np.sqrt(np.arange(1, n_vowel + 1))
    phase = np.cumsum(f0 / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    source = signal.lfilter([1.0], [1.0, -voice.tilt], pulses)
    source = signal.lfilter([1.0], [1.0, -voice.tilt], source)
    source = np.diff(source, prepend=0.0)  # lip radiation
    source = source / (np.std(source) + 1e-9) + voice.breath * rng.standard_normal(n_vowel)

    formants = VOWELS[rng.integers(len(VOWELS))] * voice.tract
    vowel = np.zeros(n_vowel)
    for k, fk in enumerate(formants):
        vowel += _resonator(source, fk, voice.bandwidth * (1 + 0.5 * k), sr) * FORMANT_LEVELS[k]
    vowel += 0.15 * _resonator(source, voice.extra_formant, 200, sr)
    vowel *= signal.windows.tukey(n_vowel, 0.5)

    noise = rng.standard_normal(n_cons)
    lo = rng.uniform(1500, 3500) * voice.tract
    sos = signal.butter(2, [lo, min(lo * 2.0, sr / 2 - 100)], btype="band", fs=sr, output="sos")
    cons = signal.sosfilt(sos, noise) * np.hanning(n_cons) * rng.uniform(0.3, 0.8)
    overlap = n_cons // 2
    out = np.concatenate([cons, np.zeros(n_vowel - overlap)])
    out[n_cons - overlap :] += vowel
    return out


def synth_utterance(voice: Voice, duration: float, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> Waveform:
    n = int(round(duration * sr))
    out = np.zeros(n)
    pos = int(sr * rng.uniform(0.02, 0.1))
    while pos < n:
        # words of 2-4 coarticulated syllables, short pauses between words
        for _ in range(rng.integers(2, 5)):
            syl = _syllable(voice, rng, sr)
            end = min(n, pos + len(syl))
            out[pos:end] += syl[: end - pos]
            pos = end - int(sr * rng.uniform(0.02, 0.04))
        pos += int(sr * rng.uniform(0.06, 0.15))
    out *= 0.1 / (np.sqrt(np.mean(out**2)) + 1e-12)
    return Waveform(out, sr)


def synth_noise(category: str, duration: float, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> Waveform:
    n = int(round(duration * sr))
    t = np.arange(n) / sr
    if category == "noise":
        white = rng.standard_normal(n)
        color = rng.uniform(0.0, 0.99)
        x = signal.lfilter([1.0], [1.0, -color], white)
        x /= np.std(x)
        if rng.random() < 0.5:  # dial tone / beeps
            tone = np.sin(2 * np.pi * 350 * t) + np.sin(2 * np.pi * 440 * t)
            gate = (np.sin(2 * np.pi * rng.uniform(0.5, 3) * t) > 0).astype(float)
            x += rng.uniform(0.3, 1.0) * tone * gate
        if rng.random() < 0.5:  # fax-like chirps
            f = rng.uniform(1000, 3000) + 500 * np.sin(2 * np.pi * rng.uniform(2, 8) * t)
            x += rng.uniform(0.2, 0.8) * np.sin(2 * np.pi * np.cumsum(f) / sr)
    elif category == "music":
        x = np.zeros(n)
        tempo = rng.uniform(0.15, 0.5)
        n_voices = rng.integers(1, 4)
        for _ in range(n_voices):
            harmonics = rng.uniform(0.1, 1.0, size=rng.integers(3, 9))
            pos = 0.0
            while pos < duration:
                note = 110 * 2 ** (rng.integers(0, 36) / 12)
                length = tempo * rng.integers(1, 4)
                i0, i1 = int(pos * sr), min(n, int((pos + length) * sr))
                tt = t[i0:i1] - pos
                env = np.exp(-tt / (length * rng.uniform(0.3, 1.0)))
                for h, amp in enumerate(harmonics, 1):
                    if note * h < sr / 2:
                        x[i0:i1] += amp / h * np.sin(2 * np.pi * note * h * tt) * env
                pos += length
        if rng.random() < 0.6:
            beat = int(tempo * sr)
            for i0 in range(0, n, beat):
                m = min(n - i0, int(0.05 * sr))
                x[i0 : i0 + m] += 0.5 * rng.standard_normal(m) * np.exp(-np.arange(m) / (0.01 * sr))
    elif category == "babble":
        x = np.zeros(n)
        for _ in range(rng.integers(3, 7)):
            x += synth_utterance(random_voice(rng), duration, rng, sr).samples
    else:
        raise ValueError(f"unknown noise category {category!r}")
    x = x * 0.1 / (np.sqrt(np.mean(x**2)) + 1e-12)
    return Waveform(x, sr)


def make_corpus(
    root,
    n_speakers: int = 4,
    utts_per_speaker: int = 8,
    duration: float = 3.0,
    noise_per_category: int = 3,
    noise_duration: float = 6.0,
    seed: int = 0,
) -> Path:
    """Write ``root/clean/spkNN/uttMM.wav`` and ``root/noise/<category>/NN.wav``."""
    root = Path(root)
    rng = np.random.default_rng([seed, 7])
    for s in range(n_speakers):
        voice = random_voice(rng)
        for u in range(utts_per_speaker):
            write_wav(root / "clean" / f"spk{s:02d}" / f"utt{u:02d}.wav", synth_utterance(voice, duration, rng))
    for category in CATEGORIES:
        for k in range(noise_per_category):
            write_wav(root / "noise" / category / f"{k:02d}.wav", synth_noise(category, noise_duration, rng))
    return root
