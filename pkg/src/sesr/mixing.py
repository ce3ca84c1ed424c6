"""Noise corruption at exact SNRs from a categorized noise corpus.

Power is measured over the whole utterance.  Noise is read circularly from a
random offset, so clips shorter than the speech are looped.  Mixtures are not
clipped.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dsp import Waveform, read_wav
from .seeding import rng_for

log = logging.getLogger(__name__)

CATEGORIES = ("noise", "music", "babble")
DEFAULT_SNRS = (0.0, 5.0, 10.0, 15.0, 20.0)


class SilentNoise(ValueError):
    pass


@dataclass
class NoiseEntry:
    noise_id: str
    category: str
    path: str
    num_samples: int
    sample_rate: int
    waveform: Waveform | None = None

    def load(self) -> Waveform:
        if self.waveform is None:
            self.waveform = read_wav(self.path, self.sample_rate)
        return self.waveform


class NoiseCorpus:
    def __init__(self, entries, min_seconds: float = 1.0):
        self.entries: list[NoiseEntry] = []
        for e in entries:
            if e.category not in CATEGORIES:
                raise ValueError(f"unknown noise category {e.category!r}")
            if e.num_samples < min_seconds * e.sample_rate:
                log.warning("skipping %s: shorter than %.1f s", e.noise_id, min_seconds)
                continue
            self.entries.append(e)
        self.entries.sort(key=lambda e: (e.category, e.noise_id))
        self._by_id = {e.noise_id: e for e in self.entries}

    @classmethod
    def from_directory(cls, root, sample_rate: int = 16000) -> "NoiseCorpus":
        """Expects ``root/<category>/**/*.wav``."""
        root = Path(root)
        entries = []
        for category in CATEGORIES:
            for p in sorted((root / category).rglob("*.wav")):
                w = read_wav(p, sample_rate)
                entries.append(
                    NoiseEntry(
                        f"{category}/{p.relative_to(root / category).with_suffix('')}",
                        category,
                        str(p),
                        len(w),
                        sample_rate,
                        w,
                    )
                )
        return cls(entries)

    def category(self, name: str) -> list[NoiseEntry]:
        found = [e for e in self.entries if e.category == name]
        if not found:
            raise ValueError(f"noise category {name!r} is empty or missing")
        return found

    def __getitem__(self, noise_id: str) -> NoiseEntry:
        return self._by_id[noise_id]

    def __len__(self):
        return len(self.entries)


@dataclass
class MixSpec:
    utt_id: str
    speaker_id: str
    clean_path: str
    noise_path: str
    noise_id: str
    category: str
    snr_db: float
    offset: int
    seed: int

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.offset < 0:
            raise ValueError("offset must be nonnegative")

    @property
    def mix_id(self) -> str:
        return f"{self.utt_id}__{self.category}_{self.snr_db:g}dB"


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def loop_segment(noise: np.ndarray, length: int, offset: int = 0) -> np.ndarray:
    idx = (np.arange(length) + offset) % len(noise)
    return noise[idx]


def noise_gain(p_speech: float, p_noise: float, snr_db: float) -> float:
    if p_noise <= 0.0:
        raise SilentNoise("cannot scale silent noise")
    return math.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0)))


def mix_components(
    speech: Waveform, noise: Waveform, snr_db: float, offset: int = 0
) -> tuple[Waveform, Waveform]:
    """Return ``(mixture, scaled_noise)`` with ``mixture = speech + scaled_noise``."""
    if speech.sample_rate != noise.sample_rate:
        raise ValueError("speech and noise sample rates differ")
    p_speech = power(speech.samples)
    if p_speech <= 0.0:
        raise ValueError("speech has zero power")
    segment = loop_segment(noise.samples, len(speech), offset)
    g = noise_gain(p_speech, power(segment), snr_db)
    scaled = g * segment
    return Waveform(speech.samples + scaled, speech.sample_rate), Waveform(
        scaled, speech.sample_rate
    )


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float, offset: int = 0) -> Waveform:
    return mix_components(speech, noise, snr_db, offset)[0]


def measure_snr(speech: Waveform | np.ndarray, noise_component: Waveform | np.ndarray) -> float:
    """SNR in dB; ``math.inf`` when the noise component is silent."""
    s = getattr(speech, "samples", speech)
    n = getattr(noise_component, "samples", noise_component)
    if len(s) != len(n):
        raise ValueError("speech and noise component lengths differ")
    ps = float(np.sum(np.square(s, dtype=np.float64)))
    pn = float(np.sum(np.square(n, dtype=np.float64)))
    if pn == 0.0:
        return math.inf
    return 10.0 * math.log10(ps / pn)


def build_mixture_manifest(
    clean_rows,
    corpus: NoiseCorpus,
    snrs=DEFAULT_SNRS,
    seed: int = 0,
    categories=CATEGORIES,
    grid: bool = False,
) -> list[MixSpec]:
    """Assign noise to clean utterances.

    By default each utterance draws one (category, entry, snr, offset)
    uniformly.  With ``grid=True`` every utterance is mixed at every
    (category, snr) pair, as needed for per-condition test tables.
    ``clean_rows`` are mappings with ``utt_id``, ``speaker_id`` and ``path``.
    """
    rows = list(clean_rows)
    if not rows:
        raise ValueError("empty clean manifest")
    snrs = [float(s) for s in snrs]
    pools = {c: corpus.category(c) for c in categories}
    rng = rng_for(seed, "mixture-manifest")
    specs = []
    for row in rows:
        if grid:
            conditions = [(c, s) for c in categories for s in snrs]
        else:
            conditions = [(categories[rng.integers(len(categories))], snrs[rng.integers(len(snrs))])]
        for category, snr in conditions:
            pool = pools[category]
            entry = pool[rng.integers(len(pool))]
            specs.append(
                MixSpec(
                    utt_id=row["utt_id"],
                    speaker_id=row["speaker_id"],
                    clean_path=row["path"],
                    noise_path=entry.path,
                    noise_id=entry.noise_id,
                    category=category,
                    snr_db=snr,
                    offset=int(rng.integers(entry.num_samples)),
                    seed=int(seed),
                )
            )
    return specs


def render(spec: MixSpec, speech: Waveform, noise: Waveform) -> tuple[Waveform, Waveform]:
    return mix_components(speech, noise, spec.snr_db, spec.offset)


def write_manifest(path, records) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            d = asdict(r) if hasattr(r, "__dataclass_fields__") else dict(r)
            f.write(json.dumps(d, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def read_mix_manifest(path) -> list[MixSpec]:
    fields = MixSpec.__dataclass_fields__
    return [MixSpec(**{k: v for k, v in d.items() if k in fields}) for d in read_manifest(path)]
