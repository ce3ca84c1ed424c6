"""Waveform <-> spectrogram frontend.

Spectrograms are linear STFT magnitudes, 25 ms Hann window, 10 ms hop,
512-point FFT (257 one-sided bins), no normalization of any kind.  The
signal is padded by ``(win - hop) / 2`` samples on both sides so that a
signal of ``n`` samples yields exactly ``n // hop`` frames: 3.0 s at
16 kHz gives the (300, 257) training crop.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SAMPLE_RATE = 16000


class UtteranceTooShort(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    window_fn: str = "hann"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.fft_size < self.win_length:
            raise ValueError(
                f"fft_size {self.fft_size} shorter than window ({self.win_length} samples)"
            )
        if self.hop_length > self.win_length or self.hop_length < 1:
            raise ValueError("hop must be in [1, window length]")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def pad(self) -> tuple[int, int]:
        extra = self.win_length - self.hop_length
        return extra // 2, extra - extra // 2

    def window(self) -> np.ndarray:
        return signal.get_window(self.window_fn, self.win_length, fftbins=True)

    def n_frames(self, n_samples: int) -> int:
        left, right = self.pad
        return 1 + (n_samples + left + right - self.win_length) // self.hop_length


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    values: np.ndarray  # (T, F) complex
    config: StftConfig = field(default_factory=StftConfig)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Spectrogram:
    values: np.ndarray  # (T, F) nonnegative
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"spectrogram must be (T>=1, F), got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape


def stft(w: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig(sample_rate=w.sample_rate)
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform at {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    if len(w) < cfg.win_length:
        raise UtteranceTooShort(
            f"utterance too short: {len(w)} samples < one window ({cfg.win_length})"
        )
    left, right = cfg.pad
    x = np.pad(w.samples, (left, right))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[:: cfg.hop_length]
    values = np.fft.rfft(frames * cfg.window(), n=cfg.fft_size, axis=-1)
    return ComplexSpectrogram(values, cfg)


def magnitude(c: ComplexSpectrogram) -> Spectrogram:
    return Spectrogram(np.abs(c.values), c.config)


def istft(
    mag: Spectrogram,
    phase_from: ComplexSpectrogram,
    cfg: StftConfig | None = None,
    length: int | None = None,
) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`.

    Frames are resynthesized from ``mag * exp(i * angle(phase_from))``,
    multiplied by the analysis window and normalized by the summed squared
    window, which inverts the analysis exactly wherever that sum is nonzero.
    ``length`` defaults to ``T * hop``.
    """
    cfg = cfg or phase_from.config
    if mag.shape != phase_from.shape:
        raise ValueError(f"shape mismatch: magnitude {mag.shape} vs phase {phase_from.shape}")
    if mag.shape[1] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} bins, got {mag.shape[1]}")
    n_frames = mag.shape[0]
    hop, win = cfg.hop_length, cfg.win_length
    length = n_frames * hop if length is None else length

    spec = mag.values * np.exp(1j * np.angle(phase_from.values))
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[:, :win]
    window = cfg.window()

    left, right = cfg.pad
    total = (n_frames - 1) * hop + win
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop : i * hop + win] += frames[i] * window
        norm[i * hop : i * hop + win] += window**2
    covered = norm > 1e-10
    out[covered] /= norm[covered]
    out[~covered] = 0.0

    out = out[left:]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return Waveform(out[:length], cfg.sample_rate)


def crop_start(n_frames: int, target_T: int, rng: np.random.Generator | None) -> int:
    """Start frame of the crop window; ``rng=None`` selects the center crop."""
    if n_frames <= target_T:
        return 0
    if rng is None:
        return (n_frames - target_T) // 2
    return int(rng.integers(0, n_frames - target_T + 1))


def crop_or_pad(
    s: Spectrogram, target_T: int = 300, rng: np.random.Generator | None = None
) -> Spectrogram:
    """Random crop (with ``rng``) or center crop (without) to ``target_T`` frames;
    shorter inputs are zero-padded at the end."""
    if target_T < 1:
        raise ValueError("target_T must be >= 1")
    n = s.shape[0]
    if n == target_T:
        return s
    if n < target_T:
        pad = np.zeros((target_T - n, s.shape[1]), dtype=s.values.dtype)
        return Spectrogram(np.concatenate([s.values, pad]), s.config)
    start = crop_start(n, target_T, rng)
    return Spectrogram(s.values[start : start + target_T], s.config)


# --- ingestion / export ---------------------------------------------------------


def resample(w: Waveform, sample_rate: int) -> Waveform:
    if w.sample_rate == sample_rate:
        return w
    g = gcd(w.sample_rate, sample_rate)
    y = signal.resample_poly(w.samples, sample_rate // g, w.sample_rate // g)
    return Waveform(y, sample_rate)


def read_wav(path, sample_rate: int | None = SAMPLE_RATE, downmix: bool = True) -> Waveform:
    """Load PCM16/PCM32/float WAV as float64 in [-1, 1].  Stereo is averaged
    when ``downmix`` is set, rejected otherwise.  Resamples to ``sample_rate``
    unless it is None."""
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        if not downmix:
            raise ValueError(f"{path}: expected mono, got {x.shape[1]} channels")
        x = x.mean(axis=1)
    w = Waveform(x, sr)
    return resample(w, sample_rate) if sample_rate else w


def write_wav(path, w: Waveform) -> None:
    """Float32 WAV; no clipping, mixtures may exceed [-1, 1]."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, w.samples.astype(np.float32))


def save_spectrogram(path, s: Spectrogram, **meta) -> None:
    """Raw little-endian float32 matrix at ``path`` plus ``path + '.json'`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    s.values.astype("<f4").tofile(path)
    sidecar = {"shape": list(s.shape), "dtype": "float32", "config": asdict(s.config), **meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_spectrogram(path) -> Spectrogram:
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    values = np.fromfile(path, dtype="<f4").reshape(sidecar["shape"])
    return Spectrogram(values, StftConfig(**sidecar["config"]))


def plot_spectrograms(panels, path, titles=None) -> None:
    """One heatmap per panel (log-compressed for display only), stacked vertically."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = list(panels)
    titles = titles or [""] * len(panels)
    fig, axes = plt.subplots(len(panels), 1, figsize=(6, 2.2 * len(panels)), squeeze=False)
    for ax, s, title in zip(axes[:, 0], panels, titles):
        values = s.values if isinstance(s, Spectrogram) else np.asarray(s)
        ax.imshow(
            20 * np.log10(values.T + 1e-6), origin="lower", aspect="auto", cmap="magma"
        )
        ax.set_title(title, fontsize=9)
        ax.set_ylabel("bin")
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
