"""Identification, verification and intelligibility metrics."""

from __future__ import annotations

import json
import math
import os
import re
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

EPS = np.finfo(np.float64).eps


# --- identification ---------------------------------------------------------------


def topk_accuracy(logits, targets, k: int) -> float:
    """Fraction of rows whose target is among the ``k`` largest logits.

    Ties are broken toward the lower class index: a class outranks the
    target if its logit is larger, or equal with a smaller index.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("empty batch")
    n, m = logits.shape
    if not 1 <= k <= m:
        raise ValueError(f"k={k} outside [1, {m}]")
    target_logit = logits[np.arange(n), targets][:, None]
    cls = np.arange(m)[None, :]
    above = (logits > target_logit) | ((logits == target_logit) & (cls < targets[:, None]))
    return float(np.mean(above.sum(axis=1) < k))


# --- verification -----------------------------------------------------------------


@dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # bool, True = same speaker

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=bool).ravel()
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")
        if self.labels.all() or not self.labels.any():
            raise ValueError("need both target and nontarget trials")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite score")


def operating_points(s: ScoreSet):
    """(thresholds, P_fa, P_miss) for the rule ``accept iff score >= threshold``,
    at every distinct score and at +inf (reject everything)."""
    thresholds = np.append(np.unique(s.scores), np.inf)
    tar = np.sort(s.scores[s.labels])
    non = np.sort(s.scores[~s.labels])
    p_miss = np.searchsorted(tar, thresholds, side="left") / len(tar)
    p_fa = (len(non) - np.searchsorted(non, thresholds, side="left")) / len(non)
    return thresholds, p_fa, p_miss


def eer(s: ScoreSet) -> float:
    """Equal error rate, linearly interpolated between the two operating
    points where P_fa - P_miss changes sign."""
    _, p_fa, p_miss = operating_points(s)
    d = p_fa - p_miss
    i = int(np.argmax(d <= 0))  # d[0] = 1 and d[-1] = -1 so 0 < i
    t = d[i - 1] / (d[i - 1] - d[i])
    return float(p_fa[i - 1] + t * (p_fa[i] - p_fa[i - 1]))


def min_dcf(s: ScoreSet, p_target: float, c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost."""
    if not 0.0 < p_target < 1.0:
        raise ValueError("p_target must lie in (0, 1)")
    _, p_fa, p_miss = operating_points(s)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(np.min(cost) / norm)


def avg_dcf(s: ScoreSet) -> float:
    return (min_dcf(s, 0.01) + min_dcf(s, 0.001)) / 2.0


def read_trials(path) -> list[tuple[str, str, bool]]:
    trials = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{n}: expected 'label utt_a utt_b'")
        trials.append((parts[1], parts[2], parts[0] == "1"))
    return trials


def write_trials(path, trials) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for a, b, same in trials:
            f.write(f"{int(bool(same))} {a} {b}\n")


def make_trials(utt_speakers: dict, rng: np.random.Generator, nontarget_per_utt: int = 2):
    """Every same-speaker pair, plus ``nontarget_per_utt`` random cross-speaker
    partners per utterance."""
    utts = sorted(utt_speakers)
    trials = []
    for i, a in enumerate(utts):
        for b in utts[i + 1 :]:
            if utt_speakers[a] == utt_speakers[b]:
                trials.append((a, b, True))
        others = [b for b in utts if utt_speakers[b] != utt_speakers[a]]
        if others:
            for j in rng.choice(len(others), min(nontarget_per_utt, len(others)), replace=False):
                trials.append((a, others[j], False))
    return trials


# --- STOI ------------------------------------------------------------------------
# Taal et al. reference parameters
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0


def third_octave_bands(fs=STOI_FS, nfft=STOI_NFFT, num_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary (bands x bins) matrix grouping FFT bins into 1/3-octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands)
    low = min_freq * 2.0 ** ((2 * k - 1) / 6)
    high = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        lo = int(np.argmin((f - low[i]) ** 2))
        hi = int(np.argmin((f - high[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _frames(x, framelen, hop):
    w = np.hanning(framelen + 2)[1:-1]
    starts = range(0, len(x) - framelen, hop)
    return np.array([w * x[i : i + framelen] for i in starts])


def _overlap_add(frames, hop):
    n, framelen = frames.shape
    out = np.zeros((n - 1) * hop + framelen)
    for i, fr in enumerate(frames):
        out[i * hop : i * hop + framelen] += fr
    return out


def remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE, framelen=STOI_FRAME, hop=STOI_FRAME // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest clean frame."""
    xf, yf = _frames(x, framelen, hop), _frames(y, framelen, hop)
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + EPS)
    keep = energy > energy.max() - dyn_range
    return _overlap_add(xf[keep], hop), _overlap_add(yf[keep], hop)


def _band_envelopes(x, obm):
    frames = _frames(x, STOI_FRAME, STOI_FRAME // 2)
    spec = np.fft.rfft(frames, n=STOI_NFFT, axis=1)
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)  # (bands, frames)


def stoi(clean, processed, sample_rate: int = 16000) -> float:
    """Short-time objective intelligibility of ``processed`` w.r.t. ``clean``."""
    x = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    y = np.asarray(getattr(processed, "samples", processed), dtype=np.float64)
    sample_rate = getattr(clean, "sample_rate", sample_rate)
    if x.shape != y.shape:
        raise ValueError("clean and processed signals differ in length")
    if not np.any(x):
        raise ValueError("clean signal is silent")
    if sample_rate != STOI_FS:
        g = math.gcd(sample_rate, STOI_FS)
        x = resample_poly(x, STOI_FS // g, sample_rate // g)
        y = resample_poly(y, STOI_FS // g, sample_rate // g)

    x, y = remove_silent_frames(x, y)
    obm = third_octave_bands()
    x_tob, y_tob = _band_envelopes(x, obm), _band_envelopes(y, obm)
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise ValueError(
            f"signal too short for STOI: {n_frames} active frames < {STOI_SEGMENT}"
        )

    # (segments, bands, N) sliding windows over frames
    xs = np.lib.stride_tricks.sliding_window_view(x_tob, STOI_SEGMENT, axis=1).transpose(1, 0, 2)
    ys = np.lib.stride_tricks.sliding_window_view(y_tob, STOI_SEGMENT, axis=1).transpose(1, 0, 2)

    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (
        np.linalg.norm(ys, axis=2, keepdims=True) + EPS
    )
    clip = 10 ** (-STOI_BETA / 20)
    yp = np.minimum(ys * alpha, xs * (1 + clip))

    xs = xs - xs.mean(axis=2, keepdims=True)
    yp = yp - yp.mean(axis=2, keepdims=True)
    xs = xs / (np.linalg.norm(xs, axis=2, keepdims=True) + EPS)
    yp = yp / (np.linalg.norm(yp, axis=2, keepdims=True) + EPS)
    return float(np.sum(xs * yp) / (xs.shape[0] * xs.shape[1]))


# --- PESQ (external) ---------------------------------------------------------------

PESQ_ENV = "SESR_PESQ_CMD"


class PesqError(RuntimeError):
    pass


def pesq_external(clean_path, processed_path, command: str | None = None) -> float | None:
    """Score with an external PESQ tool; ``None`` when no tool is configured.

    ``command`` (or ``$SESR_PESQ_CMD``) is a shell-style template with
    ``{ref}`` and ``{deg}`` placeholders; the last number printed on stdout
    is taken as the score.
    """
    command = command or os.environ.get(PESQ_ENV)
    if not command:
        return None
    argv = [a.format(ref=str(clean_path), deg=str(processed_path)) for a in shlex.split(command)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=600)
    except OSError as exc:
        raise PesqError(f"could not run PESQ tool: {exc}") from exc
    if proc.returncode != 0:
        raise PesqError(f"PESQ tool exited {proc.returncode}: {proc.stderr.strip()}")
    numbers = re.findall(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?", proc.stdout)
    if not numbers:
        raise PesqError(f"no score in PESQ output: {proc.stdout!r}")
    return float(numbers[-1])


# --- reports ----------------------------------------------------------------------


def format_table(rows: list[dict], columns: list[str], header: list[str] | None = None) -> str:
    """Aligned text table; ``rows`` map column name -> value."""
    header = header or columns

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}" if abs(v) < 1 else f"{v:.2f}"
        return "" if v is None else str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    line = "-+-".join("-" * w for w in widths)
    out = [" | ".join(h.ljust(w) for h, w in zip(header, widths)), line]
    out += [" | ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(out)


def write_results_json(path, records) -> None:
    """Records shaped ``{metric, condition: {noise_type, snr}, value}``."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(list(records), indent=2, sort_keys=True))
