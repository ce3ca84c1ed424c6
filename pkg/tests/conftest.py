import numpy as np
import pytest
import torch

from sesr.enhancer import EnhancerConfig
from sesr.recognizer import RecognizerConfig
from sesr.training import ModelConfig, PairedData

torch.set_num_threads(1)


def tiny_model(n_speakers=3, n_bins=257) -> ModelConfig:
    return ModelConfig(
        EnhancerConfig(features=(4, 4, 4, 8, 8), dense=16, n_bins=n_bins),
        RecognizerConfig(n_speakers, widths=(2, 4, 4), blocks_per_stage=1, emb_dim=8, stem_stride=(2, 2)),
    )


def toy_data(n_speakers=3, per_speaker=4, frames=40, n_bins=257, seed=0) -> PairedData:
    """Random 'clean' spectrograms with a per-speaker spectral signature plus
    additive nonnegative noise."""
    rng = np.random.default_rng(seed)
    signatures = rng.random((n_speakers, n_bins)) * 2
    noisy, clean, spk = [], [], []
    for s in range(n_speakers):
        for _ in range(per_speaker):
            c = signatures[s] * rng.random((frames, 1)) + 0.1 * rng.random((frames, n_bins))
            noisy.append((c + rng.random((frames, n_bins))).astype(np.float32))
            clean.append(c.astype(np.float32))
            spk.append(s)
    return PairedData(noisy, clean, spk, n_speakers)


@pytest.fixture
def toy():
    return toy_data()


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "xfailed", "xpassed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            for name, value in rep.user_properties:
                if name == "criterion":
                    crit, ok, detail = value
                    lines.append((rep.location, f"{'PASS' if ok else 'FAIL'}  {crit}: {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
