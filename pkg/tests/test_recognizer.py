import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import ce_oracle, finite_difference_grad, relative_error
from sesr.recognizer import (
    RecognizerConfig,
    RecognizerNet,
    ce_loss,
    cosine_score,
    load_embedding,
    save_embedding,
)


def test_output_shapes():
    torch.manual_seed(0)
    net = RecognizerNet(RecognizerConfig(4))
    out = net(torch.rand(2, 300, 257))
    assert out.logits.shape == (2, 4)
    assert out.embedding.shape == (2, 256)
    probs = torch.softmax(out.logits, dim=1)
    assert torch.allclose(probs.sum(dim=1), torch.ones(2), atol=1e-6)


def test_resnet20_layout():
    net = RecognizerNet(RecognizerConfig(4))
    convs = [m for m in net.modules() if isinstance(m, torch.nn.Conv2d) and m.kernel_size == (3, 3)]
    assert len(convs) == 19  # + the final dense layers makes 20 weighted layers along the main path
    assert [b.conv1.out_channels for b in net.blocks] == [16] * 3 + [32] * 3 + [64] * 3


def test_eval_mode_deterministic():
    torch.manual_seed(1)
    net = RecognizerNet(RecognizerConfig(4, widths=(4, 8, 8))).eval()
    x = torch.rand(3, 50, 257)
    with torch.no_grad():
        a, b = net(x), net(x)
    assert torch.equal(a.logits, b.logits) and torch.equal(a.embedding, b.embedding)


def test_rejects_bad_rank():
    net = RecognizerNet(RecognizerConfig(4, widths=(4, 8, 8)))
    with pytest.raises(ValueError):
        net(torch.rand(50, 257))


# --- cross entropy ------------------------------------------------------------------


def test_ce_uniform_logits():
    assert ce_loss(torch.zeros(1, 4), torch.tensor([2])).item() == pytest.approx(math.log(4), abs=1e-6)
    assert round(math.log(4), 4) == 1.3863


def test_ce_confident_prediction():
    logits = torch.tensor([[50.0, 0.0, 0.0]])
    assert ce_loss(logits, torch.tensor([0])).item() < 1e-12
    assert ce_loss(logits, torch.tensor([1])).item() == pytest.approx(50.0, rel=1e-6)


def test_ce_three_sample_oracle():
    logits = np.array([[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0], [0.2, 0.2, 0.2]])
    targets = [1, 0, 2]
    got = ce_loss(torch.tensor(logits), torch.tensor(targets)).item()
    assert abs(got - ce_oracle(logits.tolist(), targets)) < 1e-10


def test_ce_matches_oracle_500_cases():
    rng = np.random.default_rng(0)
    for _ in range(500):
        b, m = int(rng.integers(1, 6)), int(rng.integers(2, 12))
        logits = rng.normal(size=(b, m)) * 5
        targets = rng.integers(0, m, size=b)
        got = ce_loss(torch.tensor(logits), torch.tensor(targets)).item()
        assert abs(got - ce_oracle(logits.tolist(), targets.tolist())) < 1e-10


def test_ce_sum_reduction():
    rng = np.random.default_rng(1)
    logits = torch.tensor(rng.normal(size=(5, 3)))
    t = torch.tensor([0, 1, 2, 1, 0])
    assert ce_loss(logits, t, "sum").item() == pytest.approx(5 * ce_loss(logits, t).item(), rel=1e-12)
    with pytest.raises(ValueError):
        ce_loss(logits, t, "median")


@pytest.mark.parametrize("target", [3, -1])
def test_ce_target_out_of_range(target):
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(1, 3), torch.tensor([target]))


@settings(max_examples=100, deadline=None, derandomize=True)
@given(arrays(np.float64, (3, 5), elements=st.floats(-20, 20)), st.floats(-30, 30))
def test_ce_shift_invariant(logits, shift):
    t = torch.tensor([0, 2, 4])
    a = ce_loss(torch.tensor(logits), t).item()
    b = ce_loss(torch.tensor(logits + shift), t).item()
    assert a == pytest.approx(b, abs=1e-9)
    assert a >= 0


# --- gradients ----------------------------------------------------------------------


def test_toy_head_gradient():
    torch.manual_seed(2)
    head = torch.nn.Sequential(torch.nn.Linear(6, 5), torch.nn.ReLU(), torch.nn.Linear(5, 4)).double()
    x = torch.randn(7, 6, dtype=torch.float64)
    t = torch.randint(0, 4, (7,))
    params = list(head.parameters())

    def loss():
        return ce_loss(head(x), t)

    loss().backward()
    analytic = [p.grad.clone() for p in params]
    assert relative_error(analytic, finite_difference_grad(loss, params)) < 1e-6


def test_resnet_gradient():
    torch.manual_seed(3)
    net = RecognizerNet(RecognizerConfig(3, widths=(2, 3, 4), blocks_per_stage=1, emb_dim=5)).double()
    x = torch.rand(4, 8, 9, dtype=torch.float64)
    t = torch.tensor([0, 1, 2, 1])
    params = list(net.parameters())

    def loss():
        return ce_loss(net(x).logits, t)

    loss().backward()
    analytic = [p.grad.clone() for p in params]
    assert relative_error(analytic, finite_difference_grad(loss, params)) < 1e-4


def test_overfits_tiny_set():
    torch.manual_seed(4)
    g = torch.Generator().manual_seed(5)
    x = torch.rand(8, 32, 33, generator=g)
    t = torch.arange(8) % 4
    net = RecognizerNet(RecognizerConfig(4, widths=(4, 8, 8), blocks_per_stage=1, emb_dim=16))
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    for _ in range(150):
        opt.zero_grad()
        ce_loss(net(x).logits, t).backward()
        opt.step()
    net.eval()
    with torch.no_grad():
        assert torch.equal(net(x).logits.argmax(1), t)


# --- cosine scoring and embedding export ---------------------------------------------


@settings(max_examples=200, deadline=None, derandomize=True)
@given(
    arrays(np.float64, 8, elements=st.floats(-100, 100)),
    arrays(np.float64, 8, elements=st.floats(-100, 100)),
    st.floats(1e-3, 1e3),
)
def test_cosine_properties(a, b, scale):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    s = cosine_score(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(cosine_score(b, a), abs=1e-12)
    assert s == pytest.approx(cosine_score(a * scale, b), abs=1e-9)
    assert cosine_score(a, a) == pytest.approx(1.0, abs=1e-12)


def test_cosine_errors():
    with pytest.raises(ValueError, match="degenerate"):
        cosine_score(np.zeros(4), np.ones(4))
    with pytest.raises(ValueError):
        cosine_score(np.ones(4), np.ones(5))
    assert cosine_score([1, 0], [-1, 0]) == -1.0
    assert cosine_score([1, 0], [0, 1]) == 0.0


def test_embedding_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(size=256).astype(np.float32)
    p = tmp_path / "emb" / "u1.f32"
    save_embedding(p, v, "u1", "step2")
    w, meta = load_embedding(p)
    assert np.array_equal(v, w)
    assert meta == {"utt_id": "u1", "dim": 256, "stage": "step2"}
    assert p.stat().st_size == 256 * 4
