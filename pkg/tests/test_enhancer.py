import numpy as np
import pytest
import torch

from oracles import finite_difference_grad, mae_oracle, relative_error
from sesr.enhancer import EnhancerConfig, EnhancerNet, mae_loss, warm_start_from

TABLE1 = [
    ("encoder", (300, 129, 16)),
    ("encoder", (150, 65, 32)),
    ("encoder", (75, 33, 64)),
    ("encoder", (38, 17, 128)),
    ("encoder", (19, 5, 256)),
    ("reshape", (19, 1280)),
    ("concat", (19, 1536)),
    ("dense", (19, 512)),
    ("bigru", (19, 1280)),
    ("reshape", (19, 5, 256)),
]


@pytest.fixture(scope="module")
def se2():
    torch.manual_seed(0)
    return EnhancerNet(EnhancerConfig(emb_dim=256))


def test_shape_trace_se2(se2):
    trace = []
    with torch.no_grad():
        y = se2(torch.rand(1, 300, 257), torch.randn(1, 256), trace=trace)
    assert trace == TABLE1
    assert y.shape == (1, 300, 257)
    assert 1536 - 1280 == 256


def test_shape_trace_se1_skips_concat():
    net = EnhancerNet(EnhancerConfig())
    trace = []
    with torch.no_grad():
        net(torch.rand(1, 300, 257), trace=trace)
    assert trace == [row for row in TABLE1 if row[0] != "concat"]
    assert net.dense.in_features == 1280


def test_se1_se2_differ_only_at_dense_input(se2):
    se1 = EnhancerNet(EnhancerConfig())
    a, b = se1.state_dict(), se2.state_dict()
    assert a.keys() == b.keys()
    diff = [k for k in a if a[k].shape != b[k].shape]
    assert diff == ["dense.weight"]
    assert b["dense.weight"].shape[1] - a["dense.weight"].shape[1] == 256


def test_zero_input_finite_nonnegative(se2):
    with torch.no_grad():
        y = se2(torch.zeros(2, 300, 257), torch.zeros(2, 256))
    assert torch.isfinite(y).all() and (y >= 0).all()


def test_output_nonnegative_random_inputs():
    net = EnhancerNet(EnhancerConfig(features=(4, 4, 4, 8, 8), dense=16))
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            y = net(torch.randn(2, 37, 257, generator=g) * 10)
        assert (y >= 0).all() and y.shape == (2, 37, 257)


def test_embedding_broadcast_over_time():
    torch.manual_seed(1)
    net = EnhancerNet(EnhancerConfig(features=(4, 4, 4, 8, 8), dense=16, emb_dim=6))
    x = torch.rand(1, 64, 257)
    e = torch.randn(1, 6)
    captured = {}

    def grab(module, inp, out):
        captured["in"] = inp[0]

    net.dense.register_forward_hook(grab)
    with torch.no_grad():
        net(x, e)
    tail = captured["in"][0, :, -6:]
    assert torch.equal(tail, e.expand_as(tail))


@pytest.mark.parametrize(
    "x_shape, emb_shape",
    [((1, 300, 256), (1, 256)), ((300, 257), (1, 256)), ((1, 300, 257), (1, 255)), ((1, 300, 257), None)],
)
def test_input_validation(se2, x_shape, emb_shape):
    emb = None if emb_shape is None else torch.zeros(emb_shape)
    with pytest.raises(ValueError):
        se2(torch.zeros(x_shape), emb)


def test_se1_rejects_embedding():
    net = EnhancerNet(EnhancerConfig(features=(4, 4, 4, 8, 8), dense=16))
    with pytest.raises(ValueError):
        net(torch.zeros(1, 20, 257), torch.zeros(1, 256))


def test_warm_start_copies_se1():
    torch.manual_seed(2)
    cfg = EnhancerConfig(features=(4, 4, 4, 8, 8), dense=16)
    se1 = EnhancerNet(cfg)
    se2 = EnhancerNet(cfg.with_embedding(8))
    warm_start_from(se2, se1)
    for name, v in se1.state_dict().items():
        w = se2.state_dict()[name]
        if name == "dense.weight":
            assert torch.equal(w[:, : v.shape[1]], v)
            assert w[:, v.shape[1] :].abs().max() < 0.01
        else:
            assert torch.equal(w, v)
    # a zero embedding reproduces SE1 exactly
    x = torch.rand(2, 30, 257)
    with torch.no_grad():
        out1 = se1(x)
        out2 = se2(x, torch.zeros(2, 8))
    assert torch.allclose(out1, out2, atol=1e-6)


# --- MAE loss ----------------------------------------------------------------------


def test_mae_examples():
    z = torch.zeros(3, 4, dtype=torch.float64)
    assert mae_loss(z, z).item() == 0.0
    assert mae_loss(torch.ones(3, 4), torch.zeros(3, 4)).item() == 1.0
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 4)), rng.random((3, 4))
    assert mae_loss(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(mae_oracle(a, b), abs=1e-12)


def test_mae_matches_oracle_500_cases():
    rng = np.random.default_rng(1)
    for _ in range(500):
        t, f = rng.integers(1, 7, size=2)
        a, b = rng.normal(size=(t, f)) * 3, rng.normal(size=(t, f)) * 3
        got = mae_loss(torch.tensor(a), torch.tensor(b)).item()
        assert abs(got - mae_oracle(a.tolist(), b.tolist())) < 1e-10


def test_mae_shape_mismatch():
    with pytest.raises(ValueError):
        mae_loss(torch.zeros(3, 4), torch.zeros(4, 3))


# --- gradients ----------------------------------------------------------------------


@pytest.mark.parametrize("emb_dim", [0, 4])
def test_gradient_matches_finite_differences(emb_dim):
    torch.manual_seed(3)
    cfg = EnhancerConfig(features=(8, 8), strides=((1, 2), (2, 2)), dense=16, n_bins=17, emb_dim=emb_dim)
    net = EnhancerNet(cfg).double()
    g = torch.Generator().manual_seed(4)
    x = torch.rand(2, 8, 17, generator=g, dtype=torch.float64)
    clean = torch.rand(2, 8, 17, generator=g, dtype=torch.float64)
    emb = torch.randn(2, emb_dim, generator=g, dtype=torch.float64) if emb_dim else None
    params = list(net.parameters())

    def loss():
        return mae_loss(clean, net(x, emb))

    net.zero_grad()
    loss().backward()
    analytic = [p.grad.clone() for p in params]
    numeric = finite_difference_grad(loss, params)
    assert relative_error(analytic, numeric) < 1e-4


def test_one_adam_step_decreases_mae():
    cfg = EnhancerConfig(features=(4, 4, 4, 8, 8), dense=16)
    drops = []
    for seed in range(5):
        torch.manual_seed(seed)
        net = EnhancerNet(cfg)
        g = torch.Generator().manual_seed(100 + seed)
        noisy = torch.rand(1, 64, 257, generator=g) * 2
        clean = torch.rand(1, 64, 257, generator=g)
        opt = torch.optim.Adam(net.parameters(), lr=1e-3)
        before = mae_loss(clean, net(noisy))
        opt.zero_grad()
        before.backward()
        opt.step()
        with torch.no_grad():
            after = mae_loss(clean, net(noisy))
        drops.append(before.item() - after.item())
    assert np.mean(drops) > 0
