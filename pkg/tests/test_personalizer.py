import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from regenrec.corpus import Dataset, Sequence
from regenrec.personalizer import Personalizer, dataset_weights, gumbel_noise, score, score_batch, write_weights
from regenrec.target_models import TargetModelConfig, build_model, encode_batch

from conftest import rel_err


def zeroed(dim=4, tau=1.0):
    p = Personalizer(dim, tau=tau).double()
    with torch.no_grad():
        for t in p.parameters():
            t.zero_()
    return p


def set_logits(p, a, b):
    with torch.no_grad():
        p.net[-1].weight.zero_()
        p.net[-1].bias.copy_(torch.tensor([a, b], dtype=torch.float64))


def test_symmetric_logits_half():
    p = zeroed()
    assert score(p, torch.zeros(4, dtype=torch.float64)).item() == 0.5


def test_hard_selection_limit():
    p = zeroed(tau=1e-3)
    set_logits(p, 0.2, 0.1)
    assert score(p, torch.randn(4, dtype=torch.float64)).item() == pytest.approx(1.0, abs=1e-12)


def test_gumbel_mean_half():
    p = zeroed()
    g = torch.Generator().manual_seed(0)
    w = score(p, torch.zeros(100_000, 4, dtype=torch.float64), stochastic=True, generator=g)
    assert abs(w.mean().item() - 0.5) <= 0.01


def test_gumbel_noise_finite():
    g = torch.Generator().manual_seed(0)
    for dtype in (torch.float32, torch.float64):
        assert torch.isfinite(gumbel_noise((100_000,), g, dtype)).all()


def test_temperature_validation():
    with pytest.raises(ValueError):
        Personalizer(4, tau=0.0)
    p = Personalizer(4)
    p.tau = -1.0
    with pytest.raises(ValueError):
        score(p, torch.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_sigmoid_form(seed, tau):
    torch.manual_seed(seed)
    p = Personalizer(4, tau=tau).double()
    h = torch.randn(6, 4, dtype=torch.float64)
    z = p.logits(h)
    w = p(h)
    assert torch.allclose(w, torch.sigmoid((z[:, 0] - z[:, 1]) / tau), atol=1e-12)
    assert ((w > 0) & (w < 1)).all()
    second = torch.softmax(z / tau, -1)[:, 1]
    assert torch.allclose(w + second, torch.ones(6, dtype=torch.float64))


@pytest.mark.parametrize("seed", range(5))
def test_score_gradcheck(seed):
    torch.manual_seed(seed)
    p = Personalizer(5, tau=0.7).double()
    h = torch.randn(3, 5, dtype=torch.float64)
    params = list(p.parameters())
    grads = torch.autograd.grad(p(h).sum(), params)
    eps = 1e-6
    for t, g in zip(params, grads):
        flat = t.detach().view(-1)
        numeric = []
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = p(h).sum().item()
                flat[i] = orig - eps
                down = p(h).sum().item()
                flat[i] = orig
            numeric.append((up - down) / (2 * eps))
        assert rel_err(g.reshape(-1).numpy(), numeric) <= 1e-4


def target(seed=0):
    cfg = TargetModelConfig(embed_dim=6, dropout=0.0, max_len=10)
    return build_model(9, cfg, seed, torch.float64)


def test_score_batch_zero_params():
    m = target()
    w = score_batch(zeroed(6), m, [(1, 2, 3), (4, 5)])
    assert [len(r) for r in w] == [2, 1]
    assert all(np.all(r == 0.5) for r in w)


def test_score_batch_range_and_determinism():
    m = target()
    torch.manual_seed(0)
    p = Personalizer(6).double()
    pats = [(1, 2, 3, 4), (5, 6), (7, 8, 9)]
    a = score_batch(p, m, pats, stochastic=True, generator=torch.Generator().manual_seed(3))
    b = score_batch(p, m, pats, stochastic=True, generator=torch.Generator().manual_seed(3))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
        assert np.all((x > 0) & (x < 1))


def test_weights_do_not_reach_target():
    m = target()
    p = Personalizer(6).double()
    x = encode_batch([(1, 2, 3)], 10)
    p.position_weights(m(x), x).sum().backward()
    assert all(t.grad is None for t in m.parameters())
    assert all(t.grad is not None for t in p.parameters())


def test_write_weights(tmp_path):
    m = target()
    ds = Dataset((Sequence(0, (1, 2, 3)), Sequence(1, (4, 5))), 9)
    write_weights(dataset_weights(zeroed(6), m, ds), tmp_path / "w.txt")
    assert (tmp_path / "w.txt").read_text().splitlines() == ["0 2 0.50000000", "0 3 0.50000000", "1 2 0.50000000"]
