import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from coboost.datasets import ClientShard
from coboost.ensemble import (
    WeightedEnsemble,
    WeightUpdateConfig,
    combine_logits,
    data_amount_weights,
    difficulty_from_logits,
    normalize_weights,
    sample_difficulty,
    signed_step,
    uniform_weights,
    update_weights,
    weight_gradient,
    weight_loss,
)
from coboost.models import ModelSpec, build_model


def fixed_client(rows, seed=0):
    """A frozen client whose logits are ``rows[int(x)]``."""
    spec = ModelSpec("mlp_tiny", num_classes=len(rows[0]), input_shape=(1, 1, 1))
    model = build_model(spec, seed)
    fixed = torch.as_tensor(rows, dtype=torch.float32)

    class Net(torch.nn.Module):
        def forward(self, x):
            return fixed[x.view(len(x), -1)[:, 0].long()]

    model.net = Net()
    return model.freeze()


def test_identical_clients_uniform():
    rows = [[0.3, -1.0, 2.0]]
    ens = WeightedEnsemble([fixed_client(rows), fixed_client(rows), fixed_client(rows)])
    x = torch.zeros(1, 1, 1, 1)
    assert torch.allclose(ens(x), torch.tensor(rows))


def test_two_client_average():
    ens = WeightedEnsemble([fixed_client([[1.0, 0.0]]), fixed_client([[0.0, 1.0]])], [0.5, 0.5])
    assert torch.allclose(ens(torch.zeros(1, 1, 1, 1)), torch.tensor([[0.5, 0.5]]))


def test_three_client_weighted():
    ens = WeightedEnsemble(
        [fixed_client([[2.0, 0.0]]), fixed_client([[0.0, 2.0]]), fixed_client([[1.0, 1.0]])], [0.2, 0.3, 0.5]
    )
    # 0.2*[2,0] + 0.3*[0,2] + 0.5*[1,1]
    assert torch.allclose(ens(torch.zeros(1, 1, 1, 1)), torch.tensor([[0.9, 1.1]]))


def test_logit_dim_mismatch():
    ens = WeightedEnsemble([fixed_client([[1.0, 0.0]]), fixed_client([[1.0, 0.0, 0.0]])])
    with pytest.raises(ValueError):
        ens(torch.zeros(1, 1, 1, 1))


def test_uniform_and_data_amount():
    assert uniform_weights(4).tolist() == [0.25] * 4
    assert data_amount_weights([10, 30]).tolist() == [0.25, 0.75]
    shards = [ClientShard(k, np.arange(7), np.zeros(2)) for k in range(3)]
    assert torch.allclose(data_amount_weights(shards), uniform_weights(3))


def test_invalid_weights_rejected():
    with pytest.raises(ValueError):
        WeightedEnsemble([fixed_client([[1.0]])] * 2, [0.7, 0.7])
    with pytest.raises(ValueError):
        WeightedEnsemble([fixed_client([[1.0]])] * 2, [1.0])


# --------------------------------------------------------------------------- difficulty


def test_difficulty_certain():
    assert difficulty_from_logits(torch.tensor([[0.0, 1e4]]), torch.tensor([1])).item() == pytest.approx(0.0)


def test_difficulty_manual_softmax():
    d = difficulty_from_logits(torch.tensor([[2.0, 0.0, 0.0]], dtype=torch.float64), torch.tensor([0]))
    expected = 1 - math.exp(2) / (math.exp(2) + 2)
    assert d.item() == pytest.approx(expected, abs=1e-12)
    assert d.item() == pytest.approx(0.2131, abs=1e-4)


@pytest.mark.parametrize("k", [2, 5, 10])
def test_difficulty_uniform(k):
    labels = torch.arange(k)
    d = difficulty_from_logits(torch.zeros(k, k), labels)
    assert torch.allclose(d, torch.full((k,), 1 - 1 / k))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.integers(0, 2))
def test_difficulty_in_unit_interval(row, y):
    d = sample_difficulty(lambda x: x, torch.tensor([row], dtype=torch.float64), torch.tensor([y]))
    assert 0.0 <= d.item() <= 1.0


# --------------------------------------------------------------------------- normalize


def test_normalize_clamps_then_rescales():
    out = normalize_weights([0.6, -0.2, 0.8])
    assert out.tolist() == pytest.approx([0.6 / 1.4, 0.0, 0.8 / 1.4])
    assert out.tolist() == pytest.approx([0.4286, 0.0, 0.5714], abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8))
def test_normalize_idempotent_on_simplex(raw):
    w = torch.tensor(raw, dtype=torch.float64)
    w = w / w.sum()
    assert torch.allclose(normalize_weights(w), w, atol=1e-12)


def test_normalize_fallback_and_errors():
    assert normalize_weights([-1.0, -2.0, -0.5]).tolist() == pytest.approx([1 / 3] * 3)
    with pytest.raises(ValueError):
        normalize_weights([float("nan"), 1.0])
    with pytest.raises(ValueError):
        normalize_weights([float("inf"), 1.0])


# --------------------------------------------------------------------------- gradient and updates


def central_difference(client_logits, labels, w, h=1e-6):
    grad = torch.zeros_like(w)
    for k in range(len(w)):
        e = torch.zeros_like(w)
        e[k] = h
        grad[k] = (weight_loss(client_logits, labels, w + e) - weight_loss(client_logits, labels, w - e)) / (2 * h)
    return grad


def test_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        n, b, k = 4, 16, 5
        logits = torch.randn(n, b, k, generator=gen, dtype=torch.float64) * 3
        labels = torch.randint(0, k, (b,), generator=gen)
        w = normalize_weights(torch.rand(n, generator=gen, dtype=torch.float64))
        g = weight_gradient(logits, labels, w)
        fd = central_difference(logits, labels, w)
        rel = (g - fd).norm() / fd.norm().clamp_min(1e-12)
        assert rel.item() <= 1e-4


def test_zero_gradient_keeps_weights():
    w = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
    assert torch.equal(signed_step(w, torch.zeros(3), 0.1), w)


def test_flat_loss_keeps_weights():
    # class-constant logits: softmax is uniform whatever w is, so the gradient vanishes
    rows = [[1.5, 1.5, 1.5]]
    ens = WeightedEnsemble([fixed_client(rows), fixed_client(rows)], [0.3, 0.7])
    x = torch.zeros(4, 1, 1, 1)
    y = torch.tensor([0, 1, 2, 0])
    assert torch.equal(weight_gradient(ens.client_logits(x), y, ens.weights), torch.zeros(2))
    new = update_weights(ens, x, y, WeightUpdateConfig(step_size=0.1))
    assert torch.allclose(new.weights, ens.weights, atol=1e-15)


def test_correct_client_gains_weight():
    good = fixed_client([[4.0, 0.0]])
    bad = fixed_client([[0.0, 4.0]])
    ens = WeightedEnsemble([good, bad])
    x = torch.zeros(8, 1, 1, 1)
    y = torch.zeros(8, dtype=torch.long)
    logits = ens.client_logits(x).double()
    fd = central_difference(logits, y, ens.weights)
    assert fd[0] < 0 < fd[1]  # finite-difference oracle on the gradient sign
    new = update_weights(ens, x, y, WeightUpdateConfig(step_size=0.05))
    assert new.weights[0] > 0.5 > new.weights[1]


def test_repeated_updates_monotone_to_grid_optimum():
    good = fixed_client([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    # anti-correct: its logit mass sits on the wrong class, so its gradient stays positive
    meh = fixed_client([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    x = torch.tensor([0.0, 1.0]).view(2, 1, 1, 1)
    y = torch.tensor([0, 1])
    ens = WeightedEnsemble([good, meh])
    logits = ens.client_logits(x).double()
    # brute force over the 1-simplex
    grid = torch.linspace(0, 1, 1001, dtype=torch.float64)
    losses = torch.stack([weight_loss(logits, y, torch.stack([a, 1 - a])) for a in grid])
    best = grid[losses.argmin()].item()
    assert best == pytest.approx(1.0)
    trace = []
    for _ in range(30):
        ens = update_weights(ens, x, y, WeightUpdateConfig(step_size=0.05))
        trace.append(ens.weights[0].item())
    assert all(b >= a - 1e-12 for a, b in zip(trace, trace[1:]))
    assert trace[-1] == pytest.approx(1.0)


def test_simplex_invariant_random_updates():
    gen = torch.Generator().manual_seed(1)
    n, k = 5, 4
    w = uniform_weights(n)
    for _ in range(1000):
        logits = torch.randn(n, 8, k, generator=gen, dtype=torch.float64) * 5
        labels = torch.randint(0, k, (8,), generator=gen)
        mu = float(torch.rand(1, generator=gen)) * 0.5
        w = signed_step(w, weight_gradient(logits, labels, w), mu)
        assert (w >= 0).all() and (w <= 1).all()
        assert abs(w.sum().item() - 1.0) < 1e-12


def test_small_step_does_not_increase_loss():
    gen = torch.Generator().manual_seed(2)
    for _ in range(200):
        logits = torch.randn(4, 64, 3, generator=gen, dtype=torch.float64) * 2
        labels = torch.randint(0, 3, (64,), generator=gen)
        w = uniform_weights(4)
        g = weight_gradient(logits, labels, w)
        before = weight_loss(logits, labels, w)
        after = weight_loss(logits, labels, signed_step(w, g, 1e-3))
        assert after <= before + 1e-12
        if (g > 0).any() and (g < 0).any():
            assert after < before
        else:
            # a common sign moves every weight equally; renormalizing undoes it
            assert after == pytest.approx(before, abs=1e-12)


def test_default_step_size():
    assert WeightUpdateConfig().resolve_step(10) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        WeightUpdateConfig(step_size=0)


def test_empty_batch_rejected():
    ens = WeightedEnsemble([fixed_client([[1.0, 0.0]])])
    with pytest.raises(ValueError):
        update_weights(ens, torch.zeros(0, 1, 1, 1), torch.zeros(0, dtype=torch.long), WeightUpdateConfig())


def test_combine_logits_shape():
    out = combine_logits(torch.ones(3, 5, 7), uniform_weights(3))
    assert out.shape == (5, 7)


def test_mixed_architectures_share_the_logit_interface():
    spec_a = ModelSpec("mlp_tiny", 10, (1, 8, 8))
    spec_b = ModelSpec("cnn2", 10, (1, 8, 8))
    ens = WeightedEnsemble([build_model(spec_a, 0).freeze(), build_model(spec_b, 1).freeze()])
    x = torch.randn(6, 1, 8, 8)
    assert ens.client_logits(x).shape == (2, 6, 10)
    assert ens(x).shape == (6, 10)
