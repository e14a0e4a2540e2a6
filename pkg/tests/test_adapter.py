import hashlib
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from glm_align.adapter import GLMAdapter, adapter_forward, adapter_gradients, attention, cross_attention_layer
from glm_align.config import DESK
from glm_align.errors import InputError, NumericError

# frozen on the first verified run: seed-0 adapter on a seed-0 N(0,1) input of shape (2, 16, 64)
ADAPTER_OUTPUT_SHA = "f3585640cacbc395"


def dense_oracle(query, context, layer):
    """softmax(Q K^T / sqrt(dim)) V per head, written with explicit numpy loops."""
    x = query.detach().numpy()
    c = context.detach().numpy()
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    xn = (x - mu) / np.sqrt(var + layer.norm.eps) * layer.norm.weight.detach().numpy() + layer.norm.bias.detach().numpy()
    Q = xn @ layer.W_Q.weight.detach().numpy().T
    K = c @ layer.W_K.weight.detach().numpy().T
    V = c @ layer.W_V.weight.detach().numpy().T
    heads = layer.n_heads
    dh = Q.shape[-1] // heads
    out = np.zeros_like(Q)
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        for i in range(Q.shape[0]):
            logits = np.array([sum(Q[i, sl][a] * K[j, sl][a] for a in range(dh)) for j in range(K.shape[0])])
            logits /= math.sqrt(dh)
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * V[j, sl] for j in range(K.shape[0]))
    return out


def test_matches_dense_oracle_on_two_by_three(adapter):
    g = torch.Generator().manual_seed(5)
    query = torch.randn(2, 64, generator=g, dtype=torch.float64)
    context = torch.randn(3, DESK.d_model, generator=g, dtype=torch.float64)
    res = cross_attention_layer(adapter, query, context, 0)
    expected = dense_oracle(query, context, adapter.layers[0])
    np.testing.assert_allclose(res.pre_residual.detach().numpy(), expected, rtol=0, atol=1e-9)
    W_O = adapter.layers[0].W_O
    torch.testing.assert_close(res.output, query + W_O(res.pre_residual), rtol=0, atol=0)


def test_single_key_gives_unit_weights(adapter):
    g = torch.Generator().manual_seed(1)
    query = torch.randn(DESK.seq_sd, 64, generator=g, dtype=torch.float64)
    context = torch.randn(1, DESK.d_model, generator=g, dtype=torch.float64)
    res = cross_attention_layer(adapter, query, context, 1)
    assert torch.equal(res.weights, torch.ones_like(res.weights))
    v_row = adapter.layers[1].W_V(context)
    torch.testing.assert_close(res.pre_residual, v_row.expand_as(res.pre_residual), rtol=0, atol=1e-15)


def test_zero_query_gives_uniform_attention(adapter):
    layer = adapter.layers[0]
    with torch.no_grad():
        layer.W_Q.weight.zero_()
    query = torch.randn(4, 64, dtype=torch.float64)
    context = torch.randn(5, DESK.d_model, dtype=torch.float64)
    res = cross_attention_layer(adapter, query, context, 0)
    torch.testing.assert_close(res.weights, torch.full_like(res.weights, 0.2), rtol=0, atol=1e-15)
    col_mean = layer.W_V(context).mean(dim=0)
    torch.testing.assert_close(res.pre_residual, col_mean.expand_as(res.pre_residual), rtol=0, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.floats(0.1, 30.0), st.integers(0, 2**31))
def test_attention_rows_are_distributions(n_q, n_k, scale, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(1, 2, n_q, 8, generator=g, dtype=torch.float64) * scale
    k = torch.randn(1, 2, n_k, 8, generator=g, dtype=torch.float64) * scale
    v = torch.randn(1, 2, n_k, 8, generator=g, dtype=torch.float64)
    _, w = attention(q, k, v)
    assert (w >= 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(1, 2, n_q, dtype=torch.float64), rtol=0, atol=1e-12)


def test_layer_index_checked(adapter):
    with pytest.raises(InputError):
        cross_attention_layer(adapter, torch.zeros(2, 64), torch.zeros(3, DESK.d_model), 9)
    with pytest.raises(InputError):
        cross_attention_layer(adapter, torch.zeros(2, 63), torch.zeros(3, DESK.d_model), 0)


class TestForward:
    def test_shapes(self, adapter):
        for b in (1, 3):
            e = adapter_forward(torch.randn(b, DESK.length, DESK.d_model, dtype=torch.float64), adapter, 4)
            assert e.h_align.shape == (b, DESK.seq_sd, DESK.d_sd)
            assert e.h_palign.shape == (b, 1, DESK.d_pool)
            assert e.source_layer == 4

    def test_batch_independence(self, adapter):
        h = torch.randn(2, DESK.length, DESK.d_model, dtype=torch.float64)
        both = adapter_forward(h, adapter)
        for i in range(2):
            one = adapter_forward(h[i : i + 1], adapter)
            torch.testing.assert_close(both.h_align[i], one.h_align[0], rtol=0, atol=1e-13)
            torch.testing.assert_close(both.h_palign[i], one.h_palign[0], rtol=0, atol=1e-13)

    def test_golden_output(self, adapter):
        h = torch.randn(2, 16, 64, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        e = adapter_forward(h, adapter)
        blob = e.h_align.detach().numpy().tobytes() + e.h_palign.detach().numpy().tobytes()
        assert hashlib.sha256(blob).hexdigest()[:16] == ADAPTER_OUTPUT_SHA

    def test_rejects_bad_input(self, adapter):
        with pytest.raises(InputError):
            adapter_forward(torch.zeros(1, 16, 32, dtype=torch.float64), adapter)
        bad = torch.zeros(1, 16, 64, dtype=torch.float64)
        bad[0, 0, 0] = float("nan")
        with pytest.raises(NumericError):
            adapter_forward(bad, adapter)

    def test_parameter_count(self, adapter):
        assert adapter.n_params == sum(p.numel() for p in adapter.parameters())
        assert adapter.n_params == 222_768


def test_dead_path_gradient_is_exactly_zero(adapter):
    h = torch.randn(1, 16, 64, dtype=torch.float64)
    loss = adapter_forward(h, adapter).h_align.pow(2).mean()
    grads = adapter_gradients(loss, adapter)
    pool = [g for n, g in grads.items() if n.startswith("pool_head")]
    assert pool and all(torch.equal(g, torch.zeros_like(g)) for g in pool)
    assert grads["query_bank"].abs().sum() > 0


def test_gradients_match_finite_differences_on_sampled_entries():
    adapter = GLMAdapter(DESK, n_layers=1, d_q=16, n_heads=2, seed=2)
    h = torch.randn(1, 16, 64, generator=torch.Generator().manual_seed(4), dtype=torch.float64)

    def loss_fn():
        e = adapter_forward(h, adapter)
        return e.h_align.sin().sum() + e.h_palign.pow(2).sum()

    grads = adapter_gradients(loss_fn(), adapter)
    step = 1e-5
    for name, p in adapter.named_parameters():
        flat = p.data.view(-1)
        for idx in (0, flat.numel() // 2, flat.numel() - 1):
            orig = flat[idx].item()
            flat[idx] = orig + step
            up = loss_fn().item()
            flat[idx] = orig - step
            down = loss_fn().item()
            flat[idx] = orig
            fd = (up - down) / (2 * step)
            an = grads[name].view(-1)[idx].item()
            assert abs(fd - an) <= 1e-6 + 1e-4 * max(abs(fd), abs(an)), (name, idx, fd, an)
