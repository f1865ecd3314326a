import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cyclecap import autodiff as ad
from cyclecap import nn
from cyclecap.autodiff import ShapeError, Tensor

import gradcases
from oracles import jacobi_singular_values


@pytest.mark.parametrize("name", sorted(gradcases.LAYER_CASES))
def test_layer_gradients(name):
    for seed in range(2):
        assert gradcases.run_case(f"layer/{name}", seed) < gradcases.GRAD_TOL


def test_jacobi_oracle_agrees_with_lapack():
    a = np.random.default_rng(0).normal(size=(7, 5))
    np.testing.assert_allclose(jacobi_singular_values(a), np.linalg.svd(a, compute_uv=False), rtol=1e-12)


def test_identity_has_unit_sigma():
    w = Tensor(np.eye(4))
    out, _ = nn.spectral_normalize(w, np.ones(4) / 2.0, iters=3)
    np.testing.assert_allclose(out.data, np.eye(4), atol=1e-12)


def test_diagonal_sigma():
    w = Tensor(np.diag([3.0, 1.0]))
    _, _, sigma = nn.power_iteration(w.data, np.array([1.0, 0.0]), iters=1)
    assert sigma == pytest.approx(3.0, abs=1e-15)
    u0 = np.random.default_rng(1).normal(size=2)
    _, _, sigma = nn.power_iteration(w.data, u0, iters=50)
    assert abs(sigma - 3.0) < 1e-3


def test_random_16x16_within_oracle():
    a = np.random.default_rng(2).normal(size=(16, 16))
    _, _, sigma = nn.power_iteration(a, np.random.default_rng(3).normal(size=16), iters=100)
    assert abs(sigma - jacobi_singular_values(a)[0]) < 1e-3


def test_zero_weight_is_flagged():
    with pytest.warns(RuntimeWarning, match="zero spectral norm"):
        out, _ = nn.spectral_normalize(Tensor(np.zeros((3, 3))), np.ones(3) / np.sqrt(3))
    assert np.all(np.isfinite(out.data))


def test_training_mode_persists_u_eval_mode_does_not():
    layer = nn.Linear(5, 4, np.random.default_rng(0), spectral=True)
    x = Tensor(np.ones((2, 5)))
    u0 = layer._buffers["u"].copy()
    layer(x)
    assert not np.array_equal(layer._buffers["u"], u0)
    layer.eval()
    u1 = layer._buffers["u"].copy()
    layer(x)
    np.testing.assert_array_equal(layer._buffers["u"], u1)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 24), st.integers(1, 24), st.integers(0, 2**31 - 1))
def test_normalized_matrix_has_unit_top_singular_value(rows, cols, seed):
    rng = np.random.default_rng(seed)
    layer = nn.Linear(cols, rows, rng, spectral=True)
    layer.weight.data = rng.normal(size=(cols, rows)) * rng.uniform(0.1, 10)
    top = jacobi_singular_values(layer.normalized_matrix())[0]
    assert top <= 1 + 1e-3
    assert top == pytest.approx(1.0, abs=1e-3)


def test_conv_kernels_flatten_out_by_rest():
    conv = nn.Conv2d(3, 5, 3, np.random.default_rng(0), spectral=True)
    assert conv.normalized_matrix().shape == (5, 27)


def test_batch_norm_constant_channel_gives_shift():
    bn = nn.BatchNorm(2)
    bn.beta.data = np.array([0.7, -1.5])
    x = Tensor(np.stack([np.full((4, 3, 3), 5.0), np.random.default_rng(0).normal(size=(4, 3, 3))], axis=1))
    out = nn.batch_norm(x, bn, training=True).data
    np.testing.assert_allclose(out[:, 0], 0.7, atol=1e-12)


def test_batch_norm_training_output_is_centered():
    bn = nn.BatchNorm(3)
    x = Tensor(np.random.default_rng(1).normal(loc=4.0, scale=3.0, size=(6, 3)))
    out = nn.batch_norm(x, bn, training=True).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-5)


def test_batch_norm_rejects_single_sample_in_training():
    with pytest.raises(ValueError):
        nn.batch_norm(Tensor(np.ones((1, 3))), nn.BatchNorm(3), training=True)
    nn.batch_norm(Tensor(np.ones((1, 3))), nn.BatchNorm(3), training=False)


def test_batch_norm_eval_uses_running_stats():
    bn = nn.BatchNorm(2, momentum=1.0)
    x = np.random.default_rng(2).normal(size=(8, 2))
    nn.batch_norm(Tensor(x), bn, training=True)
    out = nn.batch_norm(Tensor(x), bn, training=False).data
    var = x.var(axis=0) * 8 / 7
    np.testing.assert_allclose(out, (x - x.mean(axis=0)) / np.sqrt(var + bn.eps), atol=1e-12)


def _zero_cell(in_dim, hidden):
    cell = nn.LSTMCell(in_dim, hidden, np.random.default_rng(0))
    for p in cell.parameters():
        p.data[...] = 0.0
    return cell


def test_lstm_zero_weights_zero_hidden():
    cell = _zero_cell(3, 4)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    out, state = nn.lstm_step(x, cell.zero_state(2), cell)
    np.testing.assert_array_equal(out.data, 0.0)
    np.testing.assert_array_equal(state.hidden.data, 0.0)


def test_lstm_is_pure():
    cell = nn.LSTMCell(3, 4, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    s = cell.zero_state(2)
    a, _ = nn.lstm_step(x, s, cell)
    b, _ = nn.lstm_step(x, s, cell)
    np.testing.assert_array_equal(a.data, b.data)


def test_lstm_rejects_mismatch():
    cell = nn.LSTMCell(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        nn.lstm_step(Tensor(np.ones((2, 3))), cell.zero_state(3), cell)
    with pytest.raises(ShapeError):
        nn.lstm_step(Tensor(np.ones((2, 5))), cell.zero_state(2), cell)
    with pytest.raises(ShapeError):
        nn.LstmState(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 3))))


def test_lstm_matches_textbook_equations():
    rng = np.random.default_rng(5)
    cell = nn.LSTMCell(3, 2, rng)
    x, h, c = rng.normal(size=(1, 3)), rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    out, state = nn.lstm_step(Tensor(x), nn.LstmState(Tensor(h), Tensor(c)), cell)
    z = x @ cell.weight_ih.data + h @ cell.weight_hh.data + cell.bias.data
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:, :2]), sig(z[:, 2:4]), np.tanh(z[:, 4:6]), sig(z[:, 6:])
    c2 = f * c + i * g
    np.testing.assert_allclose(state.cell.data, c2, atol=1e-14)
    np.testing.assert_allclose(out.data, o * np.tanh(c2), atol=1e-14)


def test_bilstm_output_dimension_reference_config():
    enc = nn.BiLSTMEncoder(4, 512, 3, np.random.default_rng(0))
    out = nn.bilstm_encode(Tensor(np.ones((1, 3, 4)) / 4), enc)
    assert out.shape == (1, 1024)


def test_bilstm_rejects_wrong_length():
    enc = nn.BiLSTMEncoder(4, 3, 5, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        enc(Tensor(np.ones((1, 4, 4))))


def test_bilstm_reverse_swaps_halves():
    rng = np.random.default_rng(7)
    enc = nn.BiLSTMEncoder(4, 3, 6, rng)
    seq = rng.dirichlet(np.ones(4), size=(2, 6))
    out = nn.bilstm_encode(Tensor(seq), enc).data
    swapped = nn.BiLSTMEncoder(4, 3, 6, rng)
    swapped.forward_cell, swapped.backward_cell = enc.backward_cell, enc.forward_cell
    out_rev = nn.bilstm_encode(Tensor(seq[:, ::-1].copy()), swapped).data
    np.testing.assert_allclose(out_rev[:, :3], out[:, 3:], atol=1e-14)
    np.testing.assert_allclose(out_rev[:, 3:], out[:, :3], atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4))
def test_bilstm_dimension_invariant(hidden, in_dim, steps):
    enc = nn.BiLSTMEncoder(in_dim, hidden, steps, np.random.default_rng(hidden))
    assert enc(Tensor(np.ones((2, steps, in_dim)))).shape == (2, 2 * hidden)


def test_parameter_names_unique_and_state_roundtrip():
    rng = np.random.default_rng(0)
    enc = nn.BiLSTMEncoder(3, 2, 4, rng)
    names = [n for n, _ in enc.named_parameters()]
    assert len(names) == len(set(names))
    ids = [id(p) for p in enc.parameters()]
    assert len(ids) == len(set(ids))
    other = nn.BiLSTMEncoder(3, 2, 4, np.random.default_rng(1))
    other.load_state_dict(enc.state_dict())
    for (_, a), (_, b) in zip(enc.named_parameters(), other.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_freeze_clears_trainability():
    lin = nn.Linear(2, 2, np.random.default_rng(0))
    lin.freeze()
    assert lin.frozen and all(not p.requires_grad for p in lin.parameters())


def test_default_init_ranges():
    rng = np.random.default_rng(0)
    lin = nn.Linear(16, 8, rng)
    assert np.abs(lin.weight.data).max() <= 0.25
    conv = nn.ConvTranspose2d(64, 64, 4, rng)
    assert abs(conv.weight.data.std() - 0.02) < 0.002
