import io

import numpy as np
import pytest

from forgesim.datagen import Dataset
from forgesim.errors import ConfigurationError, DataIntegrityError, DomainError
from forgesim.model import (Layout, ParamVector, backward, decode, decode_batch, encode, encode_batch,
                            forward, forward_cache, init_params, read_checkpoint, smooth_normalize,
                            smooth_normalize_backward, task_loss_and_grad, write_checkpoint)


def _naive_forward(theta, x, k):
    # independent per-sample forward pass
    p = theta.unpack()
    u = np.concatenate([x, np.eye(theta.layout.n_tasks)[k]])
    h = np.tanh(p["enc.W1"] @ u + p["enc.b1"])
    z = p["enc.W2"] @ h + p["enc.b2"]
    return z, p["dec.W3"] @ z + p["dec.b3"]


def test_layout_size_and_order(small_model):
    lay = small_model.layout
    assert lay.size == 12 * 8 + 12 + 6 * 12 + 6 + 3 * 6 + 3 == 207
    assert lay.encoder == slice(0, 186) and lay.decoder == slice(186, 207)
    assert Layout.from_dict(lay.to_dict()) == lay
    with pytest.raises(ConfigurationError):
        Layout(3, 2, 0, 4, 1)
    with pytest.raises(DataIntegrityError):
        ParamVector(np.zeros(5), lay)


def test_init_is_deterministic_and_scaled():
    a, b = init_params(5, 3, 8, 6, 3, seed=1), init_params(5, 3, 8, 6, 3, seed=1)
    assert np.array_equal(a.values, b.values)
    big = init_params(100, 100, 200, 64, 4, seed=0).unpack()
    assert abs(big["enc.W1"].std() * np.sqrt(200) - 1) < 0.1
    assert abs(big["enc.W2"].std() * np.sqrt(200) - 1) < 0.1
    assert np.all(big["enc.b1"] == 0) and np.all(big["dec.b3"] == 0)


def test_forward_matches_naive(small_model):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 5))
    k = rng.integers(0, 3, size=7)
    y = forward(small_model, x, k)
    z = encode_batch(small_model, x, k)
    for i in range(7):
        zi, yi = _naive_forward(small_model, x[i], k[i])
        assert np.allclose(z[i], zi, atol=1e-13) and np.allclose(y[i], yi, atol=1e-13)


def test_single_and_batch_paths_agree(small_model):
    x = np.linspace(-1, 1, 5)
    assert np.array_equal(encode(small_model, x, 2), encode_batch(small_model, x[None], [2])[0])
    z = encode(small_model, x, 1)
    assert np.array_equal(decode(small_model, z), decode_batch(small_model, z[None])[0])
    assert np.array_equal(forward(small_model, x[None], [1]), decode_batch(small_model, encode_batch(small_model, x[None], [1])))


def test_instruction_changes_latent(small_model):
    x = np.ones(5)
    assert not np.allclose(encode(small_model, x, 0), encode(small_model, x, 1))
    with pytest.raises(DomainError):
        encode(small_model, x, 3)


def test_zero_weights_give_biases(small_model):
    theta = small_model.copy()
    p = theta.unpack()
    p["enc.W2"][...] = 0
    p["enc.b2"][...] = np.arange(6)
    p["dec.W3"][...] = 0
    p["dec.b3"][...] = [1.0, -2.0, 3.0]
    assert np.array_equal(encode(theta, np.ones(5), 0), np.arange(6))
    assert np.array_equal(decode(theta, np.ones(6)), [1.0, -2.0, 3.0])


def test_outputs_finite_for_large_inputs(small_model):
    x = np.random.default_rng(1).uniform(-10, 10, size=(500, 5))
    assert np.all(np.isfinite(forward(small_model, x, np.zeros(500, int))))


def test_smooth_normalize_values():
    assert np.array_equal(smooth_normalize(np.zeros(3), 1e-3), np.zeros(3))
    assert np.allclose(smooth_normalize(np.array([3.0, 4.0]), 1e-12), [0.6, 0.8])
    assert np.allclose(smooth_normalize(np.array([1.0, 0.0]), 1.0), [1 / np.sqrt(2), 0])
    z = np.random.default_rng(2).normal(size=(50, 4)) * 100
    assert np.all(np.linalg.norm(smooth_normalize(z, 1e-3), axis=1) < 1)
    with pytest.raises(ConfigurationError):
        smooth_normalize(z, 0.0)


def test_smooth_normalize_backward_matches_jacobian():
    rng = np.random.default_rng(3)
    z, g, eps = rng.normal(size=4), rng.normal(size=4), 0.3
    h = 1e-6
    J = np.empty((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        J[:, j] = (smooth_normalize(z + e, eps) - smooth_normalize(z - e, eps)) / (2 * h)
    assert np.allclose(smooth_normalize_backward(z, g, eps), J.T @ g, atol=1e-8)


def _fd_grad(f, v, h=1e-5):
    out = np.empty_like(v)
    for j in range(len(v)):
        e = np.zeros_like(v)
        e[j] = h
        out[j] = (f(v + e) - f(v - e)) / (2 * h)
    return out


def test_task_gradient_matches_finite_differences(small_model, small_batch):
    loss, grad = task_loss_and_grad(small_model, small_batch)
    fd = _fd_grad(lambda v: task_loss_and_grad(small_model.with_values(v), small_batch)[0], small_model.values)
    assert np.max(np.abs(grad.values - fd)) / np.max(np.abs(fd)) < 1e-6


def test_perfect_prediction_has_zero_loss(small_model, small_batch):
    y = forward(small_model, small_batch.x, small_batch.t_hat)
    ds = Dataset(small_batch.x, y, small_batch.t, small_batch.t_hat)
    loss, grad = task_loss_and_grad(small_model, ds)
    assert loss == 0.0 and np.all(grad.values == 0)


def test_duplicated_batch_is_invariant(small_model, small_batch):
    l1, g1 = task_loss_and_grad(small_model, small_batch)
    l2, g2 = task_loss_and_grad(small_model, Dataset.concat([small_batch, small_batch]))
    assert np.isclose(l1, l2) and np.allclose(g1.values, g2.values)


def test_unannotated_batch_rejected(small_model, small_batch):
    raw = Dataset(small_batch.x, small_batch.a, small_batch.t, np.full(len(small_batch), -1))
    with pytest.raises(DataIntegrityError):
        task_loss_and_grad(small_model, raw)
    # true labels still usable
    task_loss_and_grad(small_model, raw, use_predicted_labels=False)


def test_backward_extra_latent_gradient(small_model, small_batch):
    cache = forward_cache(small_model, small_batch.x, small_batch.t_hat)
    dz = np.random.default_rng(4).normal(size=cache.z.shape)
    g = backward(small_model, cache, np.zeros_like(cache.y), dz)

    def f(v):
        return float(np.sum(encode_batch(small_model.with_values(v), small_batch.x, small_batch.t_hat) * dz))

    assert np.allclose(g, _fd_grad(f, small_model.values), atol=1e-7)


def test_checkpoint_round_trip(small_model):
    buf = io.BytesIO()
    bank = np.arange(6.0).reshape(2, 3)
    write_checkpoint(buf, small_model, {"bank": bank}, {"round": 4})
    raw = buf.getvalue()
    header_end = raw.index(b"\n") + 1
    payload = np.frombuffer(raw[header_end:], dtype="<f8")
    assert np.array_equal(payload[:207], small_model.values)
    assert np.array_equal(payload[207:], bank.ravel())
    theta, arrays, header = read_checkpoint(io.BytesIO(raw))
    assert np.array_equal(theta.values, small_model.values)
    assert np.array_equal(arrays["bank"], bank) and header["meta"]["round"] == 4
    with pytest.raises(DataIntegrityError):
        read_checkpoint(io.BytesIO(raw[:-8]))
    with pytest.raises(DataIntegrityError):
        read_checkpoint(io.BytesIO(b'{"format": "other"}\n'))
