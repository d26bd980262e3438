#!/usr/bin/env python3
"""
Unit tests for model module.
"""

import numpy as np
import pytest

import model as vae
from checks import numerical_gradients, random_gradient_instance, relative_error
from utils import ChecksumMismatchError, FileFormatError, TruncatedFileError


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_init_model_shapes(rng):
    params = vae.init_model("pvae", 3, 5, rng)
    assert params.enc_weights.shape == (3, 5)
    assert params.dictionary.shape == (5, 3)
    assert params.prior_log_rates.shape == (3,)
    assert np.allclose(np.linalg.norm(params.dictionary, axis=0), 1.0)

    params = vae.init_model("grelu", 3, 5, rng)
    assert params.enc_weights.shape == (6, 5)
    assert np.array_equal(params.prior_mu, np.zeros(3))
    assert np.array_equal(params.prior_log_sigma, np.zeros(3))


def test_model_params_validation(rng):
    params = vae.init_model("pvae", 2, 4, rng)
    with pytest.raises(ValueError):
        vae.ModelParams("pvae", params.enc_weights, params.dictionary,
                        prior_log_rates=params.prior_log_rates, prior_mu=np.zeros(2))
    with pytest.raises(ValueError):
        vae.ModelParams("pvae", params.enc_weights[:, :3], params.dictionary,
                        prior_log_rates=params.prior_log_rates)
    with pytest.raises(ValueError):
        vae.init_model("bogus", 2, 4, rng)


def test_encode_residual_parameterization(rng):
    """Zero encoder output puts the posterior exactly at the prior."""
    params = vae.init_model("pvae", 3, 4, rng)
    params = params.with_tensors({"enc_weights": np.zeros((3, 4))})
    post = vae.encode(params, np.ones((2, 4)))
    assert np.allclose(post.rates, np.exp(params.prior_log_rates))
    assert vae.free_energy(params, np.ones((2, 4)), 1.0).kl == 0.0

    params = vae.init_model("grelu", 3, 4, rng)
    post = vae.encode(params, rng.standard_normal((2, 4)))
    assert np.allclose(post.mu, params.prior_mu + post.delta_mu)
    assert np.allclose(post.sigma, np.exp(params.prior_log_sigma + post.log_scale_residual))
    assert np.allclose(post.log_var_residual, 2 * post.log_scale_residual)


def test_encode_rejects_wrong_width(rng):
    params = vae.init_model("pvae", 2, 4, rng)
    with pytest.raises(ValueError):
        vae.encode(params, np.ones((2, 5)))


def test_recon_loss_diagonal():
    """Perfect mean reconstruction leaves only the variance penalty."""
    x = np.array([[1.0, 2.0]])
    m = np.array([[1.0, 2.0]])
    v = np.array([[0.5, 0.5]])
    mean_penalty, variance_penalty = vae.recon_loss_diagonal(x, m, v, np.eye(2))
    assert mean_penalty == 0.0
    assert variance_penalty == pytest.approx(1.0)


def test_recon_loss_diagonal_dimension_mismatch():
    with pytest.raises(ValueError):
        vae.recon_loss_diagonal(np.ones((1, 3)), np.ones((1, 2)), np.ones((1, 2)), np.eye(2))


def test_recon_loss_trace_matches_diagonal(rng):
    x = rng.standard_normal((3, 4))
    m = rng.standard_normal((3, 2))
    v = rng.uniform(0.1, 1.0, size=(3, 2))
    dictionary = rng.standard_normal((4, 2))
    cov = np.stack([np.diag(row) for row in v])
    assert vae.recon_loss_trace(x, m, cov, dictionary) == pytest.approx(
        sum(vae.recon_loss_diagonal(x, m, v, dictionary))
    )


def test_recon_loss_trace_requires_symmetry():
    cov = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError, match="symmetric"):
        vae.recon_loss_trace(np.ones((1, 2)), np.ones((1, 2)), cov, np.eye(2))


def test_free_energy_total(rng):
    params = vae.init_model("grelu", 3, 4, rng)
    x = rng.standard_normal((5, 4))
    breakdown = vae.free_energy(params, x, 2.0)
    assert breakdown.total == pytest.approx(
        breakdown.mean_penalty + breakdown.variance_penalty + 2.0 * breakdown.kl
    )
    assert breakdown.kl >= 0.0
    assert set(breakdown.components()) == {"recon_mean", "recon_var", "kl", "total"}


def test_free_energy_rejects_negative_beta(rng):
    params = vae.init_model("pvae", 2, 4, rng)
    with pytest.raises(ValueError):
        vae.free_energy(params, np.ones((1, 4)), -1.0)


@pytest.mark.parametrize("family", list(vae.Family))
def test_gradients_match_finite_differences(family):
    rng = np.random.default_rng(11)
    for _ in range(3):
        params, x, beta = random_gradient_instance(family, rng)
        analytic = vae.gradients(params, x, beta)
        numeric = numerical_gradients(
            lambda t: vae.free_energy(params.with_tensors(t), x, beta).total, params.tensors()
        )
        for name in params.tensor_names:
            assert relative_error(analytic.tensors[name], numeric[name]) <= 1e-5, name


def test_free_energy_and_gradients_consistent(rng):
    params = vae.init_model("pvae", 3, 4, rng)
    x = rng.standard_normal((6, 4))
    breakdown, grads = vae.free_energy_and_gradients(params, x, 0.5)
    assert breakdown == vae.free_energy(params, x, 0.5)
    expected_norm = np.sqrt(sum(np.sum(g ** 2) for g in grads.tensors.values()))
    assert grads.global_norm == pytest.approx(expected_norm)


def test_recon_gradient_of_dictionary_at_perfect_fit():
    """With x = Phi m and no variance the dictionary gradient vanishes."""
    dictionary = np.eye(2)
    m = np.array([[1.0, 2.0]])
    _, _, grad_dict = vae.recon_gradients(m @ dictionary.T, m, np.zeros((1, 2)), dictionary)
    assert np.allclose(grad_dict, 0.0)


def test_sample_latents(rng):
    x = rng.standard_normal((50, 4))
    poisson = vae.init_model("pvae", 3, 4, rng)
    h = vae.sample_latents(poisson, x, rng)
    assert h.shape == (50, 3)
    assert np.all(h >= 0) and np.array_equal(h, np.round(h))

    gaussian = vae.init_model("grelu", 3, 4, rng)
    h = vae.sample_latents(gaussian, x, rng)
    assert np.all(h >= 0)
    assert np.any(h == 0)


def test_reconstruct_is_linear(rng):
    params = vae.init_model("pvae", 3, 4, rng)
    h = rng.uniform(size=(2, 3))
    assert np.allclose(vae.reconstruct(params, h), h @ params.dictionary.T)


def test_elbo_carvings_agree():
    rng = np.random.default_rng(3)
    params = vae.init_model("grelu", 3, 4, rng)
    carving = vae.elbo_decomposition_check(params, rng.standard_normal((3, 4)), 20_000, rng)
    assert abs(carving.lhs - carving.rhs) <= 4 * carving.mc_se


def test_elbo_check_preconditions(rng):
    x = np.ones((1, 4))
    with pytest.raises(ValueError):
        vae.elbo_decomposition_check(vae.init_model("pvae", 2, 4, rng), x, 10_000, rng)
    with pytest.raises(ValueError):
        vae.elbo_decomposition_check(vae.init_model("grelu", 2, 4, rng), x, 100, rng)


@pytest.mark.parametrize("family", ["pvae", "grelu"])
def test_checkpoint_roundtrip(tmp_path, rng, family):
    params = vae.init_model(family, 3, 4, rng)
    path = str(tmp_path / "model.ckpt")
    vae.save_checkpoint(params, path)
    loaded = vae.load_checkpoint(path)
    assert loaded.family == params.family
    for name, tensor in params.tensors().items():
        assert np.array_equal(loaded.tensors()[name], tensor)


def test_checkpoint_errors(tmp_path, rng):
    path = tmp_path / "model.ckpt"
    vae.save_checkpoint(vae.init_model("grelu", 3, 4, rng), str(path))
    raw = path.read_bytes()

    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(raw[:-20])
    with pytest.raises(TruncatedFileError):
        vae.load_checkpoint(str(truncated))

    corrupted = bytearray(raw)
    corrupted[60] ^= 0xFF
    bad_crc = tmp_path / "corrupted.ckpt"
    bad_crc.write_bytes(bytes(corrupted))
    with pytest.raises(ChecksumMismatchError):
        vae.load_checkpoint(str(bad_crc))

    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"X" + raw[1:])
    with pytest.raises(FileFormatError):
        vae.load_checkpoint(str(bad_magic))


def _mc_squared_error(x, dictionary, z):
    losses = np.sum((x - z @ dictionary.T) ** 2, axis=1)
    return losses.mean(), losses.std(ddof=1) / np.sqrt(len(losses))


def test_recon_loss_trace_matches_monte_carlo():
    """Correlated Gaussian z: E||x - Phi z||^2 = ||x - Phi m||^2 + Tr(Phi^T Phi Cov)."""
    rng = np.random.default_rng(21)
    dictionary = rng.standard_normal((5, 3))
    a = rng.standard_normal((3, 3))
    cov = a @ a.T + 0.1 * np.eye(3)
    x = rng.standard_normal((1, 5))
    m = rng.standard_normal((1, 3))
    z = rng.multivariate_normal(m[0], cov, size=200_000)
    estimate, se = _mc_squared_error(x, dictionary, z)
    assert abs(vae.recon_loss_trace(x, m, cov, dictionary) - estimate) <= 4 * se


def test_recon_loss_diagonal_matches_monte_carlo():
    rng = np.random.default_rng(22)
    dictionary = rng.standard_normal((5, 3))
    x = rng.standard_normal((1, 5))
    m = rng.standard_normal((1, 3))
    v = rng.uniform(0.2, 2.0, size=(1, 3))
    z = m + np.sqrt(v) * rng.standard_normal((200_000, 3))
    estimate, se = _mc_squared_error(x, dictionary, z)
    assert abs(sum(vae.recon_loss_diagonal(x, m, v, dictionary)) - estimate) <= 4 * se


def test_free_energy_of_hand_built_poisson_model():
    """One latent, one pixel: lambda_0 = 1, u = ln 2, Phi = [1], x = [2]."""
    params = vae.ModelParams(
        "pvae",
        enc_weights=np.array([[np.log(2.0) / 2.0]]),
        dictionary=np.array([[1.0]]),
        prior_log_rates=np.array([0.0]),
    )
    breakdown = vae.free_energy(params, np.array([[2.0]]), 1.0)
    assert breakdown.kl == pytest.approx(0.386294, abs=1e-6)
    assert breakdown.mean_penalty == pytest.approx(0.0, abs=1e-12)
    assert breakdown.variance_penalty == pytest.approx(2.0)
    assert breakdown.total == pytest.approx(2.386294, abs=1e-6)


@pytest.mark.parametrize("family", list(vae.Family))
def test_kl_path_gradients_vanish_when_posterior_is_prior(family, rng):
    params = vae.init_model(family, 3, 4, rng)
    params = params.with_tensors({"enc_weights": np.zeros_like(params.enc_weights)})
    x = rng.standard_normal((6, 4))
    assert vae.free_energy(params, x, 3.0).kl == pytest.approx(0.0, abs=1e-12)
    with_kl = vae.gradients(params, x, 3.0).tensors
    without_kl = vae.gradients(params, x, 0.0).tensors
    for name in params.tensor_names:
        assert np.allclose(with_kl[name], without_kl[name], atol=1e-12), name


def test_variance_penalty_dictionary_gradient():
    """d/dPhi_ii of sum Phi_ii^2 v_i is 2 Phi_ii v_i when the mean fit is perfect."""
    dictionary = np.diag([1.5, 0.5])
    m = np.array([[1.0, 2.0]])
    v = np.array([[0.3, 2.0]])
    _, grad_v, grad_dict = vae.recon_gradients(m @ dictionary.T, m, v, dictionary)
    assert np.allclose(grad_dict, np.diag([2 * 1.5 * 0.3, 2 * 0.5 * 2.0]))
    assert np.allclose(grad_v, [[1.5 ** 2, 0.5 ** 2]])


@pytest.mark.parametrize("family", list(vae.Family))
def test_per_datum_streams_do_not_depend_on_batch_size(family, rng):
    params = vae.init_model(family, 3, 4, rng)
    x = rng.standard_normal((6, 4))
    full = vae.sample_latents_per_datum(params, x, 7, 5)
    head = vae.sample_latents_per_datum(params, x[:3], 7, 5)
    assert full.shape == (5, 6, 3)
    assert np.array_equal(full[:, :3], head)
    assert np.all(full >= 0)
    assert not np.array_equal(full, vae.sample_latents_per_datum(params, x, 8, 5))
