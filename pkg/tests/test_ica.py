import warnings

import numpy as np
import pytest

from latentrisk.cohort import GeneratorConfig, generate_cohort, mixed_observations
from latentrisk.errors import InputError, RankReductionWarning, SchemaError
from latentrisk.ica import (
    IcaModel,
    amari_index,
    fast_ica,
    fit_ica,
    match_components,
    project,
    reconstruction_residual,
    whiten,
)


def laplace_mix(m=6, k=3, n=4000, seed=0):
    rng = np.random.default_rng(seed)
    S = rng.laplace(size=(k, n))
    A = rng.standard_normal((m, k))
    return A @ S + 0.5, A, S


def test_whitened_covariance_is_identity():
    X, _, _ = laplace_mix()
    Z, wt = whiten(X, 3)
    assert np.max(np.abs(Z @ Z.T / Z.shape[1] - np.eye(3))) < 1e-6
    assert np.all(np.diff(wt.eigenvalues) <= 0)


def test_whiten_rank_reduction_warning():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 500))
    with pytest.warns(RankReductionWarning):
        Z, wt = whiten(X, 4)
    assert wt.k == 2 and Z.shape == (2, 500)
    with pytest.raises(InputError):
        whiten(X, 0)
    with pytest.raises(InputError):
        whiten(np.ones((3, 10)), 1)


def test_single_component():
    X, _, _ = laplace_mix(k=1, m=4)
    model, S = fit_ica(X, 1)
    assert model.k == 1
    assert abs(np.abs(model.unmixing[0, 0]) - 1.0) < 1e-12
    assert abs(S.values.std() - 1.0) < 1e-9


def test_two_source_recovery():
    rng = np.random.default_rng(2)
    n = 5000
    S = np.vstack([rng.laplace(size=n), rng.uniform(-1.7, 1.7, n)])
    A = np.array([[1.0, 0.4], [0.3, 1.0], [0.8, -0.6]])
    model, est = fit_ica(A @ S, 2, seed=3)
    _, corr = match_components(est.values, S)
    assert np.all(np.abs(corr) >= 0.99)
    assert model.report.converged


def test_unmixing_orthonormal_and_lossless():
    X, A, _ = laplace_mix(m=3, k=3)
    model, _ = fit_ica(X, 3)
    W = model.unmixing
    assert np.allclose(W @ W.T, np.eye(3), atol=1e-10)
    assert reconstruction_residual(X, model) < 1e-10
    assert amari_index(model.mixing, A) < 0.05


def test_projection_is_left_inverse():
    X, _, _ = laplace_mix()
    model, S = fit_ica(X, 3)
    A = model.mixing
    W = project(X, model).values
    assert np.allclose(W, S.values)
    # A^+ A = I
    P = model.unmixing @ model.whitening.whitening @ A
    assert np.allclose(P, np.eye(3), atol=1e-10)
    # directions orthogonal to the signature span are annihilated
    q, _ = np.linalg.qr(np.hstack([A, np.random.default_rng(0).standard_normal((6, 1))]))
    perp = q[:, -1]
    e = model.whitening.mean + perp
    pseudo = np.linalg.pinv(A)
    assert np.allclose(project(e[:, None], model).values[:, 0], pseudo @ perp, atol=1e-8)
    assert np.allclose(pseudo @ perp, 0.0, atol=1e-10)
    with pytest.raises(SchemaError):
        project(np.zeros((5, 2)), model)


def test_amari_index_properties():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((8, 4))
    assert amari_index(A, A) < 1e-12
    perm = A[:, [2, 0, 3, 1]] * np.array([-2.0, 0.5, 1.0, 3.0])
    assert amari_index(perm, A) < 1e-12
    rand = [amari_index(rng.standard_normal((8, 4)), A) for _ in range(20)]
    assert np.mean(rand) > 0.3
    assert all(0 <= r <= 1 for r in rand)
    with pytest.raises(InputError):
        amari_index(A, np.hstack([A[:, :3], A[:, :1]]))


def test_model_roundtrip_and_determinism(tmp_path):
    X, _, _ = laplace_mix()
    model, S = fit_ica(X, 3, seed=7)
    model.save(tmp_path / "m.bin")
    back = IcaModel.load(tmp_path / "m.bin")
    assert np.array_equal(back.mixing, model.mixing) and back.report == model.report
    assert np.array_equal(project(X, back).values, S.values)
    again, _ = fit_ica(X, 3, seed=7)
    assert np.array_equal(again.mixing, model.mixing)


def test_unknown_contrast_and_bad_tol():
    Z = np.random.default_rng(0).standard_normal((2, 50))
    with pytest.raises(InputError):
        fast_ica(Z, "gauss")
    with pytest.raises(InputError):
        fast_ica(Z, tol=0)


def test_cube_contrast_recovers_sources():
    rng = np.random.default_rng(5)
    S = np.vstack([rng.uniform(-1.7, 1.7, 6000), rng.laplace(size=6000)])
    A = np.array([[2.0, 1.0], [1.0, 1.5]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, est = fit_ica(A @ S, 2, nonlinearity="cube", max_iter=500)
    _, corr = match_components(est.values, S)
    assert np.all(np.abs(corr) >= 0.95)


def test_recovers_generator_signatures():
    _, truth = generate_cohort(GeneratorConfig(n_patients=0, m=30, k_true=4), seed=3)
    X, S = mixed_observations(truth, 8000, seed=1)
    model, est = fit_ica(X, 4, max_iter=400)
    assert amari_index(model.mixing, truth.true_mixing) < 0.1
    _, corr = match_components(est.values, S)
    assert np.all(np.abs(corr) > 0.9)


def test_reconstruction_matches_pca_truncation():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((8, 3)) @ rng.laplace(size=(3, 3000)) + 0.3 * rng.standard_normal((8, 3000))
    model, _ = fit_ica(X, 3)
    Xc = X - X.mean(axis=1, keepdims=True)
    U, sv, _ = np.linalg.svd(Xc, full_matrices=False)
    pca = np.linalg.norm(Xc - U[:, :3] @ (U[:, :3].T @ Xc)) / np.linalg.norm(Xc)
    assert abs(reconstruction_residual(X, model) - pca) < 1e-6 * pca
