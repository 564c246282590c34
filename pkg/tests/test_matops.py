import numpy as np
import pytest
from hypothesis import given, strategies as hst

from crmr import matops
from conftest import random_hpd


@pytest.mark.parametrize("k", [1, 2, 6])
def test_eigh_descending_and_reconstructs(rng, k):
    m = random_hpd(rng, k)
    e = matops.eigh(m)
    assert np.all(np.diff(e.eigenvalues) <= 0)
    assert np.allclose(e.reconstruct(), m, atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 6])
def test_inv_sqrt_whitens(rng, k):
    m = random_hpd(rng, k)
    d = matops.inv_sqrt(m)
    assert np.allclose(d, d.conj().T)
    assert np.allclose(d @ m @ d, np.eye(k), atol=1e-10)


def test_inv_sqrt_rejects_singular():
    with pytest.raises(matops.NotPositiveDefiniteError):
        matops.inv_sqrt(np.diag([1.0, 0.0]))
    with pytest.raises(matops.NotPositiveDefiniteError):
        matops.inv_sqrt(np.diag([1.0, 1e-14]))


def test_logdet_forms_agree(rng):
    m = random_hpd(rng, 5)
    ref = np.linalg.slogdet(m)[1]
    assert matops.logdet(m) == pytest.approx(ref, rel=1e-12)
    assert matops.logdet_chol(m) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(matops.NotPositiveDefiniteError):
        matops.logdet(-m)
    with pytest.raises(matops.NotPositiveDefiniteError):
        matops.logdet_chol(-m)


def test_quad_inv(rng):
    m = random_hpd(rng, 4)
    a = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    assert matops.quad_inv(m, a) == pytest.approx(np.real(a.conj() @ np.linalg.inv(m) @ a), rel=1e-12)


@given(hst.integers(1, 6), hst.integers(0, 2**32 - 1))
def test_real_embedding_preserves_forms(k, seed):
    rng = np.random.default_rng(seed)
    emb = matops.real_embed(k)
    a = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    b = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    w = random_hpd(rng, k)
    x = emb.vec(a)
    assert np.allclose(emb.unvec(x), a)
    assert x @ emb.mat(w) @ x == pytest.approx(np.real(np.vdot(a, w @ a)), rel=1e-10)
    assert emb.vec(b) @ x == pytest.approx(np.real(np.vdot(b, a)), abs=1e-10)
    assert np.allclose(emb.unmat(emb.mat(w)), w)
    assert np.allclose(emb.mat(w), emb.mat(w).T)


def test_real_embed_rejects_zero():
    with pytest.raises(ValueError):
        matops.real_embed(0)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_hermitian_basis_orthonormal(k):
    b = matops.hermitian_basis(k)
    assert b.shape == (k * k, k, k)
    gram = np.real(np.einsum("iab,jba->ij", b, b))
    assert np.allclose(gram, np.eye(k * k))
    assert all(np.allclose(x, x.conj().T) for x in b)
    assert not b.flags.writeable


def test_herm_coords_round_trip(rng):
    b = matops.hermitian_basis(4)
    m = random_hpd(rng, 4)
    assert np.allclose(matops.herm_from_coords(matops.herm_coords(m, b), b), m)


def test_logdet_hessian_matches_finite_differences(rng):
    k = 3
    b = matops.hermitian_basis(k)
    x = random_hpd(rng, k, shift=0.5)
    th = matops.herm_coords(x, b)
    h = matops.logdet_hessian(np.linalg.inv(x), b)

    def grad(t):
        return -matops.herm_coords(np.linalg.inv(matops.herm_from_coords(t, b)), b)

    eps = 1e-6
    fd = np.array([(grad(th + eps * e) - grad(th - eps * e)) / (2 * eps) for e in np.eye(k * k)])
    assert np.allclose(h, fd, atol=1e-7)
    assert np.all(np.linalg.eigvalsh(h) > 0)
