"""Small dense Hermitian kernels: eigendecomposition, inverse square roots,
log-determinants, and real coordinates for complex variables."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


def hermitize(m):
    m = np.asarray(m)
    return 0.5 * (m + m.conj().T)


@dataclass(frozen=True)
class HermitianEig:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns

    def reconstruct(self):
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.conj().T


def eigh(m) -> HermitianEig:
    w, u = np.linalg.eigh(hermitize(m))
    return HermitianEig(w[::-1].copy(), u[:, ::-1].copy())


def _pd_eig(m, rcond=1e-12):
    e = eigh(m)
    w = e.eigenvalues
    if w.size and (w[-1] <= 0 or w[-1] <= rcond * w[0]):
        cond = np.inf if w[-1] <= 0 else w[0] / w[-1]
        raise NotPositiveDefiniteError(
            f"matrix is not safely positive definite (eigenvalues [{w[-1]:.3e}, {w[0]:.3e}], "
            f"condition number {cond:.3e})"
        )
    return e


def inv_sqrt(m):
    """Hermitian inverse square root X with X m X = I."""
    e = _pd_eig(m)
    u = e.eigenvectors
    return hermitize((u / np.sqrt(e.eigenvalues)) @ u.conj().T)


def logdet(m) -> float:
    """Natural log-determinant of a Hermitian positive definite matrix."""
    w = eigh(m).eigenvalues
    if w.size and w[-1] <= 0:
        raise NotPositiveDefiniteError(f"logdet of non-PD matrix (min eigenvalue {w[-1]:.3e})")
    return float(np.sum(np.log(w)))


def logdet_chol(m) -> float:
    """Cholesky log-determinant; cheaper, used inside solver loops."""
    try:
        c = np.linalg.cholesky(hermitize(m))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from None
    return float(2.0 * np.sum(np.log(np.diag(c).real)))


def is_pd(m) -> bool:
    try:
        np.linalg.cholesky(hermitize(m))
    except np.linalg.LinAlgError:
        return False
    return True


def inv(m):
    return hermitize(np.linalg.inv(hermitize(m)))


def quad_inv(m, a) -> float:
    """a^H m^{-1} a for Hermitian PD m."""
    a = np.asarray(a)
    return float(np.real(np.vdot(a, np.linalg.solve(hermitize(m), a))))


@dataclass(frozen=True)
class RealEmbedding:
    """Bijection C^K <-> R^2K, x = [Re a; Im a].

    Hermitian W maps to the real symmetric [[Re W, -Im W], [Im W, Re W]] so that
    a^H W a == x^T W_r x, and Re(b^H a) == real(b) . x.
    """

    dim: int

    def vec(self, a):
        a = np.asarray(a, dtype=complex).reshape(self.dim)
        return np.concatenate([a.real, a.imag])

    def unvec(self, x):
        x = np.asarray(x, dtype=float)
        return x[: self.dim] + 1j * x[self.dim :]

    def mat(self, w):
        w = np.asarray(w, dtype=complex)
        return np.block([[w.real, -w.imag], [w.imag, w.real]])

    def unmat(self, wr):
        k = self.dim
        return wr[:k, :k] + 1j * wr[k:, :k]


def real_embed(dim: int) -> RealEmbedding:
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    return RealEmbedding(int(dim))


@lru_cache(maxsize=None)
def hermitian_basis(k: int) -> np.ndarray:
    """Orthonormal basis (under Re tr(A^H B)) of K x K Hermitian matrices, shape (K*K, K, K)."""
    basis = []
    for i in range(k):
        e = np.zeros((k, k), dtype=complex)
        e[i, i] = 1.0
        basis.append(e)
    s = 1.0 / np.sqrt(2.0)
    for i in range(k):
        for j in range(i + 1, k):
            e = np.zeros((k, k), dtype=complex)
            e[i, j] = e[j, i] = s
            basis.append(e)
    for i in range(k):
        for j in range(i + 1, k):
            e = np.zeros((k, k), dtype=complex)
            e[i, j] = 1j * s
            e[j, i] = -1j * s
            basis.append(e)
    out = np.array(basis)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def diagonal_basis(k: int) -> np.ndarray:
    out = hermitian_basis(k)[:k].copy()
    out.setflags(write=False)
    return out


def _basis_matrix(basis):
    """Columns are the row-major vectorizations of the basis matrices."""
    b = basis.reshape(basis.shape[0], -1).T
    return b, b.conj().T


def herm_coords(m, basis):
    """Coordinates of Hermitian m in `basis`: Re tr(m B_i)."""
    _, bh = _basis_matrix(basis)
    return np.real(bh @ np.asarray(m, dtype=complex).ravel())


def herm_from_coords(theta, basis):
    b, _ = _basis_matrix(basis)
    k = basis.shape[1]
    return (b @ np.asarray(theta, dtype=float)).reshape(k, k)


def logdet_hessian(x_inv, basis):
    """Hessian of -logdet(X) in basis coordinates: Re tr(X^-1 B_i X^-1 B_j)."""
    b, bh = _basis_matrix(basis)
    return np.real(bh @ np.kron(x_inv, x_inv.T) @ b)
