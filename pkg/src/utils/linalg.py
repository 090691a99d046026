"""
Small dense Hermitian linear algebra helpers.
"""

import numpy as np

from src.utils.errors import ModelDomainError

HERMITIAN_TOL = 1e-10


def hermitian_asymmetry(matrix):
    """Largest elementwise deviation from Hermitian symmetry, relative to the matrix scale."""
    matrix = np.asarray(matrix)
    scale = max(1.0, float(np.max(np.abs(matrix), initial=0.0)))
    return float(np.max(np.abs(matrix - np.swapaxes(matrix.conj(), -1, -2)), initial=0.0)) / scale


def hermitian_eig(matrix, tol=HERMITIAN_TOL):
    """
    Eigen-decomposition of a Hermitian matrix (or a stack of them).

    Args:
        matrix (numpy.ndarray): Square Hermitian matrix, or array of shape (..., n, n)
        tol (float): Allowed relative asymmetry

    Returns:
        tuple: (eigenvalues ascending, orthonormal eigenvectors as columns)
    """
    matrix = np.asarray(matrix)
    if matrix.ndim < 2 or matrix.shape[-1] != matrix.shape[-2]:
        raise ModelDomainError(f"expected square matrix, got shape {matrix.shape}")
    if hermitian_asymmetry(matrix) > tol:
        raise ModelDomainError("matrix is not Hermitian")
    hermitian = 0.5 * (matrix + np.swapaxes(matrix.conj(), -1, -2))
    return np.linalg.eigh(hermitian)


def min_eigenvalue(matrix):
    """Smallest eigenvalue of a Hermitian matrix (or of each matrix in a stack)."""
    values, _ = hermitian_eig(matrix)
    return values[..., 0]


def project_psd(matrix):
    """Nearest PSD matrix in Frobenius norm (negative eigenvalues clipped to zero)."""
    values, vectors = hermitian_eig(matrix, tol=1e-6)
    values = np.clip(values, 0.0, None)
    return (vectors * values[..., None, :]) @ np.swapaxes(vectors.conj(), -1, -2)


def span_basis(vectors, rel_tol=1e-10):
    """
    Orthonormal basis of the span of a set of column vectors.

    Args:
        vectors (numpy.ndarray): Matrix of shape (n, m) whose columns span the subspace
        rel_tol (float): Singular values below rel_tol * largest are treated as zero

    Returns:
        numpy.ndarray: Matrix of shape (n, r) with orthonormal columns
    """
    vectors = np.asarray(vectors, dtype=complex)
    if vectors.size == 0:
        return np.zeros((vectors.shape[0], 0), dtype=complex)
    left, singular, _ = np.linalg.svd(vectors, full_matrices=False)
    if singular.size == 0 or singular[0] <= 0.0:
        return np.zeros((vectors.shape[0], 0), dtype=complex)
    rank = int(np.sum(singular > rel_tol * singular[0]))
    return left[:, :rank]
