'''
Kronecker-product algebra.

Vectors are stacked column-major throughout, so that

    (A ⊗ B) vec(X) = vec(B X Aᵀ)

holds. kron_materialize() builds the full product and exists as an
oracle; kron_matvec() never forms it.
'''
import numpy as np
from scipy import linalg

from kronadapt.exceptions import DimensionMismatch, SizeOverflow, InvalidSpec
from kronadapt.utils import as_matrix, as_vector, element_budget
from kronadapt.validators import validate_positive_int

__all__ = [
    'vec',
    'unvec',
    'kron_materialize',
    'kron_matvec',
    'kron_matvec_cost',
    'numerical_rank',
    'element_budget',
]


def vec(m):
    '''
    Stack the columns of 'm' into one vector.
    '''
    m = as_matrix(m, field='M')
    return m.reshape(-1, order='F')


def unvec(v, m, n):
    '''
    Unstack a vector into an m x n matrix, column-major.
    Exact inverse of vec().
    '''
    m = validate_positive_int(m, field='m')
    n = validate_positive_int(n, field='n')
    v = as_vector(v, field='v')
    if v.shape[0] != m * n:
        raise DimensionMismatch(
            'Vector length does not match the target shape.',
            params={'len': v.shape[0], 'shape': (m, n)}
        )
    return v.reshape((m, n), order='F')


def kron_materialize(a, b, budget=None):
    '''
    Return A ⊗ B as a dense matrix, block (i, j) equal to A[i, j] * B.

    budget
        maximum element count of the result. Defaults to
        element_budget().
    '''
    a = as_matrix(a, field='A')
    b = as_matrix(b, field='B')
    if budget is None:
        budget = element_budget()
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > budget:
        raise SizeOverflow(
            'Kronecker product exceeds the element budget.',
            params={'elements': rows * cols, 'budget': budget}
        )
    return np.kron(a, b)


def kron_matvec(a, b, x):
    '''
    Compute (A ⊗ B) x as vec(B unvec(x) Aᵀ), without forming A ⊗ B.

    x
        a vector of length a2*b2, or an (a2*b2) x n matrix whose columns
        are each multiplied.
    '''
    a = as_matrix(a, field='A')
    b = as_matrix(b, field='B')
    x = np.asarray(x, dtype=np.float64)
    a1, a2 = a.shape
    b1, b2 = b.shape
    if x.ndim not in (1, 2) or x.shape[0] != a2 * b2:
        raise DimensionMismatch(
            'Vector length must equal a2 * b2.',
            params={'x': x.shape, 'a2*b2': a2 * b2}
        )
    if x.ndim == 1:
        xm = x.reshape((b2, a2), order='F')
        # multi_dot picks the cheaper of (B X) Aᵀ and B (X Aᵀ)
        return np.linalg.multi_dot([b, xm, a.T]).reshape(-1, order='F')

    n = x.shape[1]
    xm = x.reshape((b2, a2, n), order='F')
    y = np.einsum('kl,ljn,ij->kin', b, xm, a, optimize=True)
    return y.reshape((b1 * a1, n), order='F')


def kron_matvec_cost(a1, a2, b1, b2):
    '''
    Return (structured, materialized) scalar multiply-add counts for one
    product. The structured count takes the cheaper association order.
    '''
    left_first = b1 * b2 * a2 + b1 * a2 * a1
    right_first = b2 * a2 * a1 + b1 * b2 * a1
    return min(left_first, right_first), a1 * b1 * a2 * b2


def numerical_rank(m, tol=1e-9):
    '''
    Count singular values above tol * sigma_max. Zero for a zero matrix.
    '''
    if not tol > 0:
        raise InvalidSpec('Tolerance must be positive.', params={'tol': tol})
    m = as_matrix(m, field='M')
    s = linalg.svdvals(m)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))
