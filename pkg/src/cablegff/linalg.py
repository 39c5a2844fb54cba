"""Factorizations of symmetric positive definite precision matrices."""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_LIMIT = 1500


class SingularWindow(np.linalg.LinAlgError):
    """Raised when the precision matrix is singular (recurrent window)."""


class PrecisionFactor:
    """Cholesky-type factorization ``Q = C C^T`` used for solves and sampling.

    Small systems use a dense Cholesky.  Larger ones use SuperLU in symmetric
    mode without pivoting, from which the sparse Cholesky factor is read off
    (``U = D L^T`` for an SPD matrix).
    """

    def __init__(self, Q):
        Q = sp.csc_matrix(Q)
        self.n = Q.shape[0]
        self.Q = Q
        self.dense = self.n <= DENSE_LIMIT
        if self.dense:
            try:
                self._c = sla.cholesky(Q.toarray(), lower=True)
            except np.linalg.LinAlgError:
                raise SingularWindow("recurrent window: precision matrix is singular") from None
            if np.min(np.diag(self._c)) <= 1e-13 * np.max(np.diag(self._c)):
                raise SingularWindow("recurrent window: precision matrix is singular")
            return
        lu = spla.splu(Q, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options={"SymmetricMode": True})
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise RuntimeError("symmetric factorization pivoted off the diagonal")
        d = lu.U.diagonal()
        if np.any(d <= 1e-13 * np.max(np.abs(d))):
            raise SingularWindow("recurrent window: precision matrix is singular")
        self._lu = lu
        # Pr Q Pc = L U with Pc = Pr^T; C = Pr^T L sqrt(D) satisfies Q = C C^T.
        n = self.n
        Pr = sp.csc_matrix((np.ones(n), (lu.perm_r, np.arange(n))), shape=(n, n))
        self._C = (Pr.T @ lu.L @ sp.diags(np.sqrt(d))).tocsr()

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.dense:
            return sla.cho_solve((self._c, True), b)
        return self._lu.solve(b)

    def inverse(self):
        return self.solve(np.eye(self.n))

    def sample(self, z):
        """Map standard normals ``z`` (shape ``(n, k)``) to ``N(0, Q^{-1})`` draws."""
        z = np.asarray(z, dtype=float)
        if self.dense:
            return sla.solve_triangular(self._c, z, lower=True, trans="T")
        return self._lu.solve(self._C @ z)
