"""Minimal-gradient solutions of the discrete divergence equation.

For a cell region ``R`` the solver returns the face field ``u`` minimizing
``||grad u||_2`` subject to ``div u = f`` on ``R`` and ``u = 0`` on every
face that does not separate two cells of ``R``. Constrained faces are
eliminated, so they are exact zeros.

The KKT system ``[[A, B^T], [B, 0]]`` has the block Laplacian ``A`` and the
divergence ``B`` with one row dropped per connected component of ``R`` (the
dropped row is implied by the others when ``f`` has zero mean there).
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .grid import MaskedGrid, face_within, unflatten


class NonZeroMean(ValueError):
    """The right-hand side has non-zero mean on a connected part of the region."""


class NonConvergence(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"no convergence after {iterations} iterations, residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


MEAN_TOL = 1e-12


class DivSolver:
    """Factorized minimal-gradient solver on a fixed region.

    Parameters
    ----------
    grid : MaskedGrid
    region : bool array of shape ``grid.dims``
    method : {"schur-cg", "direct", "dense"}
        ``schur-cg`` runs diagonally preconditioned conjugate gradients on
        the Schur complement ``B A^-1 B^T``; ``direct`` factors the sparse
        KKT matrix once; ``dense`` solves the dense KKT system and is meant
        as an oracle on small grids.
    tol : float
        Relative residual target of the iterative method.
    """

    def __init__(self, grid: MaskedGrid, region: np.ndarray, method: str = "schur-cg", tol: float = 1e-10, max_iter: int = 5000):
        if method not in ("schur-cg", "direct", "dense"):
            raise ValueError(f"unknown method {method!r}")
        self.grid = grid
        self.region = np.asarray(region, dtype=bool)
        self.method = method
        self.tol = tol
        self.max_iter = max_iter
        self.iterations = 0
        self._assemble()
        self._factor()

    # -- assembly ---------------------------------------------------------

    def _assemble(self):
        g = self.grid
        d, h = g.d, g.h
        self.free = [face_within(g, self.region, a) for a in range(d)]
        self.face_sizes = [int(np.prod(g.face_shape(a))) for a in range(d)]
        offsets = np.concatenate([[0], np.cumsum(self.face_sizes)])
        self.face_offsets = offsets
        # unknown numbering
        idx = []
        count = 0
        for a in range(d):
            m = np.full(g.face_shape(a), -1, dtype=np.int64)
            k = int(self.free[a].sum())
            m[self.free[a]] = np.arange(count, count + k)
            idx.append(m)
            count += k
        self.index = idx
        self.n_unknowns = count
        self.global_faces = np.concatenate([offsets[a] + np.flatnonzero(self.free[a].ravel()) for a in range(d)])

        cells = np.full(g.dims, -1, dtype=np.int64)
        cells[self.region] = np.arange(int(self.region.sum()))
        self.cell_index = cells
        self.n_rows = int(self.region.sum())

        # divergence: face k along a is the upper face of cell k-1 and the lower face of cell k
        rows, cols, vals = [], [], []
        for a in range(d):
            col = idx[a]
            sel = col >= 0
            pos = np.argwhere(sel)
            up = pos.copy()
            up[:, a] -= 1
            rows += [cells[tuple(up.T)], cells[tuple(pos.T)]]
            cols += [col[sel], col[sel]]
            vals += [np.full(len(pos), 1.0 / h), np.full(len(pos), -1.0 / h)]
        B = sp.csr_matrix(
            (np.concatenate(vals) if vals else [], (np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [])),
            shape=(self.n_rows, count),
        )

        # gradient energy: pairs of same-component faces along each axis
        w = h ** (d - 2)
        ar, ac, av = [], [], []
        for a in range(d):
            for b in range(d):
                pad = [(0, 0)] * d
                pad[b] = (1, 1)
                P = np.pad(idx[a], pad, constant_values=-1)
                lo = [slice(None)] * d
                hi = [slice(None)] * d
                lo[b] = slice(0, -1)
                hi[b] = slice(1, None)
                left, right = P[tuple(lo)].ravel(), P[tuple(hi)].ravel()
                keep = (left >= 0) | (right >= 0)
                left, right = left[keep], right[keep]
                for x in (left, right):
                    s = x >= 0
                    ar.append(x[s])
                    ac.append(x[s])
                    av.append(np.full(int(s.sum()), w))
                both = (left >= 0) & (right >= 0)
                ar += [left[both], right[both]]
                ac += [right[both], left[both]]
                av += [np.full(int(both.sum()), -w)] * 2
        A = sp.csc_matrix(
            (np.concatenate(av) if av else [], (np.concatenate(ar) if ar else [], np.concatenate(ac) if ac else [])),
            shape=(count, count),
        )
        self.A = A

        # connected parts of the region through free faces
        conn = (abs(B) @ abs(B).T).tocsr() if count else sp.csr_matrix((self.n_rows, self.n_rows))
        ncomp, comp = connected_components(conn, directed=False)
        self.components = comp
        _, first = np.unique(comp, return_index=True)
        keep_rows = np.ones(self.n_rows, dtype=bool)
        keep_rows[first] = False
        self.kept_rows = np.flatnonzero(keep_rows)
        self.B = B
        self.Br = B[self.kept_rows].tocsr()

    def _factor(self):
        nr = len(self.kept_rows)
        n = self.n_unknowns
        if self.method == "dense":
            K = np.zeros((n + nr, n + nr))
            K[:n, :n] = self.A.toarray()
            K[:n, n:] = self.Br.T.toarray()
            K[n:, :n] = self.Br.toarray()
            self._dense = K
        elif self.method == "direct":
            K = sp.bmat([[self.A, self.Br.T], [self.Br, None]], format="csc")
            self._kkt = splu(K) if n + nr else None
        else:
            self._alu = splu(self.A) if n else None
            if n:
                diag_inv = 1.0 / self.A.diagonal()
                s_diag = np.asarray(self.Br.multiply(self.Br) @ diag_inv).ravel()
                self._precond = 1.0 / np.where(s_diag > 0, s_diag, 1.0)

    # -- solves -----------------------------------------------------------

    def check_mean(self, f_region: np.ndarray) -> None:
        """Raise NonZeroMean unless ``f`` has zero mean on every connected part."""
        norm = math.sqrt(float(np.mean(f_region**2))) if f_region.size else 0.0
        sums = np.bincount(self.components, weights=f_region)
        counts = np.bincount(self.components)
        means = np.abs(sums / counts)
        if means.size and means.max() > MEAN_TOL * max(norm, np.finfo(float).tiny):
            raise NonZeroMean(f"right-hand side mean {means.max():.3e} exceeds {MEAN_TOL:g} x norm {norm:.3e}")

    def _solve_reduced(self, rhs_u: np.ndarray, rhs_p: np.ndarray) -> tuple:
        """Solve ``A u + Br^T p = rhs_u``, ``Br u = rhs_p``."""
        n = self.n_unknowns
        if n == 0:
            return np.zeros(0), np.zeros(len(rhs_p))
        if self.method == "dense":
            sol = np.linalg.solve(self._dense, np.concatenate([rhs_u, rhs_p]))
            return sol[:n], sol[n:]
        if self.method == "direct":
            sol = self._kkt.solve(np.concatenate([rhs_u, rhs_p]))
            return sol[:n], sol[n:]
        # Schur complement: S p = Br A^-1 rhs_u - rhs_p, u = A^-1 (rhs_u - Br^T p)
        a_inv_ru = self._alu.solve(rhs_u) if np.any(rhs_u) else np.zeros(n)
        target = self.Br @ a_inv_ru - rhs_p
        p = self._pcg(target)
        u = self._alu.solve(rhs_u - self.Br.T @ p)
        return u, p

    def _pcg(self, b: np.ndarray) -> np.ndarray:
        norm_b = float(np.linalg.norm(b))
        x = np.zeros_like(b)
        if norm_b == 0:
            self.iterations = 0
            return x
        r = b.copy()
        z = self._precond * r
        p = z.copy()
        rz = float(r @ z)
        for it in range(1, self.max_iter + 1):
            Sp = self.Br @ self._alu.solve(self.Br.T @ p)
            alpha = rz / float(p @ Sp)
            x += alpha * p
            r -= alpha * Sp
            res = float(np.linalg.norm(r)) / norm_b
            if res <= self.tol:
                # confirm with the true residual
                true = float(np.linalg.norm(b - self.Br @ self._alu.solve(self.Br.T @ x))) / norm_b
                if true <= self.tol:
                    self.iterations = it
                    return x
                r = b - self.Br @ self._alu.solve(self.Br.T @ x)
            z = self._precond * r
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        raise NonConvergence(self.max_iter, res)

    def solve(self, f: np.ndarray, check: bool = True) -> tuple:
        """Face field with ``div u = f`` on the region; ``f`` has shape ``dims``."""
        f_region = np.asarray(f, dtype=float)[self.region]
        if check:
            self.check_mean(f_region)
        u, _ = self._solve_reduced(np.zeros(self.n_unknowns), f_region[self.kept_rows])
        return self.scatter(u)

    def solve_adjoint(self, v: tuple) -> np.ndarray:
        """Adjoint of ``solve`` (as a map from region cells to faces)."""
        vu = self.gather(v)
        _, p = self._solve_reduced(vu, np.zeros(len(self.kept_rows)))
        out = np.zeros(self.grid.dims)
        vals = np.zeros(self.n_rows)
        vals[self.kept_rows] = p
        out[self.region] = vals
        return out

    def scatter(self, u: np.ndarray) -> tuple:
        full = np.zeros(self.grid.n_faces)
        full[self.global_faces] = u
        return unflatten(self.grid, full)

    def gather(self, v: tuple) -> np.ndarray:
        return np.concatenate([c.ravel() for c in v])[self.global_faces]

    def energy(self, u: tuple) -> float:
        x = self.gather(u)
        return float(x @ (self.A @ x))


def solve_div_minimal(f, grid: MaskedGrid, region, q: float = 2.0, method: str = "schur-cg", tol: float = 1e-10) -> tuple:
    """Minimal ``||grad u||_2`` solution of ``div u = f`` on ``region``.

    Only ``q = 2`` is solved; other exponents are measured on this field.

    Raises
    ------
    NonZeroMean
        If ``f`` is not mean-zero on a connected part of ``region``.
    NonConvergence
        If the iterative solve stalls.
    """
    if q != 2:
        raise ValueError("the solver minimizes the 2-norm only")
    return DivSolver(grid, region, method=method, tol=tol).solve(f)
