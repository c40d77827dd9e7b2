"""
Saddle Solver - Block assembly and direct solution of symmetric indefinite systems
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from src.errors import ConvergenceFailureError, InvalidArgumentError, SolverFailureError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


@dataclass
class BlockSystem:
    """Assembled block matrix, right-hand side and the slice of each named block"""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    layout: Dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        n, m = self.matrix.shape
        if n != m or len(self.rhs) != n:
            raise InvalidArgumentError(
                f"Inconsistent system: matrix {self.matrix.shape}, rhs {len(self.rhs)}."
            )

    @classmethod
    def from_blocks(
        cls,
        names: Sequence[str],
        sizes: Mapping[str, int],
        blocks: Mapping[Tuple[str, str], sp.spmatrix],
        rhs: Optional[Mapping[str, np.ndarray]] = None,
    ) -> "BlockSystem":
        """
        Stack named blocks into one sparse matrix

        Args:
            names: block order; blocks of size zero are dropped
            sizes: unknowns per block
            blocks: (row name, column name) -> sparse block, missing means zero
            rhs: right-hand side per block, missing means zero

        Returns:
            BlockSystem
        """
        rhs = rhs or {}
        active = [name for name in names if sizes[name] > 0]
        grid: List[List[Optional[sp.spmatrix]]] = []
        for r in active:
            row = []
            for c in active:
                block = blocks.get((r, c))
                if block is not None and block.shape != (sizes[r], sizes[c]):
                    raise InvalidArgumentError(
                        f"Block ({r}, {c}) has shape {block.shape}, expected {(sizes[r], sizes[c])}."
                    )
                if block is None and r == c:
                    block = sp.csr_matrix((sizes[r], sizes[c]))
                row.append(block)
            grid.append(row)
        matrix = sp.bmat(grid, format="csr") if active else sp.csr_matrix((0, 0))

        layout: Dict[str, slice] = {}
        offset = 0
        parts = []
        for name in active:
            layout[name] = slice(offset, offset + sizes[name])
            offset += sizes[name]
            part = rhs.get(name)
            parts.append(np.zeros(sizes[name]) if part is None else np.asarray(part, dtype=float))
        vector = np.concatenate(parts) if parts else np.zeros(0)
        return cls(matrix=matrix, rhs=vector, layout=layout)

    def block(self, x: np.ndarray, name: str) -> np.ndarray:
        if name not in self.layout:
            return np.zeros(0)
        return x[self.layout[name]]

    def symmetry_error(self) -> float:
        diff = self.matrix - self.matrix.T
        return float(abs(diff).max()) if diff.nnz else 0.0


def solve_symmetric_indefinite(system: BlockSystem, tol: float = DEFAULT_TOL) -> np.ndarray:
    """
    Direct sparse LU solve with one step of iterative refinement

    Args:
        system: assembled block system
        tol: bound on the relative residual ||b - Kx|| / ||b||

    Returns:
        Solution vector
    """
    K = system.matrix.tocsc()
    b = system.rhs
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b)

    try:
        lu = splu(K)
    except RuntimeError as e:
        raise SolverFailureError(
            f"Sparse factorization failed: {e}",
            diagnostics={"shape": K.shape, "nnz": K.nnz, "message": str(e)},
        ) from e

    x = lu.solve(b)
    x += lu.solve(b - K @ x)
    if not np.all(np.isfinite(x)):
        pivots = np.abs(lu.U.diagonal())
        raise SolverFailureError(
            "Sparse factorization produced non-finite values.",
            diagnostics={"shape": K.shape, "nnz": K.nnz, "min_pivot": float(pivots.min())},
        )

    residual = float(np.linalg.norm(b - K @ x) / b_norm)
    logger.debug("direct solve: n=%d, nnz=%d, relative residual %.3e", K.shape[0], K.nnz, residual)
    if residual > tol:
        raise ConvergenceFailureError(
            f"Relative residual {residual:.3e} exceeds tolerance {tol:.1e}.", residual, tol
        )
    return x
