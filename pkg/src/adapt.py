"""
Adapt - Doerfler marking and the solve/estimate/mark/refine loop
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import MethodConfig
from src.errors import InvalidArgumentError, LevelFailureError, SolverError
from src.estimator import estimate
from src.mesh import Triangulation, refine_nvb
from src.optctrl import ProblemSpec, cost, solve_optimality
from src.verify import ErrorRecord, ManufacturedCase, ReliabilityMonitor, error_norms

logger = logging.getLogger(__name__)

DEFAULT_THETA = 0.3

HISTORY_COLUMNS = [
    "level",
    "Ndof",
    "h",
    "eta_total",
    "err_u_energy",
    "err_p_l2",
    "err_phi_energy",
    "err_r_l2",
    "err_y",
    "cost",
    "seconds",
]


def doerfler_mark(eta_sq, theta: float = DEFAULT_THETA) -> Tuple[np.ndarray, bool]:
    """
    Minimal set carrying a theta fraction of the squared estimator

    Args:
        eta_sq: per-element eta_T^2, nonnegative
        theta: bulk parameter in (0, 1]

    Returns:
        (sorted marked indices, terminal) where terminal is True when every
        indicator is zero and nothing can be marked
    """
    eta_sq = np.asarray(eta_sq, dtype=float)
    if not 0 < theta <= 1:
        raise InvalidArgumentError(f"Bulk parameter theta must lie in (0, 1], got {theta}.")
    if np.any(eta_sq < 0) or not np.all(np.isfinite(eta_sq)):
        raise InvalidArgumentError("Indicators must be finite and nonnegative.")
    total = eta_sq.sum()
    if total == 0:
        return np.zeros(0, dtype=np.int64), True
    if theta >= 1:
        return np.flatnonzero(eta_sq > 0), False
    # stable sort keeps ties in index order
    order = np.argsort(-eta_sq, kind="stable")
    cumulative = np.cumsum(eta_sq[order])
    count = int(np.searchsorted(cumulative, theta * cumulative[-1], side="left")) + 1
    return np.sort(order[:count]), False


@dataclass
class LevelRecord:
    level: int
    Ndof: int
    h: float
    eta_total: float
    err_u_energy: float = np.nan
    err_p_l2: float = np.nan
    err_phi_energy: float = np.nan
    err_r_l2: float = np.nan
    err_y: float = np.nan
    cost: float = np.nan
    seconds: float = 0.0
    iterations: int = 0
    n_marked: int = 0


@dataclass
class ConvergenceHistory:
    """Per-level Ndof, estimator, errors and timings"""

    records: List[LevelRecord] = field(default_factory=list)
    final_mesh: Optional[Triangulation] = None
    mode: str = "adaptive"

    def add(self, record: LevelRecord):
        if self.records and record.Ndof <= self.records[-1].Ndof:
            raise InvalidArgumentError(
                f"Ndof must increase across levels: {self.records[-1].Ndof} -> {record.Ndof}."
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(r) for r in self.records])
        if frame.empty:
            return pd.DataFrame(columns=HISTORY_COLUMNS)
        return frame[HISTORY_COLUMNS]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)


def adaptive_loop(
    spec: ProblemSpec,
    config: Optional[MethodConfig] = None,
    theta: float = DEFAULT_THETA,
    max_ndof: int = 100000,
    case: Optional[ManufacturedCase] = None,
    initial_mesh: Optional[Triangulation] = None,
    uniform: bool = False,
    max_levels: int = 100,
) -> ConvergenceHistory:
    """
    Solve, estimate, mark and refine until Ndof reaches max_ndof

    Args:
        spec: problem data
        config: method settings
        theta: Doerfler bulk parameter
        max_ndof: stop once a level has at least this many unknowns
        case: exact solution, adds error columns when given
        initial_mesh: starting mesh (required)
        uniform: mark every element instead of Doerfler marking
        max_levels: hard cap on the number of levels

    Returns:
        ConvergenceHistory with the final mesh attached
    """
    if initial_mesh is None:
        raise InvalidArgumentError("adaptive_loop needs an initial mesh.")
    config = config or MethodConfig()
    history = ConvergenceHistory(mode="uniform" if uniform else "adaptive")
    monitor = ReliabilityMonitor()
    mesh = initial_mesh

    for level in range(max_levels):
        start = time.perf_counter()
        try:
            sol = solve_optimality(spec, mesh, config)
        except SolverError as e:
            raise LevelFailureError(f"Solve failed on level {level}: {e}", level) from e
        indicators = estimate(sol, spec, mesh, config)
        record = LevelRecord(
            level=level,
            Ndof=sol.ndof,
            h=mesh.h,
            eta_total=indicators.total,
            cost=cost(sol, spec, config.error_order),
            iterations=sol.iterations,
        )
        if case is not None:
            errors: ErrorRecord = error_norms(sol, case, mesh, config)
            for name, value in errors.as_dict().items():
                if hasattr(record, name):
                    setattr(record, name, value)
            consistency = float(np.sqrt(indicators.term("consistency").sum()))
            monitor.add(errors.total, indicators.total, consistency)

        if uniform:
            marked, terminal = np.flatnonzero(indicators.eta_sq >= 0), False
        else:
            marked, terminal = doerfler_mark(indicators.eta_sq, theta)
        record.n_marked = len(marked)
        record.seconds = time.perf_counter() - start
        history.add(record)
        logger.info(
            "%s level %d: Ndof=%d, eta=%.4e, marked %d of %d",
            history.mode, level, record.Ndof, record.eta_total, len(marked), mesh.n_triangles,
        )
        history.final_mesh = mesh
        if record.Ndof >= max_ndof or terminal:
            break
        mesh = refine_nvb(mesh, marked)

    if case is not None and len(monitor.ratios) > 1 and not monitor.stable:
        logger.warning("reliability ratio grew by more than a factor 2 across levels")
    return history
