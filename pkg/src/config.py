"""
Config - Method and run settings, key=value config files and custom problem files
"""

import logging
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.errors import InvalidArgumentError
from src.quadrature import MAX_ORDER, MIN_ORDER
from src.utils import default_output_dir

logger = logging.getLogger(__name__)

METHODS = ("cr", "dg")
PROBLEMS = ("ex1", "ex2", "neumann")

DEFAULT_LAM = 1.0
DEFAULT_YA = -0.1
DEFAULT_YB = 0.25


@dataclass(frozen=True)
class MethodConfig:
    """Discretization and solver settings"""

    method: str = "cr"
    sigma: float = 10.0
    load_order: int = 6
    error_order: int = 6
    estimator_order: int = 6
    solver_tol: float = 1e-10
    pdas_max_iter: int = 50
    pdas_tol: float = 1e-9

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"Unknown method {self.method!r}; expected one of {METHODS}.")
        if self.method == "dg" and not self.sigma > 0:
            raise InvalidArgumentError(f"DG penalty sigma must be positive, got {self.sigma}.")
        for name in ("load_order", "error_order", "estimator_order"):
            order = getattr(self, name)
            if not MIN_ORDER <= order <= MAX_ORDER:
                raise InvalidArgumentError(f"{name}={order} outside {MIN_ORDER}..{MAX_ORDER}.")
        if self.pdas_max_iter < 1:
            raise InvalidArgumentError("pdas_max_iter must be at least 1.")
        if not self.solver_tol > 0 or not self.pdas_tol > 0:
            raise InvalidArgumentError("Tolerances must be positive.")


@dataclass
class RunConfig:
    """Everything a CLI command needs; file values are overridden by flags"""

    command: str = "solve"
    problem: str = "ex1"
    method: str = "cr"
    sigma: float = 10.0
    lam: Optional[float] = None
    ya: Optional[float] = None
    yb: Optional[float] = None
    levels: int = 6
    n: int = 4
    max_ndof: int = 100000
    theta: float = 0.3
    output_dir: str = field(default_factory=default_output_dir)
    seed: int = 0
    dump_mesh: bool = False
    dump_matrices: bool = False
    dump_solution: bool = False
    dump_indicators: bool = False
    probes: bool = False
    parallel: bool = False
    uniform: bool = False
    pdf: bool = False
    error_order: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"Unknown method {self.method!r}; expected one of {METHODS}.")
        if self.problem not in PROBLEMS and not str(self.problem).endswith((".cfg", ".txt", ".ini")):
            raise InvalidArgumentError(
                f"Unknown problem {self.problem!r}; expected {PROBLEMS} or a problem file."
            )
        if self.lam is not None and not self.lam > 0:
            raise InvalidArgumentError(f"lam must be positive, got {self.lam}.")
        if self.ya is not None and self.yb is not None and not self.ya < self.yb:
            raise InvalidArgumentError(f"ya={self.ya} must be below yb={self.yb}.")
        if self.levels < 1 or self.n < 1:
            raise InvalidArgumentError("levels and n must be positive.")
        if not 0 < self.theta <= 1:
            raise InvalidArgumentError(f"theta must lie in (0, 1], got {self.theta}.")
        if self.max_ndof < 1:
            raise InvalidArgumentError("max_ndof must be positive.")

    def control_parameters(
        self, lam: float = DEFAULT_LAM, ya: float = DEFAULT_YA, yb: float = DEFAULT_YB
    ) -> Tuple[float, float, float]:
        """
        Regularization weight and bounds, falling back to a problem's own values

        Args:
            lam, ya, yb: values used where the run settings leave them unset

        Returns:
            (lam, ya, yb)
        """
        lam = lam if self.lam is None else self.lam
        ya = ya if self.ya is None else self.ya
        yb = yb if self.yb is None else self.yb
        if not lam > 0:
            raise InvalidArgumentError(f"lam must be positive, got {lam}.")
        if not ya < yb:
            raise InvalidArgumentError(f"ya={ya} must be below yb={yb}.")
        return lam, ya, yb

    @property
    def is_custom(self) -> bool:
        return self.problem not in PROBLEMS

    def method_config(self) -> MethodConfig:
        order = self.error_order
        if order is None:
            # singular L-shape fields need the higher order
            order = 8 if self.problem == "ex2" else 6
        return MethodConfig(
            method=self.method, sigma=self.sigma, error_order=order, estimator_order=order
        )

    @classmethod
    def from_sources(cls, file_values: Dict[str, Any], overrides: Dict[str, Any]) -> "RunConfig":
        """
        Merge config-file values with explicit CLI overrides

        Args:
            file_values: parsed key=value pairs (strings)
            overrides: values given on the command line (None means unset)

        Returns:
            RunConfig
        """
        known = {f.name: f for f in fields(cls)}
        values: Dict[str, Any] = {}
        for key, raw in file_values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise InvalidArgumentError(f"Unknown config key {key!r}.")
            values[name] = _coerce(name, raw, cls)
        for key, value in overrides.items():
            if value is not None and key in known:
                values[key] = value
        return cls(**values)


def _coerce(name: str, raw: str, cls) -> Any:
    default = {f.name: f for f in fields(cls)}[name].default
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int) or name == "error_order":
            return int(text)
        if isinstance(default, float) or name in ("lam", "ya", "yb"):
            return parse_float(text)
    except ValueError as e:
        raise InvalidArgumentError(f"Invalid value {raw!r} for {name}.") from e
    return text


def parse_float(text: str) -> float:
    """float() that also accepts inf, -inf, +inf"""
    return float(str(text).strip().lower().replace("infinity", "inf"))


def parse_key_values(text: str) -> Dict[str, str]:
    """
    Parse flat key=value lines

    Args:
        text: file contents; '#' starts a comment, blank lines are skipped

    Returns:
        Ordered mapping of keys to raw string values
    """
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"Line {lineno}: expected key=value, got {line!r}.")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path: Optional[str]) -> Dict[str, str]:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return parse_key_values(f.read())


_EXPRESSION_NAMES = {
    "pi": np.pi,
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "arctan2": np.arctan2,
    "minimum": np.minimum,
    "maximum": np.maximum,
}


def compile_vector_field(expr_x: str, expr_y: str):
    """
    Turn two expressions in x and y into a vector field

    Only numpy elementwise functions and pi are in scope.
    """
    try:
        codes = [compile(e, "<field>", "eval") for e in (expr_x, expr_y)]
    except SyntaxError as e:
        raise InvalidArgumentError(f"Invalid field expression: {e}") from e

    def field_fn(x, y):
        scope = dict(_EXPRESSION_NAMES, x=x, y=y)
        comps = [
            np.broadcast_to(np.asarray(eval(code, {"__builtins__": {}}, scope), dtype=float), np.shape(x))
            for code in codes
        ]
        return np.stack(comps, axis=-1)

    return field_fn


@dataclass
class CustomProblem:
    """A problem described by a key=value file"""

    kind: str
    domain: str
    f: Any
    u_d: Any
    lam: float
    ya: float
    yb: float


def load_problem_file(path: str) -> CustomProblem:
    """
    Read a custom problem: kind, domain, f_x, f_y, ud_x, ud_y, lam, ya, yb

    Args:
        path: key=value problem file

    Returns:
        CustomProblem
    """
    with open(path, "r", encoding="utf-8") as f:
        values = parse_key_values(f.read())
    required = ("f_x", "f_y", "ud_x", "ud_y")
    missing = [k for k in required if k not in values]
    if missing:
        raise InvalidArgumentError(f"Problem file {path} lacks keys {missing}.")
    kind = values.get("kind", "distributed")
    domain = values.get("domain", "square")
    if kind not in ("distributed", "neumann"):
        raise InvalidArgumentError(f"Unknown problem kind {kind!r}.")
    if domain not in ("square", "lshape"):
        raise InvalidArgumentError(f"Unknown domain {domain!r}.")
    try:
        lam = parse_float(values.get("lam", "1"))
        ya = parse_float(values.get("ya", "-inf"))
        yb = parse_float(values.get("yb", "inf"))
    except ValueError as e:
        raise InvalidArgumentError(f"Invalid number in problem file {path}: {e}") from e
    logger.info("loaded custom %s problem on %s from %s", kind, domain, path)
    return CustomProblem(
        kind=kind,
        domain=domain,
        f=compile_vector_field(values["f_x"], values["f_y"]),
        u_d=compile_vector_field(values["ud_x"], values["ud_y"]),
        lam=lam,
        ya=ya,
        yb=yb,
    )
