"""Microgrid electrical model: validation and state-space/coupling matrix assembly.

Conventions used throughout the package:

* generators (DGs) are indexed 0..N-1 and lines 0..L-1 (0-based everywhere
  in the public API);
* each DG contributes the state triple (V, I_t, v): PCC voltage, filter
  current, and tracking-integrator state; each line contributes its current;
* the incidence matrix has one column per line with exactly one +1 (the DG
  the reference current leaves) and one -1 (the DG it enters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CplVoltageError,
    DisconnectedGraphError,
    DuplicateLineEndpointsError,
    ModelError,
    NonPositiveParameterError,
)

# Floor for constant-power load evaluation, as a fraction of the reference
# voltage; below it the P/V term is considered out of the model's domain.
CPL_VOLTAGE_FLOOR_FRACTION = 1e-3


@dataclass(frozen=True)
class DGParams:
    """Converter filter parameters and voltage reference of one generator."""

    R_t: float  # filter resistance [ohm]
    L_t: float  # filter inductance [H]
    C_t: float  # filter capacitance [F]
    V_r: float  # reference PCC voltage [V]


@dataclass(frozen=True)
class ZipLoad:
    """Constant-current / constant-impedance / constant-power load at a PCC."""

    I_const: float = 0.0  # constant current draw [A]
    Y_L: float = 0.0      # load conductance [S]
    P_star: float = 0.0   # constant power demand [W]


@dataclass(frozen=True)
class LineParams:
    """RL model of one distribution line between two generators."""

    R: float        # line resistance [ohm]
    L: float        # line inductance [H]
    from_dg: int    # DG index the reference current direction leaves
    to_dg: int      # DG index it enters


@dataclass(frozen=True)
class MicrogridSpec:
    """Declarative electrical description of the whole microgrid."""

    dgs: tuple[tuple[DGParams, ZipLoad], ...]
    lines: tuple[LineParams, ...] = ()

    @property
    def n_dgs(self) -> int:
        return len(self.dgs)

    @property
    def n_lines(self) -> int:
        return len(self.lines)


@dataclass(frozen=True)
class DGStateSpace:
    """Open-loop state matrices of one generator, state (V, I_t, v)."""

    A: np.ndarray  # 3x3
    B: np.ndarray  # 3x1
    H: np.ndarray  # 1x3 performance row, selects the integrator state
    d: np.ndarray  # exogenous channel slots (I_const, 0, V_r)


@dataclass(frozen=True)
class LineStateSpace:
    """First-order line dynamics dI/dt = A*I + B*u."""

    A: float
    B: float


@dataclass(frozen=True)
class CouplingBlocks:
    """Static coupling blocks between DG states and line states.

    dg_from_line[i][l] is the 3-vector through which line current l enters
    the state equation of DG i; line_from_dg[l][i] is the 1x3 row through
    which DG i's state drives line l. perf_selector is the block-diagonal
    performance map picking each DG's integrator state.
    """

    dg_from_line: np.ndarray   # (3N, L)
    line_from_dg: np.ndarray   # (L, 3N)
    perf_selector: np.ndarray  # (3N, 3N)


@dataclass(frozen=True)
class ValidatedModel:
    """A validated microgrid plus its incidence matrix and cached dimensions."""

    spec: MicrogridSpec
    incidence: np.ndarray  # (N, L), entries in {-1, 0, +1}

    @property
    def n_dgs(self) -> int:
        return self.spec.n_dgs

    @property
    def n_lines(self) -> int:
        return self.spec.n_lines

    @property
    def n_states(self) -> int:
        return 3 * self.n_dgs + self.n_lines

    def dg_params(self, i: int) -> DGParams:
        return self.spec.dgs[i][0]

    def load(self, i: int) -> ZipLoad:
        return self.spec.dgs[i][1]

    def line(self, l: int) -> LineParams:
        return self.spec.lines[l]

    def lines_at(self, i: int) -> list[int]:
        """Indices of lines incident to DG i."""
        return [l for l in range(self.n_lines) if self.incidence[i, l] != 0]


def _check_positive(value: float, name: str, where: str) -> None:
    if not np.isfinite(value) or value <= 0:
        raise NonPositiveParameterError(name, value, where)


def validation_errors(spec: MicrogridSpec) -> list[str]:
    """Collect every violation in the spec instead of stopping at the first."""
    problems: list[str] = []
    n = spec.n_dgs
    if n < 1:
        problems.append("microgrid needs at least one generator")
    for i, (dg, load) in enumerate(spec.dgs):
        for name in ("R_t", "L_t", "C_t", "V_r"):
            v = getattr(dg, name)
            if not np.isfinite(v) or v <= 0:
                problems.append(f"dg {i}: {name} must be > 0 (got {v!r})")
        if not np.isfinite(load.I_const):
            problems.append(f"dg {i}: I_const must be finite")
        if not np.isfinite(load.Y_L) or load.Y_L < 0:
            problems.append(f"dg {i}: Y_L must be >= 0 (got {load.Y_L!r})")
        if not np.isfinite(load.P_star) or load.P_star < 0:
            problems.append(f"dg {i}: P_star must be >= 0 (got {load.P_star!r})")
    for l, line in enumerate(spec.lines):
        for name in ("R", "L"):
            v = getattr(line, name)
            if not np.isfinite(v) or v <= 0:
                problems.append(f"line {l}: {name} must be > 0 (got {v!r})")
        if not (0 <= line.from_dg < n) or not (0 <= line.to_dg < n):
            problems.append(f"line {l}: endpoint out of range 0..{n - 1}")
        elif line.from_dg == line.to_dg:
            problems.append(f"line {l}: endpoints must be two distinct generators")
    if not problems and n >= 2 and not _connected(spec):
        problems.append("generator/line graph is not connected")
    return problems


def _connected(spec: MicrogridSpec) -> bool:
    n = spec.n_dgs
    adj: list[set[int]] = [set() for _ in range(n)]
    for line in spec.lines:
        adj[line.from_dg].add(line.to_dg)
        adj[line.to_dg].add(line.from_dg)
    seen = {0}
    stack = [0]
    while stack:
        for j in adj[stack.pop()]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


def validate(spec: MicrogridSpec) -> ValidatedModel:
    """Validate the description and build the incidence matrix.

    Raises the most specific error for the first violation found; use
    validation_errors() to enumerate all of them.
    """
    n = spec.n_dgs
    if n < 1:
        raise ModelError("microgrid needs at least one generator")
    for i, (dg, load) in enumerate(spec.dgs):
        where = f"dg {i}"
        for name in ("R_t", "L_t", "C_t", "V_r"):
            _check_positive(getattr(dg, name), name, where)
        if not np.isfinite(load.I_const):
            raise NonPositiveParameterError("I_const", load.I_const, where)
        if not np.isfinite(load.Y_L) or load.Y_L < 0:
            raise NonPositiveParameterError("Y_L", load.Y_L, where)
        if not np.isfinite(load.P_star) or load.P_star < 0:
            raise NonPositiveParameterError("P_star", load.P_star, where)
    for l, line in enumerate(spec.lines):
        where = f"line {l}"
        _check_positive(line.R, "R", where)
        _check_positive(line.L, "L", where)
        if not (0 <= line.from_dg < n) or not (0 <= line.to_dg < n):
            raise ModelError(f"{where}: endpoint out of range 0..{n - 1}")
        if line.from_dg == line.to_dg:
            raise DuplicateLineEndpointsError(
                f"{where}: endpoints must be two distinct generators"
            )
    if n >= 2 and not _connected(spec):
        raise DisconnectedGraphError("generator/line graph is not connected")
    return ValidatedModel(spec=spec, incidence=incidence_matrix(spec.lines, n))


def incidence_matrix(lines, n_dgs: int) -> np.ndarray:
    """Signed DG-by-line adjacency: +1 where a line leaves a DG, -1 where it enters."""
    B = np.zeros((n_dgs, len(lines)))
    for l, line in enumerate(lines):
        B[line.from_dg, l] = 1.0
        B[line.to_dg, l] = -1.0
    return B


def dg_matrices(dg: DGParams, load: ZipLoad) -> DGStateSpace:
    """Open-loop generator matrices for the state (V, I_t, v).

    The load conductance appears in the voltage row; the constant-power term
    is nonlinear and deliberately not part of the linear model.
    """
    A = np.array(
        [
            [-load.Y_L / dg.C_t, 1.0 / dg.C_t, 0.0],
            [-1.0 / dg.L_t, -dg.R_t / dg.L_t, 0.0],
            [-1.0, 0.0, 0.0],
        ]
    )
    B = np.array([[0.0], [1.0 / dg.L_t], [0.0]])
    H = np.array([[0.0, 0.0, 1.0]])
    d = np.array([load.I_const, 0.0, dg.V_r])
    return DGStateSpace(A=A, B=B, H=H, d=d)


def line_matrices(line: LineParams) -> LineStateSpace:
    """First-order line dynamics; the input gain multiplies the voltage difference."""
    return LineStateSpace(A=-line.R / line.L, B=1.0 / line.L)


def cpl_voltage_floor(dg: DGParams) -> float:
    return CPL_VOLTAGE_FLOOR_FRACTION * dg.V_r


def zip_current(load: ZipLoad, V: float, v_min: float = 0.0, dg: int | None = None) -> float:
    """Load current at PCC voltage V: constant + conductance*V + power/V.

    The power term is skipped when P_star == 0, so V = 0 is then legal.
    """
    current = load.I_const + load.Y_L * V
    if load.P_star > 0.0:
        if V < v_min or V <= 0.0:
            raise CplVoltageError(V, v_min, dg)
        current += load.P_star / V
    return current


def coupling_blocks(model: ValidatedModel) -> CouplingBlocks:
    """Assemble the static DG<->line coupling and the performance selector."""
    n, m = model.n_dgs, model.n_lines
    B = model.incidence
    dg_from_line = np.zeros((3 * n, m))
    line_from_dg = np.zeros((m, 3 * n))
    for i in range(n):
        C_t = model.dg_params(i).C_t
        for l in range(m):
            if B[i, l] != 0.0:
                dg_from_line[3 * i, l] = -B[i, l] / C_t
                line_from_dg[l, 3 * i] = B[i, l] / model.line(l).L
    perf = np.zeros((3 * n, 3 * n))
    for i in range(n):
        perf[3 * i + 2, 3 * i + 2] = 1.0
    return CouplingBlocks(
        dg_from_line=dg_from_line, line_from_dg=line_from_dg, perf_selector=perf
    )
