"""Networked-system view: interconnection blocks, analysis, topology synthesis.

Subsystems come in two classes (generators with 3-dim inputs/outputs, lines
with scalar ones). The static interconnection maps stacked outputs and the
disturbance to stacked inputs and the performance output:

    [u; ubar; z] = M [y; ybar; w]

Analysis scales per-subsystem supply rates by nonnegative multipliers and
checks one semidefinite condition; synthesis turns selected blocks of M into
decision variables through the standard change of variables L = X11_p @ M.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lmi
from .dissipativity import SupplyRate
from .errors import AssumptionViolatedError, SolverError, StructureViolationError
from .model import CouplingBlocks, ValidatedModel

# Lower bound used when searching for strictly positive scaling multipliers.
SCALING_FLOOR = 1e-6


@dataclass(frozen=True)
class InterconnectionM:
    """The nine static blocks of the interconnection matrix."""

    u_from_y: np.ndarray
    u_from_ybar: np.ndarray
    u_from_w: np.ndarray
    ubar_from_y: np.ndarray
    ubar_from_ybar: np.ndarray
    ubar_from_w: np.ndarray
    z_from_y: np.ndarray
    z_from_ybar: np.ndarray
    z_from_w: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.block([
            [self.u_from_y, self.u_from_ybar, self.u_from_w],
            [self.ubar_from_y, self.ubar_from_ybar, self.ubar_from_w],
            [self.z_from_y, self.z_from_ybar, self.z_from_w],
        ])


@dataclass(frozen=True)
class ScalingSet:
    """Strictly positive supply-rate multipliers with the analysis residual.

    residual is the largest eigenvalue of the analysis matrix (which must be
    <= 0 for the network certificate to hold).
    """

    p: np.ndarray
    p_bar: np.ndarray
    residual: float


def check_gain_structure(K: np.ndarray, n_dgs: int) -> None:
    """Distributed-gain blocks may populate only the middle row of each 3x3 block."""
    K = np.asarray(K, dtype=float)
    if K.shape != (3 * n_dgs, 3 * n_dgs):
        raise StructureViolationError(
            f"distributed gain must be {3 * n_dgs}x{3 * n_dgs}, got {K.shape}"
        )
    mask = np.zeros_like(K, dtype=bool)
    for i in range(n_dgs):
        mask[3 * i + 1, :] = True
    if np.any(K[~mask] != 0.0):
        bad = np.argwhere((K != 0.0) & ~mask)[0]
        raise StructureViolationError(
            f"forbidden nonzero at row {bad[0]}, col {bad[1]} of the distributed gain"
        )


def assemble_m(K: np.ndarray, coupling: CouplingBlocks) -> InterconnectionM:
    """Microgrid interconnection: gains + physical coupling + disturbance feedthrough."""
    n3 = coupling.dg_from_line.shape[0]
    m = coupling.dg_from_line.shape[1]
    check_gain_structure(K, n3 // 3)
    return InterconnectionM(
        u_from_y=np.asarray(K, dtype=float),
        u_from_ybar=coupling.dg_from_line,
        u_from_w=np.eye(n3),
        ubar_from_y=coupling.line_from_dg,
        ubar_from_ybar=np.zeros((m, m)),
        ubar_from_w=np.zeros((m, n3)),
        z_from_y=coupling.perf_selector,
        z_from_ybar=np.zeros((n3, m)),
        z_from_w=np.zeros((n3, n3)),
    )


def _class_dims(supplies: list[SupplyRate]) -> tuple[list[int], list[int]]:
    u_dims = [X.input_dim for X in supplies]
    y_dims = [X.output_dim for X in supplies]
    return u_dims, y_dims


def _stack_matrix(M: InterconnectionM) -> np.ndarray:
    """Rows pick (u, y, ubar, ybar, w, z) from (y, ybar, w)."""
    nu_, ny = M.u_from_y.shape
    nub, nyb = M.ubar_from_ybar.shape
    nz, nw = M.z_from_w.shape
    return np.block([
        [M.u_from_y, M.u_from_ybar, M.u_from_w],
        [np.eye(ny), np.zeros((ny, nyb)), np.zeros((ny, nw))],
        [M.ubar_from_y, M.ubar_from_ybar, M.ubar_from_w],
        [np.zeros((nyb, ny)), np.eye(nyb), np.zeros((nyb, nw))],
        [np.zeros((nw, ny)), np.zeros((nw, nyb)), np.eye(nw)],
        [M.z_from_y, M.z_from_ybar, M.z_from_w],
    ])


def _supply_embeddings(
    supplies: list[SupplyRate], u_total: int, y_total: int, u_off0: int, y_off0: int,
    full_dim: int,
) -> list[np.ndarray]:
    """Per-subsystem constant matrices G_i so that the scaled supply block is sum(p_i G_i)."""
    out = []
    u_off, y_off = u_off0, y_off0
    for X in supplies:
        q, r = X.input_dim, X.output_dim
        G = np.zeros((full_dim, full_dim))
        G[u_off:u_off + q, u_off:u_off + q] = X.uu
        G[u_off:u_off + q, y_off:y_off + r] = X.uy
        G[y_off:y_off + r, u_off:u_off + q] = X.yu
        G[y_off:y_off + r, y_off:y_off + r] = X.yy
        out.append(G)
        u_off += q
        y_off += r
    return out


def analysis_terms(
    M: InterconnectionM,
    dg_supplies: list[SupplyRate],
    line_supplies: list[SupplyRate],
    Y: SupplyRate,
):
    """Constant matrices (G_dg list, G_line list, G_net) with the analysis form

    T' (sum p_i Xi + sum pbar_l Xbar_l - Y-block) T = sum p_i G_i + ... + G_net
    """
    T = _stack_matrix(M)
    nu_ = sum(X.input_dim for X in dg_supplies)
    ny = sum(X.output_dim for X in dg_supplies)
    nub = sum(X.input_dim for X in line_supplies)
    nyb = sum(X.output_dim for X in line_supplies)
    nw = Y.input_dim
    nz = Y.output_dim
    full = nu_ + ny + nub + nyb + nw + nz
    if T.shape[0] != full:
        raise ValueError("interconnection and supply dimensions do not conform")

    G_dgs = [T.T @ G @ T for G in _supply_embeddings(dg_supplies, nu_, ny, 0, nu_, full)]
    G_lines = [
        T.T @ G @ T
        for G in _supply_embeddings(line_supplies, nub, nyb, nu_ + ny, nu_ + ny + nub, full)
    ]
    Gy = np.zeros((full, full))
    off_w = nu_ + ny + nub + nyb
    off_z = off_w + nw
    Gy[off_w:off_w + nw, off_w:off_w + nw] = -Y.uu
    Gy[off_w:off_w + nw, off_z:off_z + nz] = -Y.uy
    Gy[off_z:off_z + nz, off_w:off_w + nw] = -Y.yu
    Gy[off_z:off_z + nz, off_z:off_z + nz] = -Y.yy
    G_net = T.T @ Gy @ T
    return G_dgs, G_lines, G_net


def assemble_analysis_matrix(
    M: InterconnectionM,
    dg_supplies: list[SupplyRate],
    line_supplies: list[SupplyRate],
    Y: SupplyRate,
    p: np.ndarray,
    p_bar: np.ndarray,
) -> np.ndarray:
    """Numeric analysis matrix; the certificate requires it negative semidefinite."""
    G_dgs, G_lines, G_net = analysis_terms(M, dg_supplies, line_supplies, Y)
    total = G_net.copy()
    for pi, G in zip(np.asarray(p, dtype=float), G_dgs):
        total += pi * G
    for pl, G in zip(np.asarray(p_bar, dtype=float), G_lines):
        total += pl * G
    return total


def analyze_network(
    M: InterconnectionM,
    dg_supplies: list[SupplyRate],
    line_supplies: list[SupplyRate],
    Y: SupplyRate,
    p: np.ndarray | None = None,
    p_bar: np.ndarray | None = None,
    tol: float = lmi.DEFAULT_TOL_REPORT,
    solver_tol: float | None = None,
) -> ScalingSet | None:
    """Certify the network supply rate from subsystem certificates.

    With multipliers given, evaluates the condition at them; otherwise searches
    for strictly positive multipliers with a feasibility SDP. None means the
    search came back certified infeasible (or the given values fail).
    """
    if p is not None and p_bar is not None:
        mat = assemble_analysis_matrix(M, dg_supplies, line_supplies, Y, p, p_bar)
        residual = float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[-1])
        if residual > tol:
            return None
        return ScalingSet(np.asarray(p, float), np.asarray(p_bar, float), residual)

    G_dgs, G_lines, G_net = analysis_terms(M, dg_supplies, line_supplies, Y)
    full = G_net.shape[0]
    prob = lmi.SDPProblem(name="network-analysis")
    expr = lmi.AffineMat.constant(-G_net)
    for i, G in enumerate(G_dgs):
        prob.add_scalar_var(f"p{i}")
        prob.add_ineq(lmi.LinearExpr(const=-SCALING_FLOOR, scalars={f"p{i}": 1.0}))
        expr = expr + lmi.AffineMat.scalar(f"p{i}", -G)
    for l, G in enumerate(G_lines):
        prob.add_scalar_var(f"pbar{l}")
        prob.add_ineq(lmi.LinearExpr(const=-SCALING_FLOOR, scalars={f"pbar{l}": 1.0}))
        expr = expr + lmi.AffineMat.scalar(f"pbar{l}", -G)
    prob.add_lmi(expr, name="analysis", eps=0.0)
    sol = lmi.solve(prob, solver_tol=solver_tol)
    if sol.status == "infeasible":
        return None
    if not sol.ok:
        raise SolverError("network analysis did not certify either way",
                          status=sol.status, diagnostics=sol.diagnostics)
    p_out = np.array([sol.assignment[f"p{i}"] for i in range(len(G_dgs))])
    pbar_out = np.array([sol.assignment[f"pbar{l}"] for l in range(len(G_lines))])
    mat = assemble_analysis_matrix(M, dg_supplies, line_supplies, Y, p_out, pbar_out)
    residual = float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[-1])
    return ScalingSet(p_out, pbar_out, residual)


def _definite_sign(block: np.ndarray) -> int:
    eigs = np.linalg.eigvalsh(0.5 * (block + block.T))
    if eigs[0] > 0:
        return 1
    if eigs[-1] < 0:
        return -1
    return 0


@dataclass
class SynthesizedTopology:
    M: InterconnectionM
    scaling: ScalingSet
    solution: lmi.SDPSolution


def build_topology_lmi(
    dg_supplies: list[SupplyRate],
    line_supplies: list[SupplyRate],
    Y: SupplyRate,
    fixed: dict,
    var_prefix: str = "",
) -> tuple[lmi.SDPProblem, dict]:
    """Assemble the topology-synthesis LMI with selected blocks as variables.

    fixed maps block names ("u_from_y", ..., "z_from_w") to constant matrices;
    every unlisted block of the first two block-rows becomes an L-variable
    (scaled by the class X11 multipliers), and every unlisted z-row block a
    direct variable. Requires every subsystem X11 positive definite and the
    network yy-block negative definite.
    """
    if _definite_sign(Y.yy) != -1:
        raise AssumptionViolatedError("network supply needs a negative-definite yy block")
    for X in list(dg_supplies) + list(line_supplies):
        sign = _definite_sign(X.uu)
        if sign == 0:
            raise AssumptionViolatedError("subsystem uu supply block must be sign-definite")
        if sign < 0:
            raise AssumptionViolatedError(
                "negative-definite uu supply blocks are outside the synthesized condition"
            )

    nu_ = sum(X.input_dim for X in dg_supplies)
    nub = sum(X.input_dim for X in line_supplies)
    ny, nyb = nu_, nub  # square subsystems: y mirrors u per class
    nw = Y.input_dim
    nz = Y.output_dim

    dg_uu = [X.uu for X in dg_supplies]
    dg_yy = [X.yy for X in dg_supplies]
    # class-level (X11)^-1 X12, independent of the multipliers
    dg_cross = _blkdiag([np.linalg.inv(X.uu) @ X.uy for X in dg_supplies], nu_, ny)
    line_uu = [X.uu for X in line_supplies]
    line_yy = [X.yy for X in line_supplies]
    line_cross = _blkdiag([np.linalg.inv(X.uu) @ X.uy for X in line_supplies], nub, nyb)

    prob = lmi.SDPProblem(name="topology-synthesis")
    pf = var_prefix

    p_names = []
    for i in range(len(dg_supplies)):
        name = prob.add_scalar_var(f"{pf}p{i}")
        prob.add_ineq(lmi.LinearExpr(const=-SCALING_FLOOR, scalars={name: 1.0}))
        p_names.append(name)
    pbar_names = []
    for l in range(len(line_supplies)):
        name = prob.add_scalar_var(f"{pf}pbar{l}")
        prob.add_ineq(lmi.LinearExpr(const=-SCALING_FLOOR, scalars={name: 1.0}))
        pbar_names.append(name)

    def scaled_block11(names, blocks, dims_total):
        """sum_i p_i * embed(X_i.uu) as an affine expression."""
        expr = lmi.AffineMat.zeros(dims_total, dims_total)
        off = 0
        for name, blk in zip(names, blocks):
            q = blk.shape[0]
            big = np.zeros((dims_total, dims_total))
            big[off:off + q, off:off + q] = blk
            expr = expr + lmi.AffineMat.scalar(name, big)
            off += q
        return expr

    Xp11 = scaled_block11(p_names, dg_uu, nu_)
    Xp22 = scaled_block11(p_names, dg_yy, ny)
    Xbarp11 = scaled_block11(pbar_names, line_uu, nub)
    Xbarp22 = scaled_block11(pbar_names, line_yy, nyb)

    # L-variables (or scaled fixed blocks) for the u and ubar rows
    def l_block(row: str, col_dim: int, col_name: str):
        names = p_names if row == "u" else pbar_names
        blocks = dg_uu if row == "u" else line_uu
        row_dim = nu_ if row == "u" else nub
        key = f"{row}_from_{col_name}"
        if key in fixed:
            Mfix = np.asarray(fixed[key], dtype=float)
            expr = lmi.AffineMat.zeros(row_dim, col_dim)
            off = 0
            for name, blk in zip(names, blocks):
                q = blk.shape[0]
                lift = np.zeros((row_dim, q))
                lift[off:off + q, :] = np.eye(q)
                expr = expr + lmi.AffineMat.scalar(name, lift @ blk @ Mfix[off:off + q, :])
                off += q
            return expr, None
        vname = prob.add_matrix_var(f"{pf}L_{key}", row_dim, col_dim)
        return lmi.AffineMat.matvar(vname, np.eye(row_dim), np.eye(col_dim)), vname

    def z_block(col_dim: int, col_name: str):
        key = f"z_from_{col_name}"
        if key in fixed:
            return lmi.AffineMat.constant(np.asarray(fixed[key], dtype=float)), None
        vname = prob.add_matrix_var(f"{pf}M_{key}", nz, col_dim)
        return lmi.AffineMat.matvar(vname, np.eye(nz), np.eye(col_dim)), vname

    L_uy, v_uy = l_block("u", ny, "y")
    L_uyb, v_uyb = l_block("u", nyb, "ybar")
    L_uw, v_uw = l_block("u", nw, "w")
    L_by, v_by = l_block("ubar", ny, "y")
    L_byb, v_byb = l_block("ubar", nyb, "ybar")
    L_bw, v_bw = l_block("ubar", nw, "w")
    M_zy, v_zy = z_block(ny, "y")
    M_zyb, v_zyb = z_block(nyb, "ybar")
    M_zw, v_zw = z_block(nw, "w")

    def left_mul(const: np.ndarray, expr: lmi.AffineMat) -> lmi.AffineMat:
        terms = []
        for t in expr.terms:
            if isinstance(t, lmi.ConstTerm):
                terms.append(lmi.ConstTerm(const @ t.value))
            elif isinstance(t, lmi.ScalarTerm):
                terms.append(lmi.ScalarTerm(t.name, const @ t.coeff))
            else:
                terms.append(lmi.MatTerm(t.name, const @ t.left, t.right, t.transpose))
        return lmi.AffineMat((const.shape[0], expr.shape[1]), terms)

    neg = lambda e: left_mul(-np.eye(e.shape[0]), e)
    tr = lambda e: e.transposed()

    blocks = [
        [Xp11, None, None, L_uy, L_uyb, L_uw],
        [None, Xbarp11, None, L_by, L_byb, L_bw],
        [None, None, lmi.AffineMat.constant(-Y.yy),
         left_mul(-Y.yy, M_zy), left_mul(-Y.yy, M_zyb), left_mul(-Y.yy, M_zw)],
        [None, None, None,
         neg(left_mul(dg_cross.T, L_uy) + tr(left_mul(dg_cross.T, L_uy)) + Xp22),
         neg(left_mul(dg_cross.T, L_uyb) + tr(left_mul(line_cross.T, L_by))),
         neg(left_mul(dg_cross.T, L_uw)) + tr(left_mul(Y.uy, M_zy))],
        [None, None, None, None,
         neg(left_mul(line_cross.T, L_byb) + tr(left_mul(line_cross.T, L_byb)) + Xbarp22),
         neg(left_mul(line_cross.T, L_bw)) + tr(left_mul(Y.uy, M_zyb))],
        [None, None, None, None, None,
         lmi.AffineMat.constant(Y.uu) + left_mul(Y.uy, M_zw) + tr(left_mul(Y.uy, M_zw))],
    ]
    grid = [[b for b in row] for row in blocks]
    expr = lmi.block_lmi(grid)
    prob.add_lmi(expr, name="topology", eps=None)

    meta = {
        "p_names": p_names,
        "pbar_names": pbar_names,
        "vars": {
            "u_from_y": v_uy, "u_from_ybar": v_uyb, "u_from_w": v_uw,
            "ubar_from_y": v_by, "ubar_from_ybar": v_byb, "ubar_from_w": v_bw,
            "z_from_y": v_zy, "z_from_ybar": v_zyb, "z_from_w": v_zw,
        },
        "dims": {"u": nu_, "ubar": nub, "y": ny, "ybar": nyb, "w": nw, "z": nz},
        "dg_uu": dg_uu, "line_uu": line_uu,
    }
    return prob, meta


def _blkdiag(blocks: list[np.ndarray], rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def synthesize_topology(
    dg_supplies: list[SupplyRate],
    line_supplies: list[SupplyRate],
    Y: SupplyRate,
    fixed: dict,
    cost: dict | None = None,
    solver_tol: float | None = None,
) -> SynthesizedTopology | None:
    """Solve the generic topology-synthesis LMI and recover the interconnection.

    cost may provide {"entries": [(block_key, i, j)], "weights": [...]} for an
    L1 push toward sparsity on synthesized L-blocks. None means certified
    infeasible.
    """
    prob, meta = build_topology_lmi(dg_supplies, line_supplies, Y, fixed)
    if cost:
        entries = [(meta["vars"][key], i, j) for key, i, j in cost["entries"]]
        prob.add_l1_epigraph(entries, cost["weights"])
    sol = lmi.solve(prob, solver_tol=solver_tol)
    if sol.status == "infeasible":
        return None
    if not sol.ok:
        raise SolverError("topology synthesis did not certify either way",
                          status=sol.status, diagnostics=sol.diagnostics)

    p = np.array([sol.assignment[n] for n in meta["p_names"]])
    pbar = np.array([sol.assignment[n] for n in meta["pbar_names"]])
    xp11 = _blkdiag([pi * b for pi, b in zip(p, meta["dg_uu"])],
                    meta["dims"]["u"], meta["dims"]["u"])
    xbarp11 = _blkdiag([pl * b for pl, b in zip(pbar, meta["line_uu"])],
                       meta["dims"]["ubar"], meta["dims"]["ubar"])

    def recover(row: str, key: str, scale: np.ndarray):
        vname = meta["vars"][key]
        if vname is None:
            return np.asarray(fixed[key], dtype=float)
        L = np.atleast_2d(sol.assignment[vname])
        return np.linalg.solve(scale, L)

    M = InterconnectionM(
        u_from_y=recover("u", "u_from_y", xp11),
        u_from_ybar=recover("u", "u_from_ybar", xp11),
        u_from_w=recover("u", "u_from_w", xp11),
        ubar_from_y=recover("ubar", "ubar_from_y", xbarp11),
        ubar_from_ybar=recover("ubar", "ubar_from_ybar", xbarp11),
        ubar_from_w=recover("ubar", "ubar_from_w", xbarp11),
        z_from_y=(np.asarray(fixed["z_from_y"], float) if meta["vars"]["z_from_y"] is None
                  else np.atleast_2d(sol.assignment[meta["vars"]["z_from_y"]])),
        z_from_ybar=(np.asarray(fixed["z_from_ybar"], float)
                     if meta["vars"]["z_from_ybar"] is None
                     else np.atleast_2d(sol.assignment[meta["vars"]["z_from_ybar"]])),
        z_from_w=(np.asarray(fixed["z_from_w"], float) if meta["vars"]["z_from_w"] is None
                  else np.atleast_2d(sol.assignment[meta["vars"]["z_from_w"]])),
    )
    mat = assemble_analysis_matrix(M, dg_supplies, line_supplies, Y, p, pbar)
    residual = float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[-1])
    return SynthesizedTopology(M=M, scaling=ScalingSet(p, pbar, residual), solution=sol)
