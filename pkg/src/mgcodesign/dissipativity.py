"""Quadratic supply rates, dissipativity verification, and local synthesis.

The supply rate pairs an input/output deviation with the block matrix
[[uu, uy], [yu, yy]]; verification asks for a storage matrix making the
standard LTI dissipation inequality hold, and synthesis designs a state
feedback so the closed loop satisfies it from its residual input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lmi
from .errors import (
    NonPositiveGammaError,
    OutputPenaltyNotNegativeError,
    SolverError,
    SupplyRateError,
)


@dataclass(frozen=True)
class SupplyRate:
    """Quadratic supply-rate coefficient blocks on (input, output) deviations."""

    uu: np.ndarray
    uy: np.ndarray
    yu: np.ndarray
    yy: np.ndarray
    kind: str = "custom"
    params: tuple = ()

    def __post_init__(self):
        if not np.allclose(self.yu, self.uy.T):
            raise SupplyRateError("supply rate must be symmetric (yu == uy.T)")

    @property
    def input_dim(self) -> int:
        return self.uu.shape[0]

    @property
    def output_dim(self) -> int:
        return self.yy.shape[0]

    def full(self) -> np.ndarray:
        return np.block([[self.uu, self.uy], [self.yu, self.yy]])


def passive(dim: int = 1) -> SupplyRate:
    half = 0.5 * np.eye(dim)
    zero = np.zeros((dim, dim))
    return SupplyRate(zero, half, half, zero, kind="passive", params=())


def ifofp(nu: float, rho: float, dim: int = 1) -> SupplyRate:
    """Input-feedforward output-feedback passivity indices (nu, rho)."""
    eye = np.eye(dim)
    return SupplyRate(-nu * eye, 0.5 * eye, 0.5 * eye, -rho * eye,
                      kind="ifofp", params=(float(nu), float(rho)))


def l2gain(gamma: float, dim: int = 1) -> SupplyRate:
    if gamma <= 0:
        raise NonPositiveGammaError(f"gamma must be > 0, got {gamma}")
    eye = np.eye(dim)
    zero = np.zeros((dim, dim))
    return SupplyRate(gamma**2 * eye, zero, zero, -eye,
                      kind="l2gain", params=(float(gamma),))


def make_supply_rate(kind: str, dim: int = 1, **params) -> SupplyRate:
    """Factory over the three standard kinds: passive, ifofp(nu, rho), l2gain(gamma)."""
    kind = kind.lower()
    if kind == "passive":
        return passive(dim)
    if kind == "ifofp":
        return ifofp(params["nu"], params["rho"], dim)
    if kind == "l2gain":
        return l2gain(params["gamma"], dim)
    raise SupplyRateError(f"unknown supply-rate kind {kind!r}")


@dataclass(frozen=True)
class EIDCertificate:
    """Storage matrix + the smallest eigenvalue of the dissipation LMI at it."""

    P: np.ndarray
    residual: float


@dataclass(frozen=True)
class LocalSynthResult:
    """Storage matrix, raw gain, and the realized feedback L = K @ inv(P)."""

    P: np.ndarray
    K: np.ndarray
    L: np.ndarray
    residual: float


def dissipation_matrix(A, B, C, D, X: SupplyRate, P) -> np.ndarray:
    """Numeric dissipation-LMI matrix at a given storage matrix (oracle path)."""
    A, B, C, D, P = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, C, D, P))
    PA = P @ A
    top_left = -(PA + PA.T) + C.T @ X.yy @ C
    top_right = -P @ B + C.T @ X.yu + C.T @ X.yy @ D
    bottom = X.uu + X.uy @ D + (X.uy @ D).T + D.T @ X.yy @ D
    return np.block([[top_left, top_right], [top_right.T, bottom]])


def _dims(A, B, C, D, X: SupplyRate):
    A, B, C, D = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, C, D))
    n = A.shape[0]
    q = B.shape[1]
    m = C.shape[0]
    if A.shape != (n, n) or B.shape != (n, q) or C.shape != (m, n) or D.shape != (m, q):
        raise ValueError("inconsistent state-space dimensions")
    if X.input_dim != q or X.output_dim != m:
        raise ValueError("supply-rate dimensions do not match the system")
    return A, B, C, D


def check_xeid(
    A, B, C, D, X: SupplyRate,
    solver_tol: float | None = None,
) -> EIDCertificate | None:
    """Feasibility of the dissipation LMI; None means certified infeasible.

    Ambiguous solver outcomes raise SolverError rather than masquerading as
    infeasibility.
    """
    A, B, C, D = _dims(A, B, C, D, X)
    n = A.shape[0]
    scale = 1.0 + max(np.abs(A).max(), np.abs(B).max(), np.abs(C).max(),
                      np.abs(D).max() if D.size else 0.0)
    prob = lmi.SDPProblem(name="xeid-check")
    prob.add_matrix_var("P", n, n, symmetric=True)
    prob.add_lmi(lmi.AffineMat.matvar("P", np.eye(n), np.eye(n)),
                 name="P_pd", eps=1e-8 * scale)

    main = lmi.block_lmi([
        [
            lmi.AffineMat.matvar("P", -np.eye(n), A)
            + lmi.AffineMat.matvar("P", -A.T, np.eye(n))
            + lmi.AffineMat.constant(C.T @ X.yy @ C),
            lmi.AffineMat.matvar("P", -np.eye(n), B)
            + lmi.AffineMat.constant(C.T @ X.yu + C.T @ X.yy @ D),
        ],
        [None, lmi.AffineMat.constant(X.uu + X.uy @ D + (X.uy @ D).T + D.T @ X.yy @ D)],
    ])
    # analysis certifies the closed cone; only P itself is interiorized
    prob.add_lmi(main, name="dissipation", eps=0.0)

    sol = lmi.solve(prob, solver_tol=solver_tol)
    if sol.status == "infeasible":
        return None
    if not sol.ok:
        raise SolverError("dissipativity check did not certify either way",
                          status=sol.status, diagnostics=sol.diagnostics)
    P = sol.assignment["P"]
    return EIDCertificate(P=P, residual=sol.residuals["dissipation"])


def synth_local_xeid(
    A, B, X: SupplyRate,
    solver_tol: float | None = None,
    extra_margin: float | None = None,
) -> LocalSynthResult | None:
    """Design L so that dx/dt = (A + B L) x + eta satisfies the supply rate from eta to x.

    Requires the output-output supply block to be negative definite. Returns
    None on certified infeasibility.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n = A.shape[0]
    m = B.shape[1]
    if X.input_dim != n or X.output_dim != n:
        raise ValueError("supply rate must be sized to the state dimension")
    yy_max = float(np.linalg.eigvalsh(0.5 * (X.yy + X.yy.T))[-1])
    if yy_max >= 0:
        raise OutputPenaltyNotNegativeError(
            "local synthesis needs a negative-definite output supply block"
        )
    eye = np.eye(n)
    neg_yy_inv = -np.linalg.inv(X.yy)

    prob = lmi.SDPProblem(name="xeid-synth")
    prob.add_matrix_var("P", n, n, symmetric=True)
    prob.add_matrix_var("K", m, n)
    scale = 1.0 + max(np.abs(A).max(), np.abs(B).max())
    prob.add_lmi(lmi.AffineMat.matvar("P", eye, eye), name="P_pd", eps=1e-8 * scale)

    main = lmi.block_lmi([
        [
            lmi.AffineMat.constant(neg_yy_inv),
            lmi.AffineMat.matvar("P", eye, eye),
            lmi.AffineMat.zeros(n, n),
        ],
        [
            None,
            lmi.AffineMat.matvar("P", -A, eye)
            + lmi.AffineMat.matvar("P", -eye, A.T, transpose=True)
            + lmi.AffineMat.matvar("K", -B, eye)
            + lmi.AffineMat.matvar("K", -eye, B.T, transpose=True),
            lmi.AffineMat.constant(-eye) + lmi.AffineMat.matvar("P", eye, X.yu),
        ],
        [None, None, lmi.AffineMat.constant(X.uu)],
    ])
    prob.add_lmi(main, name="synthesis", eps=extra_margin)

    sol = lmi.solve(prob, solver_tol=solver_tol)
    if sol.status == "infeasible":
        return None
    if not sol.ok:
        raise SolverError("local synthesis did not certify either way",
                          status=sol.status, diagnostics=sol.diagnostics)
    P = sol.assignment["P"]
    K = np.atleast_2d(sol.assignment["K"])
    L = np.linalg.solve(P.T, K.T).T
    return LocalSynthResult(P=P, K=K, L=L, residual=sol.residuals["synthesis"])
