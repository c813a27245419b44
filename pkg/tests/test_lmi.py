import numpy as np
import pytest

from mgcodesign import lmi
from mgcodesign.errors import UnknownEntryError


def scalar_mat(name):
    return lmi.AffineMat.matvar(name, np.eye(1), np.eye(1))


class TestSolve:
    def test_scalar_feasibility(self):
        prob = lmi.SDPProblem()
        prob.add_matrix_var("P", 1, 1, symmetric=True)
        prob.add_lmi(scalar_mat("P"), name="P_pos", eps=1e-8)
        prob.add_lmi(lmi.AffineMat.matvar("P", 2 * np.eye(1), np.eye(1)),
                     name="twice", eps=1e-8)
        sol = lmi.solve(prob)
        assert sol.status == "feasible"
        assert sol.assignment["P"][0, 0] >= 0.5e-8

    def test_minimize_linear(self):
        prob = lmi.SDPProblem()
        prob.add_scalar_var("x")
        prob.add_ineq(lmi.LinearExpr(const=-3.0, scalars={"x": 1.0}))
        prob.add_objective({"x": 1.0})
        sol = lmi.solve(prob)
        assert sol.status == "optimal"
        np.testing.assert_allclose(sol.assignment["x"], 3.0, atol=1e-7)

    def test_certified_infeasible(self):
        prob = lmi.SDPProblem()
        prob.add_matrix_var("P", 1, 1, symmetric=True)
        prob.add_lmi(scalar_mat("P"), name="P_pos", eps=1e-6)
        prob.add_lmi(lmi.AffineMat.matvar("P", -np.eye(1), np.eye(1)),
                     name="neg", eps=0.0)
        sol = lmi.solve(prob)
        assert sol.status == "infeasible"


class TestEpigraph:
    def test_single_entry(self):
        prob = lmi.SDPProblem()
        prob.add_matrix_var("Q", 1, 1)
        prob.add_eq(lmi.LinearExpr(const=-2.5, entries={("Q", 0, 0): 1.0}))
        prob.add_l1_epigraph([("Q", 0, 0)], [1.0])
        sol = lmi.solve(prob)
        assert sol.status == "optimal"
        np.testing.assert_allclose(sol.objective, 2.5, atol=1e-7)

    def test_negative_entry_abs(self):
        prob = lmi.SDPProblem()
        prob.add_matrix_var("Q", 1, 1)
        prob.add_eq(lmi.LinearExpr(const=1.75, entries={("Q", 0, 0): 1.0}))
        slacks = prob.add_l1_epigraph([("Q", 0, 0)], [1.0])
        sol = lmi.solve(prob)
        # epigraph exactness: slack equals |entry| at the optimum
        np.testing.assert_allclose(sol.assignment[slacks[0]], 1.75, atol=1e-7)

    def test_zero_weight_slack_still_valid(self):
        prob = lmi.SDPProblem()
        prob.add_matrix_var("Q", 1, 1)
        prob.add_eq(lmi.LinearExpr(const=-1.0, entries={("Q", 0, 0): 1.0}))
        slacks = prob.add_l1_epigraph([("Q", 0, 0)], [0.0])
        prob.add_objective({slacks[0]: 0.0})
        prob.add_scalar_var("x")
        prob.add_ineq(lmi.LinearExpr(const=0.0, scalars={"x": 1.0}))
        prob.add_objective({"x": 1.0})
        sol = lmi.solve(prob)
        assert sol.ok
        assert sol.assignment[slacks[0]] >= 1.0 - 1e-7

    def test_weights_accumulate(self):
        prob = lmi.SDPProblem()
        prob.add_matrix_var("Q", 1, 2)
        prob.add_eq(lmi.LinearExpr(const=-1.0, entries={("Q", 0, 0): 1.0}))
        prob.add_eq(lmi.LinearExpr(const=-1.0, entries={("Q", 0, 1): 1.0}))
        prob.add_l1_epigraph([("Q", 0, 0), ("Q", 0, 1)], [1.0, 2.0])
        sol = lmi.solve(prob)
        np.testing.assert_allclose(sol.objective, 3.0, atol=1e-6)

    def test_unknown_entry(self):
        prob = lmi.SDPProblem()
        prob.add_matrix_var("Q", 1, 1)
        with pytest.raises(UnknownEntryError):
            prob.add_l1_epigraph([("Q", 2, 0)], [1.0])
        with pytest.raises(UnknownEntryError):
            prob.add_l1_epigraph([("R", 0, 0)], [1.0])


class TestResidualCheck:
    def eq3_problem(self):
        # dissipation matrix for (A,B,C,D)=(-1,1,1,0), passive supply
        prob = lmi.SDPProblem()
        prob.add_matrix_var("P", 1, 1, symmetric=True)
        expr = lmi.block_lmi([
            [lmi.AffineMat.matvar("P", 2 * np.eye(1), np.eye(1)),
             lmi.AffineMat.matvar("P", -np.eye(1), np.eye(1))
             + lmi.AffineMat.constant(0.5 * np.eye(1))],
            [None, lmi.AffineMat.constant(np.zeros((1, 1)))],
        ])
        prob.add_lmi(expr, name="eq3", eps=0.0)
        return prob

    def test_known_assignment(self):
        prob = self.eq3_problem()
        res = lmi.residual_check(prob, {"P": np.array([[0.5]])})
        np.testing.assert_allclose(res["eq3"], 0.0, atol=1e-12)

    def test_perturbed_assignment(self):
        prob = self.eq3_problem()
        res = lmi.residual_check(prob, {"P": np.array([[0.4]])})
        assert res["eq3"] < 0.0

    def test_empty_problem(self):
        prob = lmi.SDPProblem()
        assert lmi.residual_check(prob, {}) == {}

    def test_solutions_pass_residual_check(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            n = 3
            A = rng.normal(size=(n, n))
            A = A @ A.T + n * np.eye(n)  # PD target
            prob = lmi.SDPProblem()
            prob.add_matrix_var("P", n, n, symmetric=True)
            # find P with A - P >= 0 and P >= I
            prob.add_lmi(
                lmi.AffineMat.constant(A) + lmi.AffineMat.matvar("P", -np.eye(n), np.eye(n)),
                name="upper", eps=0.0,
            )
            prob.add_lmi(
                lmi.AffineMat.matvar("P", np.eye(n), np.eye(n))
                + lmi.AffineMat.constant(-np.eye(n)),
                name="lower", eps=0.0,
            )
            sol = lmi.solve(prob)
            assert sol.ok
            assert sol.worst_residual >= -1e-6


class TestZeroEntries:
    def test_exact_zeros(self):
        prob = lmi.SDPProblem()
        prob.add_matrix_var("Q", 2, 2)
        prob.fix_entry_zero("Q", 0, 1)
        prob.add_eq(lmi.LinearExpr(const=-1.0, entries={("Q", 0, 0): 1.0}))
        sol = lmi.solve(prob)
        assert sol.assignment["Q"][0, 1] == 0.0


class TestBlockAssembly:
    def test_transpose_mirroring(self):
        expr = lmi.block_lmi([
            [np.eye(2), np.array([[1.0], [2.0]])],
            [None, np.array([[5.0]])],
        ])
        M = expr.evaluate({})
        np.testing.assert_allclose(M, [[1, 0, 1], [0, 1, 2], [1, 2, 5]])

    def test_matrix_var_embedding(self):
        expr = lmi.block_lmi([
            [lmi.AffineMat.matvar("P", np.eye(2), np.eye(2)), None],
            [None, np.array([[1.0]])],
        ])
        P = np.array([[2.0, 1.0], [1.0, 3.0]])
        M = expr.evaluate({"P": P})
        np.testing.assert_allclose(M[:2, :2], P)
        np.testing.assert_allclose(M[2, 2], 1.0)
        assert M[0, 2] == M[2, 0] == 0.0

    def test_lower_triangle_rejected(self):
        with pytest.raises(ValueError):
            lmi.block_lmi([[np.eye(1), None], [np.eye(1), np.eye(1)]])


class TestJsonRoundTrip:
    def test_round_trip_same_solution(self, tmp_path):
        prob = lmi.SDPProblem(name="rt")
        prob.add_matrix_var("P", 2, 2, symmetric=True)
        prob.add_scalar_var("t")
        prob.add_lmi(
            lmi.AffineMat.matvar("P", np.eye(2), np.eye(2))
            + lmi.AffineMat.constant(-np.eye(2)),
            name="floor", eps=0.0,
        )
        prob.add_lmi(
            lmi.AffineMat.scalar("t", np.eye(2))
            + lmi.AffineMat.matvar("P", -np.eye(2), np.eye(2)),
            name="bound", eps=0.0,
        )
        prob.add_objective({"t": 1.0})
        path = tmp_path / "prob.json"
        lmi.dump_problem_json(prob, str(path))
        loaded = lmi.load_problem_json(str(path))
        s1, s2 = lmi.solve(prob), lmi.solve(loaded)
        assert s1.status == s2.status == "optimal"
        np.testing.assert_allclose(s1.objective, s2.objective, atol=1e-9)
        np.testing.assert_allclose(s1.assignment["P"], s2.assignment["P"], atol=1e-9)
