import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgcodesign import model
from mgcodesign.errors import (
    CplVoltageError,
    DisconnectedGraphError,
    DuplicateLineEndpointsError,
    NonPositiveParameterError,
)

DG = model.DGParams(R_t=0.2, L_t=1.8e-3, C_t=2.2e-3, V_r=48.0)
LOAD = model.ZipLoad(I_const=2.0, Y_L=0.5, P_star=0.0)


def two_dg_spec():
    return model.MicrogridSpec(
        dgs=((DG, LOAD), (DG, LOAD)),
        lines=(model.LineParams(R=0.05, L=2.1e-6, from_dg=0, to_dg=1),),
    )


class TestValidate:
    def test_two_dg_one_line(self):
        m = model.validate(two_dg_spec())
        np.testing.assert_array_equal(m.incidence, [[1.0], [-1.0]])

    def test_self_loop_rejected(self):
        spec = model.MicrogridSpec(
            dgs=((DG, LOAD), (DG, LOAD)),
            lines=(model.LineParams(R=0.05, L=2.1e-6, from_dg=1, to_dg=1),),
        )
        with pytest.raises(DuplicateLineEndpointsError):
            model.validate(spec)

    def test_three_dg_chain(self):
        spec = model.MicrogridSpec(
            dgs=((DG, LOAD),) * 3,
            lines=(
                model.LineParams(R=0.05, L=2.1e-6, from_dg=0, to_dg=1),
                model.LineParams(R=0.05, L=2.1e-6, from_dg=1, to_dg=2),
            ),
        )
        m = model.validate(spec)
        np.testing.assert_array_equal(
            m.incidence, [[1.0, 0.0], [-1.0, 1.0], [0.0, -1.0]]
        )

    def test_nonpositive_parameter(self):
        bad = model.DGParams(R_t=0.2, L_t=1.8e-3, C_t=-2.2e-3, V_r=48.0)
        with pytest.raises(NonPositiveParameterError) as exc:
            model.validate(model.MicrogridSpec(dgs=((bad, LOAD),)))
        assert exc.value.field == "C_t"

    def test_disconnected(self):
        spec = model.MicrogridSpec(dgs=((DG, LOAD), (DG, LOAD)))
        with pytest.raises(DisconnectedGraphError):
            model.validate(spec)

    def test_validation_errors_collects_all(self):
        bad = model.DGParams(R_t=-1.0, L_t=1.8e-3, C_t=-2.2e-3, V_r=48.0)
        problems = model.validation_errors(model.MicrogridSpec(dgs=((bad, LOAD),)))
        assert len(problems) == 2


class TestIncidence:
    def test_single_line(self):
        B = model.incidence_matrix(
            [model.LineParams(R=1.0, L=1.0, from_dg=0, to_dg=1)], 2
        )
        np.testing.assert_array_equal(B, [[1.0], [-1.0]])

    def test_no_lines(self):
        B = model.incidence_matrix([], 1)
        assert B.shape == (1, 0)

    def test_ring_column_sums(self):
        lines = [
            model.LineParams(R=1.0, L=1.0, from_dg=0, to_dg=1),
            model.LineParams(R=1.0, L=1.0, from_dg=1, to_dg=2),
            model.LineParams(R=1.0, L=1.0, from_dg=2, to_dg=0),
        ]
        B = model.incidence_matrix(lines, 3)
        np.testing.assert_array_equal(B.sum(axis=0), np.zeros(3))
        for col in B.T:
            assert sorted(col) == [-1.0, 0.0, 1.0]


@st.composite
def chain_specs(draw):
    n = draw(st.integers(min_value=1, max_value=6))
    dgs = []
    for _ in range(n):
        dgs.append(
            (
                model.DGParams(
                    R_t=draw(st.floats(0.05, 1.0)),
                    L_t=draw(st.floats(1e-4, 1e-2)),
                    C_t=draw(st.floats(1e-4, 1e-2)),
                    V_r=draw(st.floats(12.0, 400.0)),
                ),
                model.ZipLoad(Y_L=draw(st.floats(0.0, 2.0))),
            )
        )
    lines = tuple(
        model.LineParams(
            R=draw(st.floats(0.01, 0.5)), L=draw(st.floats(1e-6, 1e-4)),
            from_dg=i, to_dg=i + 1,
        )
        for i in range(n - 1)
    )
    return model.MicrogridSpec(dgs=tuple(dgs), lines=lines)


@settings(max_examples=40, deadline=None)
@given(chain_specs())
def test_incidence_structure_property(spec):
    m = model.validate(spec)
    B = m.incidence
    assert np.all(np.abs(B) <= 1.0)
    if B.size:
        np.testing.assert_array_equal(B.sum(axis=0), np.zeros(B.shape[1]))
        assert np.all(np.count_nonzero(B, axis=0) == 2)


class TestDGMatrices:
    def test_reference_values(self):
        ss = model.dg_matrices(DG, LOAD)
        expected_A = np.array(
            [
                [-0.5 / 2.2e-3, 1 / 2.2e-3, 0.0],
                [-1 / 1.8e-3, -0.2 / 1.8e-3, 0.0],
                [-1.0, 0.0, 0.0],
            ]
        )
        np.testing.assert_allclose(ss.A, expected_A, rtol=1e-12)
        np.testing.assert_allclose(ss.A[0, 0], -227.2727, rtol=1e-4)
        np.testing.assert_allclose(ss.A[0, 1], 454.5455, rtol=1e-4)
        np.testing.assert_allclose(ss.A[1, 0], -555.5556, rtol=1e-4)
        np.testing.assert_allclose(ss.A[1, 1], -111.1111, rtol=1e-4)
        np.testing.assert_allclose(ss.B, [[0.0], [555.5556], [0.0]], rtol=1e-4)
        np.testing.assert_array_equal(ss.H, [[0.0, 0.0, 1.0]])

    def test_zero_conductance(self):
        ss = model.dg_matrices(DG, model.ZipLoad())
        assert ss.A[0, 0] == 0.0
        np.testing.assert_allclose(
            ss.A[1:], model.dg_matrices(DG, LOAD).A[1:], rtol=1e-15
        )

    def test_doubling_capacitance_halves_voltage_row(self):
        base = model.dg_matrices(DG, LOAD)
        doubled = model.dg_matrices(
            model.DGParams(DG.R_t, DG.L_t, 2 * DG.C_t, DG.V_r), LOAD
        )
        np.testing.assert_allclose(doubled.A[0], base.A[0] / 2, rtol=1e-15)
        np.testing.assert_allclose(doubled.A[1:], base.A[1:], rtol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(
        st.floats(0.01, 10.0), st.floats(1e-5, 1e-1),
        st.floats(1e-5, 1e-1), st.floats(0.0, 10.0),
    )
    def test_closed_forms(self, R_t, L_t, C_t, Y_L):
        dg = model.DGParams(R_t=R_t, L_t=L_t, C_t=C_t, V_r=48.0)
        ss = model.dg_matrices(dg, model.ZipLoad(Y_L=Y_L))
        assert ss.A[0, 0] == -Y_L / C_t
        assert ss.A[0, 1] == 1.0 / C_t
        assert ss.A[1, 0] == -1.0 / L_t
        assert ss.A[1, 1] == -R_t / L_t
        assert ss.B[1, 0] == 1.0 / L_t


class TestLineMatrices:
    def test_reference(self):
        ls = model.line_matrices(model.LineParams(R=0.05, L=2.1e-6, from_dg=0, to_dg=1))
        np.testing.assert_allclose(ls.A, -23809.5238, rtol=1e-6)
        assert ls.A < 0

    def test_unit_ratio(self):
        ls = model.line_matrices(model.LineParams(R=3.3, L=3.3, from_dg=0, to_dg=1))
        assert ls.A == -1.0

    def test_halving_inductance(self):
        a1 = model.line_matrices(model.LineParams(R=0.1, L=2e-6, from_dg=0, to_dg=1)).A
        a2 = model.line_matrices(model.LineParams(R=0.1, L=1e-6, from_dg=0, to_dg=1)).A
        np.testing.assert_allclose(a2, 2 * a1, rtol=1e-15)


class TestZipCurrent:
    def test_reference(self):
        load = model.ZipLoad(I_const=2.0, Y_L=0.5, P_star=100.0)
        np.testing.assert_allclose(
            model.zip_current(load, 48.0), 2.0 + 24.0 + 100.0 / 48.0, rtol=1e-15
        )

    def test_zero_load(self):
        assert model.zip_current(model.ZipLoad(), 37.0) == 0.0

    def test_pure_impedance(self):
        assert model.zip_current(model.ZipLoad(Y_L=1.0), 5.0) == 5.0

    def test_cpl_floor(self):
        load = model.ZipLoad(P_star=10.0)
        with pytest.raises(CplVoltageError):
            model.zip_current(load, 0.01, v_min=0.048)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-5, 5), st.floats(0, 5), st.floats(-100, 100), st.floats(-100, 100))
    def test_linearity_without_cpl(self, i_const, y, v1, v2):
        load = model.ZipLoad(I_const=i_const, Y_L=y, P_star=0.0)
        z = lambda v: model.zip_current(load, v)
        np.testing.assert_allclose(z(v1) + z(v2) - z(0.0), z(v1 + v2), atol=1e-9)


class TestCouplingBlocks:
    def test_reference_values(self):
        m = model.validate(two_dg_spec())
        cb = model.coupling_blocks(m)
        np.testing.assert_allclose(cb.dg_from_line[0, 0], -454.5455, rtol=1e-4)
        np.testing.assert_allclose(cb.dg_from_line[3, 0], 454.5455, rtol=1e-4)
        assert np.all(cb.dg_from_line[[1, 2, 4, 5], 0] == 0.0)
        np.testing.assert_allclose(cb.line_from_dg[0, 0], 476190.476, rtol=1e-6)
        np.testing.assert_allclose(cb.line_from_dg[0, 3], -476190.476, rtol=1e-6)
        assert np.all(cb.line_from_dg[0, [1, 2, 4, 5]] == 0.0)

    def test_perf_selector(self):
        m = model.validate(two_dg_spec())
        cb = model.coupling_blocks(m)
        expected = np.zeros((6, 6))
        expected[2, 2] = expected[5, 5] = 1.0
        np.testing.assert_array_equal(cb.perf_selector, expected)

    def test_isolated_dg_zero_row(self):
        spec = model.MicrogridSpec(dgs=((DG, LOAD),))
        m = model.validate(spec)
        cb = model.coupling_blocks(m)
        assert cb.dg_from_line.shape == (3, 0)

    @settings(max_examples=30, deadline=None)
    @given(chain_specs())
    def test_coupling_antisymmetry(self, spec):
        m = model.validate(spec)
        cb = model.coupling_blocks(m)
        for l in range(m.n_lines):
            line = m.line(l)
            i, j = line.from_dg, line.to_dg
            ci = cb.dg_from_line[3 * i:3 * i + 3, l] * m.dg_params(i).C_t
            cj = cb.dg_from_line[3 * j:3 * j + 3, l] * m.dg_params(j).C_t
            np.testing.assert_allclose(ci, -cj, atol=1e-12)
