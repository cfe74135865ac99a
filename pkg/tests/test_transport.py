from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from alzsim.coupling import coupled_march
from alzsim.errors import DegenerateFieldError, StepSizeError
from alzsim.kernels import JumpSpec
from alzsim.measure import ParticleMeasure, pair
from alzsim.transport import (
    CharacteristicField,
    GState,
    LabelLayout,
    advance_characteristics,
    advance_weights,
    check_field,
    heun_field,
    jump_gain,
    jump_gain_rates,
    reconstruct_f,
    slopes,
    support_check,
    support_margin,
    weak_residual,
    write_snapshot_csv,
)

from .conftest import small_config

SEEDED_JUMP = JumpSpec(chi_boxes=((0.0, 1.0, 0.0, 10.0),), eta_values=(1.0,))


@pytest.fixture(scope="module")
def affine_run():
    cfg = small_config("affine-test")
    return cfg, coupled_march(cfg.data, 1.0, 1e-3, stride=1)


def _ode_oracle(c: float, y0: float, t: float) -> float:
    sol = solve_ivp(lambda _, a: c * (1.0 - a), (0.0, t), [y0], rtol=1e-12, atol=1e-14, method="DOP853")
    return float(sol.y[0, -1])


class TestLayout:
    def test_cells_and_points(self):
        lay = LabelLayout.build(5, [0.0, 0.3])
        assert lay.n_seeds == 6
        assert lay.n_labels == 5 + 2
        assert np.all(np.diff(lay.labels) >= 0.0)
        i = lay.point_index(0.3)
        assert not lay.is_cell[i] and lay.left[i] == lay.right[i]
        assert lay.uniform_weights().sum() == pytest.approx(1.0)

    def test_weights_from_measure(self):
        lay = LabelLayout.build(11, [0.0])
        mu = ParticleMeasure.dirac(0.0)
        w = lay.weights_from_measure(mu)
        assert w[lay.point_index(0.0)] == 1.0 and w.sum() == 1.0
        assert lay.measure(w).equals(mu)


class TestCharacteristics:
    def test_zero_field_is_static(self):
        lay = LabelLayout.build(11)
        field = CharacteristicField.identity(lay.seeds, 3)
        zero = lambda q: (np.zeros_like(q), np.zeros_like(q))  # noqa: E731
        A, log_dA, clamped = heun_field(field.A, field.log_dA, zero, zero, 0.1)
        assert np.array_equal(A, field.A) and clamped == 0
        assert np.all(log_dA == 0.0)

    def test_affine_closed_form(self, affine_run):
        cfg, tr = affine_run
        exact = 1.0 - np.exp(-1.0)
        assert _ode_oracle(1.0, 0.0, 1.0) == pytest.approx(exact, abs=1e-10)
        assert exact == pytest.approx(0.6321206, abs=1e-7)
        assert np.all(np.abs(tr.A[-1, :, 0] - exact) <= 1e-6)

    def test_affine_interior_seeds(self, affine_run):
        cfg, tr = affine_run
        seeds = cfg.data.layout.seeds
        for j in (10, 100, 150):
            assert tr.A[-1, 0, j] == pytest.approx(_ode_oracle(1.0, seeds[j], 1.0), abs=1e-6)

    def test_monotone_and_pinned_every_step(self, affine_run):
        _, tr = affine_run
        assert np.all(tr.A[:, :, -1] == 1.0)
        assert np.all(np.diff(tr.A, axis=2) > 0.0)
        assert np.all(np.diff(tr.A, axis=0) >= 0.0)

    def test_slopes(self, affine_run):
        cfg, tr = affine_run
        field = CharacteristicField(cfg.data.layout.seeds, tr.A[-1], 1.0, tr.log_dA[-1])
        s = slopes(field)
        assert np.all(s > 0.0)
        assert np.allclose(s, np.exp(-1.0), atol=1e-4)
        assert np.exp(-1.0) == pytest.approx(0.3678794, abs=1e-7)
        # exponential formula accumulated along each trajectory
        assert np.allclose(field.exp_slopes(), s, atol=1e-4)

    def test_identity_slopes(self):
        lay = LabelLayout.build(21)
        assert np.allclose(slopes(CharacteristicField.identity(lay.seeds, 2)), 1.0)

    def test_slopes_reject_flat_field(self):
        lay = LabelLayout.build(5)
        A = np.array([[0.0, 0.5, 0.5, 0.5, 1.0]])
        with pytest.raises(DegenerateFieldError):
            slopes(CharacteristicField(lay.seeds, A))

    def test_overshooting_step_rejected(self):
        lay = LabelLayout.build(11)
        steep = lambda q: (3.0 * (1.0 - q), -3.0 * np.ones_like(q))  # noqa: E731
        with pytest.raises(StepSizeError):
            heun_field(np.tile(lay.seeds, (1, 1)), None, steep, steep, 1.0)

    def test_check_field(self):
        with pytest.raises(DegenerateFieldError):
            check_field(np.array([[0.0, 0.6, 0.9]]))
        with pytest.raises(DegenerateFieldError):
            check_field(np.array([[0.0, 0.6, 0.5, 1.0]]))
        with pytest.raises(DegenerateFieldError):
            check_field(np.array([[0.2, 0.6, 1.0]]), np.array([[0.3, 0.6, 1.0]]))

    def test_paper_default_moves_forward(self, seeded_small):
        data = seeded_small.data
        st = data.initial_state()
        new, clamped = advance_characteristics(st.field, data.kernels, data.layout, st.g.weights,
                                               st.u[:-1], 1e-2)
        assert clamped == 0
        check_field(new.A, st.field.A)


class TestJumpGain:
    def test_eta_zero(self):
        lay = LabelLayout.build(21, [0.0])
        w = lay.weights_from_measure(ParticleMeasure.dirac(0.0))[None, :]
        A = np.tile(lay.seeds, (1, 1))
        assert np.all(jump_gain_rates(lay, A, w, JumpSpec(), 0.0, np.array([0.5])) == 0.0)

    def test_outside_boxes(self):
        lay = LabelLayout.build(21, [0.0])
        w = lay.weights_from_measure(ParticleMeasure.dirac(0.0))[None, :]
        A = np.tile(lay.seeds, (1, 1))
        spec = JumpSpec(eta_values=(1.0,), chi_boxes=((0.4, 0.6, 0.0, 1.0),))
        assert np.all(jump_gain_rates(lay, A, w, spec, 0.0, np.array([0.9])) == 0.0)

    def test_dirac_source_spreads_uniformly(self):
        lay = LabelLayout.build(200, [0.0])
        w = lay.weights_from_measure(ParticleMeasure.dirac(0.0))[None, :]
        A = np.tile(lay.seeds, (1, 1))
        rates = jump_gain_rates(lay, A, w, SEEDED_JUMP, 0.0, np.array([0.5]))[0]
        assert np.all(rates >= 0.0)
        assert rates.sum() == pytest.approx(1.0, abs=1e-3)
        assert np.all(rates[~lay.is_cell] == 0.0)
        # density 2 on [0, 1/2]: rate = 2 * cell width there
        inside = lay.is_cell & (lay.labels < 0.5 - 1e-9)
        assert np.allclose(rates[inside], 2.0 * lay.widths[inside], atol=1e-12)
        assert np.all(rates[lay.is_cell & (lay.labels > 0.5)] == 0.0)

    def test_total_gain_equals_row_mass(self, rng):
        lay = LabelLayout.build(51, [0.0, 0.37])
        w = rng.uniform(0, 1, (2, lay.n_labels))
        w /= w.sum(axis=1, keepdims=True)
        A = np.tile(lay.seeds, (2, 1)) ** np.array([[1.0], [0.7]])
        gain = jump_gain(lay, A, w, SEEDED_JUMP, 0.0)
        row = SEEDED_JUMP.kernel.row_mass(0.0, lay.positions(A))
        assert np.allclose(gain.sum(axis=1), (w * row).sum(axis=1), atol=1e-13)


class TestWeights:
    def test_no_jump_leaves_g(self):
        lay = LabelLayout.build(21, [0.0])
        w = lay.weights_from_measure(ParticleMeasure.dirac(0.0))[None, :]
        A = np.tile(lay.seeds, (1, 1))
        g, drift = advance_weights(lay, GState(w, np.zeros(1)), A, A, np.zeros(1), np.zeros(1), JumpSpec(), 0.0, 0.1)
        assert np.array_equal(g.weights, w) and drift == 0.0

    def test_one_step_from_dirac(self):
        dt = 1e-3
        lay = LabelLayout.build(201, [0.0])
        w = lay.weights_from_measure(ParticleMeasure.dirac(0.0))[None, :]
        A = np.tile(lay.seeds, (1, 1))
        one = np.ones(1)
        g, drift = advance_weights(lay, GState(w, np.zeros(1)), A, A, one, one, SEEDED_JUMP, 0.0, dt)
        i0 = lay.point_index(0.0)
        assert g.weights[0, i0] == pytest.approx(np.exp(-dt), abs=dt**2)
        low = lay.is_cell & (lay.labels < 0.5)
        assert g.weights[0, low].sum() == pytest.approx(1.0 - np.exp(-dt), abs=dt**2)
        assert g.weights[0, lay.is_cell & (lay.labels > 0.5)].sum() <= dt**2
        assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert drift <= 10 * dt**2
        assert g.E[0] == pytest.approx(dt)
        assert np.all(g.weights >= 0.0)

    def test_drift_second_order(self):
        lay = LabelLayout.build(101, [0.0])
        w = lay.weights_from_measure(ParticleMeasure.dirac(0.0))[None, :]
        A = np.tile(lay.seeds, (1, 1))
        one = np.ones(1)
        drifts = [advance_weights(lay, GState(w, np.zeros(1)), A, A, one, one, SEEDED_JUMP, 0.0, dt)[1]
                  for dt in (0.04, 0.02, 0.01)]
        ratios = np.array(drifts[:-1]) / np.array(drifts[1:])
        assert np.all(ratios > 3.5)


class TestReconstruction:
    def test_identity_field(self, rng):
        lay = LabelLayout.build(11, [0.0])
        w = rng.uniform(0, 1, lay.n_labels)
        w /= w.sum()
        assert reconstruct_f(lay, w, lay.seeds).equals(lay.measure(w))

    def test_dirac(self):
        lay = LabelLayout.build(11, [0.0])
        w = lay.weights_from_measure(ParticleMeasure.dirac(0.0))
        A = 1.0 - (1.0 - lay.seeds) * 0.6
        f = reconstruct_f(lay, w, A)
        assert f.positions.tolist() == [pytest.approx(0.4)] and f.weights.tolist() == [1.0]

    def test_moments_two_ways(self, rng):
        lay = LabelLayout.build(31, [0.0, 0.5])
        w = rng.uniform(0, 1, lay.n_labels)
        w /= w.sum()
        A = lay.seeds**0.6
        f = reconstruct_f(lay, w, A)
        direct = float(np.dot(w, lay.positions(A)))
        assert pair(f, lambda a: a) == pytest.approx(direct, abs=1e-12)

    def test_support(self, rng):
        lay = LabelLayout.build(11, [0.0])
        w = lay.uniform_weights()
        ok, margin = support_check(reconstruct_f(lay, w, lay.seeds), 0.0)
        assert ok and margin >= 0.0
        bad = ParticleMeasure.from_atoms([0.1, 0.5], [0.5, 0.5])
        ok, margin = support_check(bad, 0.2)
        assert not ok and margin == pytest.approx(-0.1)
        assert support_margin(lay, w[None, :], lay.seeds[None, :]) >= 0.0


class TestWeakResidual:
    def test_mass_identity(self, seeded_small):
        data = seeded_small.data
        tr = coupled_march(data, 0.2, 0.01)
        res = weak_residual(data.layout, data.kernels, data.jump, tr.times, tr.A, tr.g, tr.u, data.x,
                            lambda a, t: np.ones_like(a), lambda a, t: np.zeros_like(a),
                            lambda a, t: np.zeros_like(a))
        assert np.max(np.abs(res)) <= 1e-12

    def test_static_measure(self):
        cfg = small_config("decoupled")
        data = cfg.data
        tr = coupled_march(data, 0.2, 0.01)
        res = weak_residual(data.layout, data.kernels, data.jump, tr.times, tr.A, tr.g, tr.u, data.x,
                            lambda a, t: a, lambda a, t: np.zeros_like(a), lambda a, t: np.ones_like(a))
        assert np.all(res == 0.0)


def test_snapshot_csv(tmp_path):
    lay = LabelLayout.build(5, [0.0])
    A = np.tile(lay.seeds, (2, 1))
    w = np.tile(lay.uniform_weights(), (2, 1))
    path = tmp_path / "snap.csv"
    write_snapshot_csv(path, lay, A, w, 0.5)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("t,node,label")
    assert len(lines) == 1 + 2 * lay.n_labels
