from __future__ import annotations

import logging

import numpy as np
import pytest
from scipy.integrate import quad

from alzsim.errors import DomainError, HypothesisError
from alzsim.kernels import (
    ExampleJumpKernel,
    GKernel,
    JumpSpec,
    KernelChoice,
    ModelParams,
    SKernel,
    TableKernel,
    eval_F,
    eval_G,
    eval_P,
    eval_S,
    production,
    velocity,
    velocity_field,
)
from alzsim.measure import ParticleMeasure

DEFAULT = KernelChoice(GKernel("paper-default", 1.0), SKernel("paper-default", 1.0, 0.15))
ZERO = KernelChoice(GKernel("zero"), SKernel("zero"))
identity = lambda y: np.asarray(y, dtype=float)  # noqa: E731


def params(**kw) -> ModelParams:
    base = dict(n_species=3, eps=0.1, d=[1, 0.5], sigma=[1, 1], gamma=[1, 1], a_coag=np.ones((3, 3)))
    base.update(kw)
    return ModelParams(**base)


class TestG:
    def test_examples(self):
        assert eval_G(DEFAULT, None, 0.2, 0.5) == pytest.approx(0.3)
        assert eval_G(DEFAULT, None, 0.5, 0.2) == 0.0
        assert np.all(eval_G(DEFAULT, None, 1.0, np.linspace(0, 1, 11)) == 0.0)

    def test_domain(self):
        with pytest.raises(DomainError):
            eval_G(DEFAULT, None, -0.1, 0.5)

    def test_sampled_monotonicity(self, rng):
        a = rng.uniform(0, 0.999, 100)
        b = rng.uniform(0, 1, 100)
        h = 1e-6
        slope = (eval_G(DEFAULT, None, a + h, b) - eval_G(DEFAULT, None, a, b)) / h
        assert np.all(slope >= -1.0 - 1e-6) and np.all(slope <= 1e-6)

    def test_table_kernel_matches_default(self, tmp_path):
        grid = np.linspace(0, 1, 11)
        path = tmp_path / "g.csv"
        rows = ["a,b,value"] + [f"{a},{b},{max(b - a, 0.0)}" for a in grid for b in grid]
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        table = TableKernel.from_csv(path)
        G = GKernel("custom-table", tables=(table,), table_paths=(str(path),))
        assert G(0.2, 0.5) == pytest.approx(0.3)
        KernelChoice(G, SKernel("zero")).validate(3)

    def test_increasing_table_rejected(self, tmp_path):
        grid = np.linspace(0, 1, 5)
        path = tmp_path / "bad.csv"
        rows = ["a,b,value"] + [f"{a},{b},{a * (1 - a) + 0.0 * b}" for a in grid for b in grid]
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        G = GKernel("custom-table", tables=(TableKernel.from_csv(path),))
        with pytest.raises(HypothesisError):
            KernelChoice(G, SKernel("zero")).validate(3)


class TestS:
    def test_threshold(self):
        kern = KernelChoice(GKernel("zero"), SKernel("paper-default", 1.0, 0.375))
        assert eval_S(kern, None, 0.0, [0.125, 0.125]) == 0.0  # 0.125 + 2 * 0.125 = U_bar

    def test_direct_value(self):
        kern = KernelChoice(GKernel("zero"), SKernel("paper-default", 1.0, 0.15))
        assert eval_S(kern, None, 0.0, [[1.15]]) == pytest.approx(1.0)

    def test_vanishes_at_one(self, rng):
        u = rng.uniform(0, 3, size=(2, 20))
        assert np.all(eval_S(DEFAULT, None, np.ones(20), u) == 0.0)

    def test_even_in_u(self):
        assert eval_S(DEFAULT, None, 0.3, [[-0.4], [0.2]]) == eval_S(DEFAULT, None, 0.3, [[0.4], [0.2]])

    def test_sampled_monotonicity(self, rng):
        u = rng.uniform(0, 2, size=(2, 100))
        a = rng.uniform(0, 0.999, 100)
        slope = (eval_S(DEFAULT, None, a + 1e-6, u) - eval_S(DEFAULT, None, a, u)) / 1e-6
        assert np.all(slope <= 1e-6)


class TestP:
    def test_examples(self):
        jump = JumpSpec()
        assert eval_P(jump, 0.0, 0.0, 0.25) == 2.0
        assert eval_P(jump, 0.0, 0.5, 0.4) == 0.0
        assert np.all(eval_P(jump, 0.0, 1.0, np.linspace(0, 1, 11)) == 0.0)

    def test_normalisation_by_quadrature(self):
        # independent oracle: adaptive quadrature of the density with the break points given
        P = ExampleJumpKernel()
        val, _ = quad(lambda a: float(P.density(0.0, 0.3, a)), 0.0, 1.0, points=[0.3, 0.65], epsabs=1e-12)
        assert val == pytest.approx(1.0, abs=1e-6)

    def test_normalisation_by_midpoint_rule(self):
        P = ExampleJumpKernel()
        a = (np.arange(10_000) + 0.5) / 10_000
        assert P.density(0.0, 0.3, a).mean() == pytest.approx(1.0, abs=1e-3)

    def test_antiderivative_and_mixture(self, rng):
        P = ExampleJumpKernel()
        b = np.sort(rng.uniform(0, 0.99, 6))[None, :]
        w = rng.uniform(0.1, 1, 6)[None, :]
        a = np.linspace(0, 1, 41)[None, :]
        direct = (w[..., None] * P.antiderivative(0.0, b[..., None], a[:, None, :])).sum(axis=1)
        assert np.allclose(P.mixture_cumulative(0.0, b, w, a), direct, atol=1e-14)

    def test_clamped_rows_bounded(self):
        P = ExampleJumpKernel(1e-3)
        b = np.linspace(P.b_max, 1.0, 50)
        assert np.all(P.density(0.0, b, np.clip(b + 1e-5, 0, 1)) <= 2.0 / 1e-3)
        assert P.row_mass(0.0, 1.0) == 0.0

    def test_expectation(self):
        P = ExampleJumpKernel()
        b = np.array([0.0, 0.3])
        assert np.allclose(P.expectation(0.0, b, np.ones_like), 1.0)
        assert np.allclose(P.expectation(0.0, b, lambda a: a), (b + (1 + b) / 2) / 2)

    def test_lipschitz_is_recorded(self):
        L = JumpSpec().P_lipschitz
        assert np.isfinite(L) and L > 0.0

    def test_validate_passes_and_eta_checks(self):
        JumpSpec(chi_boxes=((0.4, 0.6, 0.0, 1.0),)).validate()
        with pytest.raises(HypothesisError):
            JumpSpec(eta_times=(0.0,), eta_values=(-1.0,))
        with pytest.raises(HypothesisError):
            JumpSpec(chi_boxes=((0.6, 0.4, 0.0, 1.0),))

    def test_eta_chi(self):
        spec = JumpSpec(eta_times=(0.0, 0.5), eta_values=(1.0, 2.0), chi_boxes=((0.4, 0.6, 0.0, 1.0),))
        x = np.array([0.0, 0.5, 1.0])
        assert spec.eta_chi(x, 0.2).tolist() == [0.0, 1.0, 0.0]
        assert spec.eta_chi(x, 0.7).tolist() == [0.0, 2.0, 0.0]
        assert spec.eta_chi(x, 1.5).tolist() == [0.0, 0.0, 0.0]


class TestF:
    def test_examples(self):
        p = params(mu0=0.1, c_f=1.0)
        assert eval_F(p, ParticleMeasure.dirac(0.0), identity) == pytest.approx(0.1)
        assert eval_F(p, ParticleMeasure.dirac(1.0), lambda y: np.where(y == 1.0, 1.0, 0.5 * y)) == 0.0
        half = ParticleMeasure.from_atoms([0.0, 1.0], [0.5, 0.5])
        assert eval_F(p, half, identity) == pytest.approx(0.05)

    def test_bounds(self, rng):
        p = params()
        for _ in range(20):
            pos = rng.uniform(0, 1, 7)
            w = rng.uniform(0, 1, 7)
            mu = ParticleMeasure.from_atoms(pos, w / w.sum())
            val = eval_F(p, mu, identity)
            assert 0.0 <= val <= p.c_f * (p.mu0 + 1.0)

    def test_batched_production(self):
        p = params()
        pos = np.array([[0.0, 1.0], [0.5, 0.5]])
        w = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert production(p, pos, w) == pytest.approx([0.05, 0.3])


class TestVelocity:
    def test_zero_kernels(self):
        g = ParticleMeasure.dirac(0.7)
        assert np.all(velocity(ZERO, None, np.linspace(0, 1, 5), 0.0, g, identity, [[0.3], [0.3]]) == 0.0)

    def test_vanishes_at_one(self, rng):
        for _ in range(10):
            mu = ParticleMeasure.from_atoms(rng.uniform(0, 1, 4), np.full(4, 0.25))
            assert velocity(DEFAULT, None, 1.0, 0.0, mu, identity, rng.uniform(0, 1, (2, 1))) == 0.0

    def test_peer_example(self):
        kern = KernelChoice(GKernel("paper-default", 1.0), SKernel("zero"))
        assert velocity(kern, None, 0.0, 0.0, ParticleMeasure.dirac(1.0), identity, [[0.0], [0.0]]) == 1.0

    def test_nonnegative_nonincreasing(self, rng):
        mu = ParticleMeasure.from_atoms(rng.uniform(0, 1, 6), np.full(6, 1 / 6))
        a = np.linspace(0, 1, 201)
        v = velocity(DEFAULT, None, a, 0.0, mu, identity, [[0.2], [0.1]])
        assert np.all(v >= 0.0)
        assert np.all(np.diff(v) <= 1e-14)

    def test_batched_field_matches_pointwise(self, rng):
        pos = np.sort(rng.uniform(0, 1, (3, 9)), axis=1)
        w = rng.uniform(0.1, 1, (3, 9))
        w /= w.sum(axis=1, keepdims=True)
        u = rng.uniform(0, 0.3, (2, 3))
        q = np.sort(rng.uniform(0, 1, (3, 15)), axis=1)
        v, dv = velocity_field(DEFAULT, q, pos, w, u, with_derivative=True)
        for k in range(3):
            mu = ParticleMeasure.from_atoms(pos[k], w[k])
            ref = velocity(DEFAULT, None, q[k], 0.0, mu, identity, u[:, k:k + 1])
            assert np.allclose(v[k], ref, atol=1e-14)
            h = 1e-7
            fd = (velocity(DEFAULT, None, np.minimum(q[k] + h, 1), 0.0, mu, identity, u[:, k:k + 1]) - ref) / h
            away = np.min(np.abs(q[k][:, None] - pos[k][None, :]), axis=1) > 1e-5
            assert np.allclose(dv[k][away], fd[away], atol=1e-5)


class TestParams:
    def test_zero_clearance_rejected(self):
        with pytest.raises(HypothesisError, match="are positive constants") as exc:
            params(sigma=[0.0, 1.0]).validate()
        assert "sigma[1]" in str(exc.value) and exc.value.hypothesis == "H1"

    def test_zero_clearance_allowed_when_degenerate(self):
        params(sigma=[0.0, 1.0]).validate(allow_degenerate_rates=True)

    def test_coagulation_index_reported(self):
        a = np.ones((3, 3))
        a[0, 1] = a[1, 0] = 0.0
        with pytest.raises(HypothesisError, match=r"a_coag\[1,2\]"):
            params(a_coag=a).validate()

    def test_eps_always_strict(self):
        with pytest.raises(HypothesisError):
            params(eps=0.0).validate(allow_degenerate_rates=True)

    def test_symmetrised_with_warning(self, caplog):
        a = np.ones((3, 3))
        a[0, 1] = 3.0
        with caplog.at_level(logging.WARNING):
            p = params(a_coag=a)
        assert p.a_coag[0, 1] == p.a_coag[1, 0] == 2.0
        assert "not symmetric" in caplog.text

    def test_dict_round_trip(self):
        p = params()
        q = ModelParams.from_dict(p.to_dict())
        assert q.to_dict() == p.to_dict()

    def test_kernel_choice_validates(self):
        DEFAULT.validate(3)
        ZERO.validate(3)
        KernelChoice(GKernel("zero"), SKernel("affine-test", c=1.0)).validate(3)
