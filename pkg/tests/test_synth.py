import numpy as np
import pytest

from conftest import ZT_DEFAULT
from spectral_sls.model import Locality, SynthesisConfig
from spectral_sls.simulate import Simulator, predicted_errors, rollout
from spectral_sls.slp import EmptyActuatorSetWarning, assemble, cost_of
from spectral_sls.synth import (
    BankMismatchError,
    SynthesisError,
    bank_digest,
    load_bank,
    realize_controller,
    save_bank,
    superpose,
    synthesize_bank,
    synthesize_one,
)

TWO_POINTS = [(-0.26, 0.56), (0.9, -0.4)]


@pytest.fixture(scope="module")
def pair_bank(model, cfg):
    return synthesize_bank(model, cfg, TWO_POINTS)


@pytest.fixture(scope="module")
def sim(model):
    return Simulator(model, 40, horizon=6)


class TestSynthesizeOne:
    def test_residual_and_shapes(self, response):
        assert response.residual <= 1e-8
        assert response.T == 5 and response.u_gains.shape == (5, 16)

    def test_nearest_actuator_dominates_first_step(self, response, model):
        nearest = int(np.argmin(np.hypot(*(model.actuators - ZT_DEFAULT).T)))
        g = np.abs(response.u_gains)
        lead = g[0, nearest]
        others = np.delete(g.ravel(), nearest)
        assert lead > others.max()

    def test_all_actuators_masked(self, model):
        cfg = SynthesisConfig(locality=Locality(2, 0.1))
        with pytest.warns(EmptyActuatorSetWarning):
            resp = synthesize_one(model, cfg, (0.0, 0.0))
            prob = assemble(model, cfg, (0.0, 0.0))
        witness = prob.uncontrolled_witness()
        alpha, _ = prob.unpack(witness)
        assert not np.any(resp.u_gains)
        for a, b in zip(resp.alpha, alpha):
            assert np.max(np.abs(a.coeffs - b.coeffs)) <= 1e-10
        expected = sum(float(np.sum(a.coeffs ** 2)) for a in alpha)
        assert resp.objective == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("zt", [(-1.9, 1.9), (0.0, 0.0), (1.2, -0.3), (0.7, 1.7)])
    def test_objective_below_uncontrolled(self, small_model, small_cfg, zt):
        resp = synthesize_one(small_model, small_cfg, zt)
        prob = assemble(small_model, small_cfg, zt)
        assert resp.objective <= cost_of(prob, prob.uncontrolled_witness())

    def test_masked_gains_exactly_zero(self, model):
        cfg = SynthesisConfig(locality=Locality(1, 2.0))
        resp = synthesize_one(model, cfg, ZT_DEFAULT)
        masked = [l for l in range(16) if l not in resp.active]
        assert masked and np.all(resp.u_gains[:, masked] == 0.0)

    def test_cost_scaling_invariance(self, small_model, small_cfg):
        base = synthesize_one(small_model, small_cfg, (0.3, 0.2))
        scaled_cfg = SynthesisConfig(k=4, Q=7.5, R=7.5, domain=small_cfg.domain)
        scaled = synthesize_one(small_model, scaled_cfg, (0.3, 0.2))
        assert np.max(np.abs(base.u_gains - scaled.u_gains)) <= 1e-9
        for a, b in zip(base.alpha, scaled.alpha):
            assert np.max(np.abs(a.coeffs - b.coeffs)) <= 1e-9

    def test_zero_input_weight(self, small_model, small_cfg):
        cfg = SynthesisConfig(k=4, R=0.0, domain=small_cfg.domain)
        resp = synthesize_one(small_model, cfg, (0.3, 0.2))
        assert resp.residual <= 1e-8
        weighted = synthesize_one(small_model, small_cfg, (0.3, 0.2))
        assert resp.objective < weighted.objective

    def test_deterministic(self, small_model, small_cfg):
        a = synthesize_one(small_model, small_cfg, (0.3, 0.2))
        b = synthesize_one(small_model, small_cfg, (0.3, 0.2))
        assert a.same_as(b)


class TestBank:
    def test_single_disturbance(self, small_model, small_cfg):
        bank = synthesize_bank(small_model, small_cfg, [(0.1, 0.1)])
        assert len(bank) == 1
        assert bank["d00"].same_as(synthesize_one(small_model, small_cfg, (0.1, 0.1)))

    def test_duplicates(self, small_model, small_cfg):
        bank = synthesize_bank(small_model, small_cfg, [(0.1, 0.1), (0.1, 0.1)])
        assert bank["d00"].same_as(bank["d01"])

    def test_worker_count_does_not_matter(self, small_model, small_cfg):
        pts = [(-1.0, 0.5), (0.2, 0.2), (1.5, -1.5)]
        one = synthesize_bank(small_model, small_cfg, pts)
        cfg2 = SynthesisConfig(k=4, domain=small_cfg.domain, jobs=2)
        two = synthesize_bank(small_model, cfg2, pts)
        assert one.same_as(two)

    def test_failures_are_aggregated(self, small_model, small_cfg):
        with pytest.raises(SynthesisError) as exc:
            synthesize_bank(small_model, small_cfg, [(0.0, 0.0), (3.0, 0.0), (0.0, -5.0)])
        assert set(exc.value.failures) == {"d01", "d02"}

    def test_empty_list(self, small_model, small_cfg):
        with pytest.raises(ValueError):
            synthesize_bank(small_model, small_cfg, [])

    def test_save_load_round_trip(self, tmp_path, small_model, small_cfg):
        bank = synthesize_bank(small_model, small_cfg, [(0.1, 0.1), (-0.5, 1.0)])
        save_bank(bank, tmp_path / "b1")
        back = load_bank(tmp_path / "b1", small_model, small_cfg)
        assert back.same_as(bank)
        save_bank(back, tmp_path / "b2")
        assert bank_digest(tmp_path / "b1") == bank_digest(tmp_path / "b2")

    def test_load_missing(self, tmp_path, small_model, small_cfg):
        with pytest.raises(FileNotFoundError):
            load_bank(tmp_path, small_model, small_cfg)


class TestSuperpose:
    def test_identity(self, pair_bank):
        alpha, gains = superpose(pair_bank, [1.0, 0.0])
        r = pair_bank["d00"]
        np.testing.assert_array_equal(gains, r.u_gains)
        assert all(a == b for a, b in zip(alpha, r.alpha))

    def test_zero_weights(self, pair_bank):
        alpha, gains = superpose(pair_bank, [0.0, 0.0])
        assert not np.any(gains)
        assert not any(np.any(a.coeffs) for a in alpha)

    def test_bad_weights(self, pair_bank):
        with pytest.raises(ValueError):
            superpose(pair_bank, [1.0])
        with pytest.raises(ValueError):
            superpose(pair_bank, [1.0, np.nan])

    def test_simulated_linearity(self, pair_bank, sim):
        w = [0.7, -1.3]
        _, gains = superpose(pair_bank, w)
        together = rollout(sim, 5, gains, disturbances={0: [(z, wi) for z, wi in zip(TWO_POINTS, w)]})
        parts = [rollout(sim, 5, wi * pair_bank[k].u_gains, disturbances={0: [(z, wi)]})
                 for k, z, wi in zip(pair_bank.ids, TWO_POINTS, w)]
        for t in range(6):
            summed = parts[0].states[t] + parts[1].states[t]
            assert np.max(np.abs(together.states[t] - summed)) <= 1e-9


class TestRealization:
    def test_no_disturbance_no_input(self, pair_bank, sim):
        traj = rollout(sim, 5, policy=realize_controller(pair_bank))
        assert not np.any(traj.inputs)

    def test_single_impulse_reproduces_gains(self, pair_bank, sim):
        ctl = realize_controller(pair_bank)
        traj = rollout(sim, 5, policy=ctl, disturbances={0: [(TWO_POINTS[1], 1.0)]})
        np.testing.assert_array_equal(traj.inputs, pair_bank["d01"].u_gains)

    def test_time_shifted_superposition(self, pair_bank, sim):
        ctl = realize_controller(pair_bank)
        dist = {0: [(TWO_POINTS[0], 2.0)], 1: [(TWO_POINTS[1], -0.5)]}
        traj = rollout(sim, 6, policy=ctl, disturbances=dist)
        expected = np.zeros((6, 16))
        expected[:5] += 2.0 * pair_bank["d00"].u_gains
        expected[1:] += -0.5 * pair_bank["d01"].u_gains
        assert np.max(np.abs(traj.inputs - expected)) <= 1e-12

    def test_time_shift_of_states(self, pair_bank, sim):
        early = rollout(sim, 5, policy=realize_controller(pair_bank),
                        disturbances={0: [(TWO_POINTS[0], 1.0)]})
        late = rollout(sim, 6, policy=realize_controller(pair_bank),
                       disturbances={1: [(TWO_POINTS[0], 1.0)]})
        np.testing.assert_array_equal(late.inputs[1:], early.inputs)
        for t in range(6):
            assert np.max(np.abs(late.states[t + 1] - early.states[t])) <= 1e-12

    def test_unknown_location(self, pair_bank, sim):
        with pytest.raises(BankMismatchError):
            rollout(sim, 3, policy=realize_controller(pair_bank),
                    disturbances={0: [((0.0, 0.0), 1.0)]})

    def test_distributed_disturbance(self, pair_bank, sim):
        with pytest.raises(BankMismatchError):
            rollout(sim, 3, policy=realize_controller(pair_bank),
                    initial=lambda z1, z2: np.exp(-z1 ** 2 - z2 ** 2))

    def test_closed_loop_matches_prediction(self, model, cfg, response):
        bank = synthesize_bank(model, cfg, [ZT_DEFAULT])
        sim80 = Simulator(model, 80, horizon=5)
        traj = rollout(sim80, 5, policy=realize_controller(bank),
                       disturbances={0: [(ZT_DEFAULT, 1.0)]})
        errs = predicted_errors(traj, response.alpha, model)
        assert np.all(errs <= 0.01)

    def test_reset(self, pair_bank, sim):
        ctl = realize_controller(pair_bank)
        a = rollout(sim, 3, policy=ctl, disturbances={0: [(TWO_POINTS[0], 1.0)]})
        ctl.reset()
        b = rollout(sim, 3, policy=ctl, disturbances={0: [(TWO_POINTS[0], 1.0)]})
        np.testing.assert_array_equal(a.inputs, b.inputs)
