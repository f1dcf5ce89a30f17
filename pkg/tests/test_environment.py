"""
Tests for the engine environment, discounted averages and schedule replay
"""

import numpy as np
import pytest

from analysis.thermo import period_balance
from engine.environment import (
    OBS_DIM,
    TRAJECTORY_COLUMNS,
    Action,
    ActionOutOfBoundsError,
    DiscountDomainError,
    EnvironmentNotResetError,
    QuantumHeatEngineEnv,
    ScheduleController,
    as_action,
    discount_to_rate,
    discounted_average,
    future_discounted_average,
    rate_to_discount,
    run_schedule,
    scale_to_unit,
    unit_to_scale,
)
from engine.qdyn import EngineSpec, ProcessKind
from engine.schedule import ScheduleError, constant_schedule


SPEC = EngineSpec()


@pytest.fixture
def env():
    environment = QuantumHeatEngineEnv()
    environment.reset(seed=0)
    return environment


def constant_engine_schedule():
    """Hot, Work, Cold at u = 1.5: an engine with efficiency 0.6 at its periodic state"""
    return constant_schedule(
        "constant-1.5",
        [(ProcessKind.HOT, 1.5, 1), (ProcessKind.WORK, 1.5, 1), (ProcessKind.COLD, 1.5, 1)],
    )


class TestScaling:
    """Test the u <-> [-1, 1] maps"""

    def test_bounds_map_to_unit_interval(self):
        """u_min and u_max map to -1 and 1"""
        assert scale_to_unit(0.3, SPEC) == pytest.approx(-1.0)
        assert scale_to_unit(1.5, SPEC) == pytest.approx(1.0)
        assert scale_to_unit(0.9, SPEC) == pytest.approx(0.0)

    def test_inverse(self):
        """unit_to_scale inverts scale_to_unit, also on arrays"""
        u = np.array([0.3, 0.45, 1.0, 1.5])
        np.testing.assert_allclose(unit_to_scale(scale_to_unit(u, SPEC), SPEC), u, atol=1e-15)


class TestActions:
    """Test action coercion"""

    def test_gymnasium_sample_layout(self):
        """(index, [u]) pairs become actions"""
        action = as_action((2, np.array([1.1])), SPEC)
        assert action == Action(d=ProcessKind.WORK, u=1.1)

    def test_out_of_bounds_u(self):
        """u beyond u_max is rejected"""
        with pytest.raises(ActionOutOfBoundsError):
            as_action(Action(d=ProcessKind.HOT, u=1.6), SPEC)

    def test_unknown_process_index(self):
        """Process indices stop at 2"""
        with pytest.raises(ActionOutOfBoundsError):
            as_action((3, 1.0), SPEC)

    def test_uninterpretable_action(self):
        """Scalars are not actions"""
        with pytest.raises(ActionOutOfBoundsError):
            as_action(1.0, SPEC)


class TestReset:
    """Test QuantumHeatEngineEnv.reset"""

    def test_initial_observation(self, env):
        """Gibbs populations, no coherences, u_prev = 1 and a cleared one-hot"""
        obs, info = env.reset()
        assert obs.shape == (OBS_DIM,)
        np.testing.assert_allclose(obs[:3], [0.952071, 0.047401, 0.000527], atol=1e-6)
        assert np.all(obs[3:9] == 0.0)
        assert obs[9] == pytest.approx(scale_to_unit(1.0, SPEC))
        assert np.all(obs[10:] == 0.0)
        assert info == {}

    def test_reset_is_deterministic(self, env):
        """Two resets give identical observations"""
        first, _ = env.reset()
        env.step(Action(d=ProcessKind.WORK, u=1.0))
        second, _ = env.reset()
        assert np.array_equal(first, second)
        assert env.steps_taken == 0

    def test_step_before_reset(self):
        """Stepping a fresh environment is an error"""
        with pytest.raises(EnvironmentNotResetError):
            QuantumHeatEngineEnv().step(Action(d=ProcessKind.HOT, u=1.0))

    def test_spaces(self, env):
        """Tuple action space and 13-dimensional observations"""
        assert env.action_space[0].n == 3
        assert env.observation_space.shape == (OBS_DIM,)


class TestStep:
    """Test QuantumHeatEngineEnv.step"""

    def test_work_reward_is_zero(self, env):
        """Work strokes never pay reward"""
        _, reward, terminated, truncated, info = env.step(Action(d=ProcessKind.WORK, u=1.2))
        assert reward == 0.0
        assert not terminated and not truncated
        assert info["work_out"] == pytest.approx(-info["delta_E"])
        assert info["heat_into_system_h"] == 0.0
        assert info["heat_into_system_c"] == 0.0

    def test_cold_stroke_heats_from_gibbs_state(self, env):
        """At u = 0.3 the cold bath is hotter than the beta = 3 state, so energy flows in"""
        obs, reward, _, _, info = env.step(Action(d=ProcessKind.COLD, u=0.3))
        assert reward > 0.0
        assert reward == pytest.approx(info["delta_E"] / SPEC.dt)
        assert info["heat_into_system_c"] == pytest.approx(info["delta_E"])
        assert obs[10 + ProcessKind.COLD.action_index] == 1.0
        assert obs[9] == pytest.approx(-1.0)

    def test_hot_stroke_after_cold(self, env):
        """Population inversion toward e^{-3.75} raises the energy"""
        env.step(Action(d=ProcessKind.COLD, u=0.3))
        _, reward, _, _, info = env.step(Action(d=ProcessKind.HOT, u=1.5))
        assert reward > 0.0
        assert info["heat_into_system_h"] == pytest.approx(info["delta_E"])
        assert info["process"] == "hot"

    def test_quench_work_from_scale_change(self, env):
        """Switching u on a diagonal state releases -(u_new - u_old) * <H_free>"""
        state = env.state
        _, _, _, _, info = env.step(Action(d=ProcessKind.HOT, u=1.5))
        free_energy = float(np.real(np.trace(state @ SPEC.free_hamiltonian)))
        assert info["quench_work_out"] == pytest.approx(-(1.5 - 1.0) * free_energy, abs=1e-12)

    def test_accepts_gymnasium_samples(self, env):
        """A sample from the action space is a valid action"""
        env.action_space.seed(0)
        obs, _, _, _, _ = env.step(env.action_space.sample())
        assert obs.shape == (OBS_DIM,)

    def test_observation_populations_stay_normalized(self, env):
        """Diagonal components form a probability vector along a random walk"""
        rng = np.random.default_rng(5)
        for _ in range(60):
            d = ProcessKind.from_index(int(rng.integers(0, 3)))
            obs, reward, _, _, _ = env.step(Action(d=d, u=float(rng.uniform(0.3, 1.5))))
            assert abs(obs[:3].sum() - 1.0) <= 1e-6
            assert np.all(obs[:3] >= -1e-9) and np.all(obs[:3] <= 1.0 + 1e-9)
            if reward != 0.0:
                assert d.is_thermal


class TestDiscountedAverage:
    """Test the running and forward-looking discounted averages"""

    def test_two_step_example(self):
        """[1, 0] with gamma 0.5 gives 0.5 then 0.25"""
        np.testing.assert_allclose(discounted_average([1.0, 0.0], 0.5), [0.5, 0.25])

    def test_recursion_matches_explicit_sum(self):
        """Recursion equals (1 - gamma) sum_k gamma^k v_{i-k}"""
        rng = np.random.default_rng(6)
        for _ in range(10):
            values = rng.standard_normal(100)
            gamma = float(rng.uniform(0.0, 0.99))
            running = discounted_average(values, gamma)
            for i in (0, 17, 99):
                explicit = (1 - gamma) * sum(gamma ** k * values[i - k] for k in range(i + 1))
                assert running[i] == pytest.approx(explicit, abs=1e-12)

    def test_constant_sequence_converges(self):
        """A constant reward is recovered after many steps"""
        assert discounted_average(np.full(5000, 0.7), 0.995)[-1] == pytest.approx(0.7, abs=1e-9)

    def test_future_average_of_constant(self):
        """Forward average truncated at the end: r (1 - gamma^{n - i - 1})"""
        n, gamma = 40, 0.8
        forward = future_discounted_average(np.ones(n), gamma)
        expected = 1.0 - gamma ** (n - np.arange(n) - 1)
        np.testing.assert_allclose(forward, expected, atol=1e-12)
        assert forward[-1] == 0.0

    def test_future_average_explicit(self):
        """Forward average equals (1 - gamma) sum_k gamma^k v_{i+1+k}"""
        values = np.array([1.0, -2.0, 0.5, 3.0])
        gamma = 0.5
        expected = [
            (1 - gamma) * (values[1] + gamma * values[2] + gamma ** 2 * values[3]),
            (1 - gamma) * (values[2] + gamma * values[3]),
            (1 - gamma) * values[3],
            0.0,
        ]
        np.testing.assert_allclose(future_discounted_average(values, gamma), expected, atol=1e-15)

    def test_empty(self):
        """Empty input gives empty output"""
        assert discounted_average([], 0.9).size == 0

    def test_gamma_domain(self):
        """gamma must lie in [0, 1)"""
        with pytest.raises(DiscountDomainError):
            discounted_average([1.0], 1.0)
        with pytest.raises(DiscountDomainError):
            future_discounted_average([1.0], -0.1)

    def test_rate_conversion(self):
        """gamma 0.995 at dt 0.5 is a rate of -ln(0.995)/0.5"""
        rate = discount_to_rate(0.995, 0.5)
        assert rate == pytest.approx(-np.log(0.995) / 0.5)
        assert rate_to_discount(rate, 0.5) == pytest.approx(0.995)

    def test_rate_domain(self):
        """Zero gamma and non-positive rates have no counterpart"""
        with pytest.raises(DiscountDomainError):
            discount_to_rate(0.0, 0.5)
        with pytest.raises(DiscountDomainError):
            rate_to_discount(0.0, 0.5)


class TestRunSchedule:
    """Test schedule replay"""

    def test_all_work_schedule(self):
        """Only Work strokes: every reward and the average power are zero"""
        schedule = constant_schedule("work", [(ProcessKind.WORK, 1.0, 1)])
        rollout = run_schedule(schedule, 20, 0.9)
        assert np.all(rollout.rewards == 0.0)
        assert rollout.final_power == 0.0

    def test_records_are_numbered_from_one(self):
        """StepRecord.step counts completed strokes"""
        rollout = run_schedule(constant_engine_schedule(), 5, 0.9)
        assert [record.step for record in rollout.records] == [1, 2, 3, 4, 5]
        assert [record.process for record in rollout.records[:3]] == [
            ProcessKind.HOT, ProcessKind.WORK, ProcessKind.COLD,
        ]

    def test_zero_steps(self):
        """An empty rollout has zero power"""
        rollout = run_schedule(constant_engine_schedule(), 0, 0.9)
        assert rollout.records == []
        assert rollout.final_power == 0.0

    def test_negative_steps(self):
        """n_steps must be non-negative"""
        with pytest.raises(ValueError):
            run_schedule(constant_engine_schedule(), -1, 0.9)

    def test_out_of_bounds_schedule(self):
        """Schedules are checked against the engine u bounds before replay"""
        schedule = constant_schedule("wide", [(ProcessKind.HOT, 1.6, 1)])
        with pytest.raises(ScheduleError):
            run_schedule(schedule, 3, 0.9)

    def test_first_law_per_period(self):
        """At the periodic state the period's heats equal the work output"""
        rollout = run_schedule(constant_engine_schedule(), 600, 0.995)
        balance = period_balance(rollout.records, 3, SPEC)
        assert abs(balance.energy_residual) <= 1e-6
        period_rewards = rollout.rewards[-3:].sum() * SPEC.dt
        assert period_rewards == pytest.approx(balance.work_out, abs=1e-6)
        assert balance.work_out > 0.0

    def test_controller_sees_observations(self):
        """Controllers are called with the current observation and the step index"""
        calls = []

        class Recorder(ScheduleController):
            def act(self, obs, step):
                calls.append((obs.copy(), step))
                return super().act(obs, step)

        run_schedule(Recorder(constant_engine_schedule()), 4, 0.9)
        assert [step for _, step in calls] == [0, 1, 2, 3]
        assert np.all(calls[0][0][10:] == 0.0)

    def test_trajectory_frame(self):
        """Export table has the fixed column order"""
        frame = run_schedule(constant_engine_schedule(), 6, 0.9).to_frame()
        assert list(frame.columns) == TRAJECTORY_COLUMNS
        assert len(frame) == 6
        assert frame["d"].tolist()[:3] == ["hot", "work", "cold"]
