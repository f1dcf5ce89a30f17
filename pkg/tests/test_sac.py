"""
Tests for the hybrid soft actor-critic

Gradient checks compare every analytic gradient with central differences
along random directions on networks with two hidden layers of width 8.
"""

import numpy as np
import pytest
from scipy.integrate import quad

from agent.nn import MlpShapeError, adam_init, init
from agent.sac import (
    N_PROCESSES,
    LogTemperature,
    PolicyController,
    PolicyHeads,
    QNetPair,
    SacAgent,
    Temperatures,
    actor_loss_and_grads,
    actor_update,
    compute_q_target,
    critic_loss_and_grads,
    critic_update,
    policy_forward,
    policy_init,
    polyak_update,
    q_spec,
    qnets_init,
    sample_action,
    squash,
    squashed_log_prob,
    target_entropy_at,
    temperature_loss_and_grads,
    temperature_update,
)
from engine.environment import QuantumHeatEngineEnv
from engine.qdyn import EngineSpec, ProcessKind
from shared.checkpoint import CheckpointIntegrityError, checkpoint_load, checkpoint_save
from shared.settings import AdamConfig, EntropySchedule
from tests.test_mocks import constant_q_net, create_agent, create_batch, create_train_config


SPEC = EngineSpec()
FD_STEP = 1e-6
FD_CASES = 50


def _random_direction(arrays, rng):
    return [rng.standard_normal(a.shape) for a in arrays]


def _directional_check(loss_at, params, grads, rng):
    """Compare <grad, v> with the central difference of the loss along v"""
    arrays = params.arrays()
    direction = _random_direction(arrays, rng)
    plus = params.with_arrays([a + FD_STEP * v for a, v in zip(arrays, direction)])
    minus = params.with_arrays([a - FD_STEP * v for a, v in zip(arrays, direction)])
    numeric = (loss_at(plus) - loss_at(minus)) / (2 * FD_STEP)
    analytic = sum(float(np.sum(g * v)) for g, v in zip(grads, direction))
    assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(analytic))


def _zero_policy(config):
    policy = policy_init(config, np.random.default_rng(0))
    return policy.with_arrays([np.zeros_like(a) for a in policy.arrays()])


class TestSquashedGaussian:
    """Test the tanh-squashed Gaussian over [u_min, u_max]"""

    @pytest.mark.parametrize("mu, log_std", [(0.0, -0.5), (0.3, -0.5), (-1.0, -1.5)])
    def test_density_integrates_to_one(self, mu, log_std):
        """exp(log pi_C) is a probability density on (0.3, 1.5)"""
        with np.errstate(divide="ignore", invalid="ignore"):
            total, _ = quad(lambda u: float(np.exp(squashed_log_prob(u, mu, log_std, SPEC))), 0.3, 1.5, limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_sample_log_prob_matches_density(self):
        """The reparameterized log probability equals the density at the sampled u"""
        rng = np.random.default_rng(0)
        mu = rng.uniform(-1, 1, size=20)
        log_std = rng.uniform(-1, 0, size=20)
        noise = rng.standard_normal(20)
        u, y, log_prob = squash(mu, log_std, noise, SPEC)
        for k in range(20):
            assert log_prob[k] == pytest.approx(squashed_log_prob(u[k], mu[k], log_std[k], SPEC), abs=1e-8)
        np.testing.assert_allclose(y, np.tanh(mu + np.exp(log_std) * noise))

    def test_extreme_mean_stays_in_bounds(self):
        """Saturated tanh still lands inside the bounds"""
        u, _, log_prob = squash(np.array([50.0, -50.0]), np.array([0.0, 0.0]), np.array([0.0, 0.0]), SPEC)
        assert np.all(u >= 0.3) and np.all(u <= 1.5)
        assert np.all(np.isfinite(log_prob))


class TestPolicy:
    """Test policy evaluation and action sampling"""

    def test_output_shapes(self):
        """Each quantity is (batch, 3) and pi sums to one"""
        config = create_train_config()
        policy = policy_init(config, np.random.default_rng(0))
        out = policy_forward(policy, create_batch(np.random.default_rng(1)).obs)
        assert out.logits.shape == out.mu.shape == out.log_std.shape == (8, N_PROCESSES)
        np.testing.assert_allclose(out.pi.sum(axis=1), 1.0)

    def test_log_std_is_clipped(self):
        """Raw log standard deviations are clipped to the configured range"""
        config = create_train_config(log_std_min=-1.0, log_std_max=0.5)
        policy = _zero_policy(config)
        net = policy.nets[0]
        biases = [b.copy() for b in net.biases]
        biases[-1][2 * N_PROCESSES:] = [-5.0, 3.0, 0.0]
        policy = PolicyHeads(
            nets=(net.with_arrays([a for pair in zip(net.weights, biases) for a in pair]),),
            log_std_min=-1.0, log_std_max=0.5,
        )
        out = policy_forward(policy, np.zeros(13))
        np.testing.assert_allclose(out.log_std[0], [-1.0, 0.5, 0.0])
        np.testing.assert_array_equal(out.log_std_mask[0], [False, False, True])

    def test_uniform_logits_sample_uniformly(self):
        """Equal logits choose each process about a third of the time"""
        policy = _zero_policy(create_train_config())
        rng = np.random.default_rng(2)
        counts = np.zeros(N_PROCESSES)
        for _ in range(6000):
            action, log_pi_d, _ = sample_action(policy, np.zeros(13), "stochastic", rng, SPEC)
            counts[action.d.action_index] += 1
            assert 0.3 <= action.u <= 1.5
            assert log_pi_d == pytest.approx(-np.log(3.0))
        np.testing.assert_allclose(counts / counts.sum(), 1.0 / 3.0, atol=0.03)

    def test_deterministic_mode(self):
        """Deterministic actions are the argmax process at tanh of the mean"""
        policy = _zero_policy(create_train_config())
        action, _, _ = sample_action(policy, np.zeros(13), "deterministic", None, SPEC)
        assert action.d is ProcessKind.HOT
        assert action.u == pytest.approx(0.9)

    def test_stochastic_mode_needs_generator(self):
        """A generator is required for stochastic sampling"""
        with pytest.raises(ValueError):
            sample_action(_zero_policy(create_train_config()), np.zeros(13), "stochastic", None, SPEC)

    def test_separate_heads(self):
        """Without a shared trunk the policy has a discrete and a continuous network"""
        policy = policy_init(create_train_config(shared_trunk=False), np.random.default_rng(0))
        assert not policy.shared_trunk
        assert set(policy.network_arrays()) == {"policy_discrete", "policy_continuous"}

    def test_controller_is_deterministic(self):
        """PolicyController ignores the step index and needs no generator"""
        controller = PolicyController(policy_init(create_train_config(), np.random.default_rng(0)), SPEC)
        obs, _ = QuantumHeatEngineEnv().reset()
        assert controller.act(obs, 0) == controller.act(obs, 5)


class TestTargetEntropy:
    """Test the exponential target-entropy schedule"""

    def test_initial_targets(self):
        """n = 0 gives the initial values"""
        discrete, continuous = target_entropy_at(EntropySchedule(), 0)
        assert discrete == pytest.approx(1.076640, abs=1e-6)
        assert continuous == pytest.approx(-0.72)

    def test_one_decay_constant(self):
        """After one decay constant the gap shrinks by e"""
        discrete, continuous = target_entropy_at(EntropySchedule(), 144_000)
        assert continuous == pytest.approx(-2.666929, abs=1e-6)
        assert discrete == pytest.approx(0.03 + (0.98 * np.log(3.0) - 0.03) * np.exp(-1.0))

    def test_converges_to_final(self):
        """Long runs approach the final targets"""
        discrete, continuous = target_entropy_at(EntropySchedule(), 10_000_000)
        assert discrete == pytest.approx(0.03, abs=1e-9)
        assert continuous == pytest.approx(-3.8, abs=1e-9)

    def test_negative_steps(self):
        """Step counts are non-negative"""
        with pytest.raises(ValueError):
            target_entropy_at(EntropySchedule(), -1)


class TestCritic:
    """Test Bellman targets and critic gradients"""

    def test_zero_discount_target_is_reward(self):
        """gamma = 0 reduces the target to the reward"""
        rng = np.random.default_rng(0)
        batch = create_batch(rng)
        agent = create_agent()
        y = compute_q_target(batch, agent.qnets, agent.policy, agent.temperatures, 0.0, SPEC, rng=rng)
        np.testing.assert_array_equal(y, batch.reward)

    def test_target_with_constant_critics(self):
        """Soft value is the policy-weighted Q plus both entropy bonuses"""
        rng = np.random.default_rng(1)
        batch = create_batch(rng)
        policy = policy_init(create_train_config(), rng)
        q = constant_q_net([1.0, 2.0, 3.0])
        qnets = QNetPair(online=(q, q), target=(q, constant_q_net([1.5, 2.5, 3.5])))
        temps = Temperatures(LogTemperature(np.log(0.2)), LogTemperature(np.log(0.1)))
        noise = rng.standard_normal((len(batch), N_PROCESSES))

        y = compute_q_target(batch, qnets, policy, temps, 0.9, SPEC, noise=noise)

        out = policy_forward(policy, batch.next_obs)
        _, _, log_prob = squash(out.mu, out.log_std, noise, SPEC)
        soft = np.sum(out.pi * (np.array([1.0, 2.0, 3.0]) - 0.1 * log_prob), axis=1)
        soft += 0.2 * -np.sum(out.pi * out.log_pi, axis=1)
        np.testing.assert_allclose(y, batch.reward + 0.9 * soft, rtol=1e-10, atol=1e-12)

    def test_target_needs_noise_source(self):
        """Either a generator or explicit noise must be given"""
        agent = create_agent()
        batch = create_batch(np.random.default_rng(0))
        with pytest.raises(ValueError):
            compute_q_target(batch, agent.qnets, agent.policy, agent.temperatures, 0.9, SPEC)

    @pytest.mark.parametrize("seed", range(FD_CASES))
    def test_critic_gradient(self, seed):
        """Critic gradient matches central differences"""
        rng = np.random.default_rng(seed)
        qnet = init(q_spec(create_train_config()), rng)
        batch = create_batch(rng)
        y = rng.standard_normal(len(batch))
        _, grads = critic_loss_and_grads(qnet, batch, y, SPEC)
        _directional_check(lambda p: critic_loss_and_grads(p, batch, y, SPEC)[0], qnet, grads.arrays(), rng)

    def test_critic_update_only_moves_online(self):
        """Targets are untouched by the critic step"""
        agent = create_agent()
        batch = create_batch(np.random.default_rng(0))
        y = np.ones(len(batch))
        states = (agent.optimizers["q1"], agent.optimizers["q2"])
        qnets, new_states, loss = critic_update(batch, agent.qnets, y, states, SPEC)
        assert qnets.target is agent.qnets.target
        assert not np.array_equal(qnets.online[0].weights[0], agent.qnets.online[0].weights[0])
        assert new_states[0].step == 1
        assert np.isfinite(loss)


class TestActor:
    """Test the policy loss and its gradient"""

    @pytest.mark.parametrize("seed, shared", [(s, s % 2 == 0) for s in range(FD_CASES)])
    def test_actor_gradient(self, seed, shared):
        """Policy gradient through logits, means and log std matches central differences"""
        rng = np.random.default_rng(seed)
        config = create_train_config(shared_trunk=shared)
        policy = policy_init(config, rng)
        critics = (init(q_spec(config), rng), init(q_spec(config), rng))
        temps = Temperatures(LogTemperature(float(rng.uniform(-2, 0))), LogTemperature(float(rng.uniform(-2, 0))))
        obs = create_batch(rng).obs
        noise = rng.standard_normal((len(obs), N_PROCESSES))
        _, grads = actor_loss_and_grads(policy, critics, temps, obs, noise, SPEC)
        _directional_check(
            lambda p: actor_loss_and_grads(p, critics, temps, obs, noise, SPEC)[0].loss, policy, grads, rng,
        )

    def test_actor_step_leaves_critics(self):
        """Actor updates read the critics without changing them"""
        agent = create_agent()
        before = [a.copy() for net in agent.qnets.online for a in net.arrays()]
        actor_update(
            create_batch(np.random.default_rng(0)), agent.policy, agent.qnets, agent.temperatures,
            agent.optimizers["policy"], SPEC, np.random.default_rng(1),
        )
        after = [a for net in agent.qnets.online for a in net.arrays()]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_pushes_toward_best_process(self):
        """With Work worth most and little entropy pressure, pi(Work) grows"""
        config = create_train_config(adam=AdamConfig(learning_rate=1e-2))
        rng = np.random.default_rng(3)
        policy = policy_init(config, rng)
        q = constant_q_net([0.0, 0.0, 5.0])
        qnets = QNetPair(online=(q, q), target=(q, q))
        temps = Temperatures(LogTemperature(-10.0), LogTemperature(-10.0))
        batch = create_batch(rng, batch_size=16)
        state = adam_init(policy, config.adam)
        start = policy_forward(policy, batch.obs).pi[:, 2].mean()
        for _ in range(50):
            policy, state, _ = actor_update(batch, policy, qnets, temps, state, SPEC, rng)
        assert policy_forward(policy, batch.obs).pi[:, 2].mean() > start + 0.1


class TestTemperature:
    """Test the temperature losses"""

    @pytest.mark.parametrize("seed", range(FD_CASES))
    def test_temperature_gradient(self, seed):
        """d L_alpha / d log alpha matches central differences"""
        rng = np.random.default_rng(seed)
        temps = Temperatures(LogTemperature(float(rng.normal())), LogTemperature(float(rng.normal())))
        entropies = (float(rng.uniform(0, 1)), float(rng.uniform(-3, 0)))
        targets = (float(rng.uniform(0, 1)), float(rng.uniform(-3, 0)))
        _, grads = temperature_loss_and_grads(temps, entropies, targets)
        for head in range(2):
            def loss_at(shift):
                values = [temps.discrete.value, temps.continuous.value]
                values[head] += shift
                shifted = Temperatures(LogTemperature(values[0]), LogTemperature(values[1]))
                return temperature_loss_and_grads(shifted, entropies, targets)[0][head]

            numeric = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2 * FD_STEP)
            assert numeric == pytest.approx(grads[head], rel=1e-4, abs=1e-10)

    def test_excess_entropy_lowers_alpha(self):
        """Entropy above target decreases alpha, below target increases it"""
        temps = Temperatures(LogTemperature(0.0), LogTemperature(0.0))
        states = (adam_init(temps.discrete), adam_init(temps.continuous))
        updated, _, _ = temperature_update(temps, states, (1.0, -2.0), (0.5, -1.0))
        assert updated.alpha_d < 1.0
        assert updated.alpha_c > 1.0


class TestPolyak:
    """Test soft target updates"""

    def test_examples(self):
        """tau = 1 copies online, tau = 0 keeps target, tau = 0.5 averages"""
        online = LogTemperature(2.0)
        target = LogTemperature(0.0)
        assert polyak_update(online, target, 1.0).value == 2.0
        assert polyak_update(online, target, 0.0).value == 0.0
        assert polyak_update(online, target, 0.5).value == 1.0

    def test_convex_hull(self):
        """Repeated updates toward fixed online params stay between the two endpoints"""
        rng = np.random.default_rng(0)
        config = create_train_config()
        online = init(q_spec(config), rng)
        start = init(q_spec(config), rng)
        target = start
        for _ in range(100):
            target = polyak_update(online, target, float(rng.uniform(0, 1)))
        for o, s, t in zip(online.arrays(), start.arrays(), target.arrays()):
            assert np.all(t >= np.minimum(o, s) - 1e-12)
            assert np.all(t <= np.maximum(o, s) + 1e-12)

    def test_invalid_tau(self):
        """tau outside [0, 1] is refused"""
        with pytest.raises(ValueError):
            polyak_update(LogTemperature(1.0), LogTemperature(0.0), 1.5)

    def test_shape_mismatch(self):
        """Online and target must have the same architecture"""
        small = init(q_spec(create_train_config(hidden_dims=(4,))), 0)
        large = init(q_spec(create_train_config(hidden_dims=(8,))), 0)
        with pytest.raises(MlpShapeError):
            polyak_update(small, large, 0.5)


class TestSacAgent:
    """Test the agent as a whole"""

    def test_create_targets_equal_online(self):
        """Fresh targets are copies of the online critics"""
        agent = create_agent()
        for online, target in zip(agent.qnets.online, agent.qnets.target):
            assert online is not target
            for a, b in zip(online.arrays(), target.arrays()):
                np.testing.assert_array_equal(a, b)

    def test_update_round(self):
        """One round moves every learnable part and reports finite statistics"""
        agent = create_agent()
        policy_before = [a.copy() for a in agent.policy.arrays()]
        target_before = [a.copy() for a in agent.qnets.target[0].arrays()]
        stats = agent.update(create_batch(np.random.default_rng(0), 16), 100, np.random.default_rng(1))
        assert all(np.isfinite(value) for value in vars(stats).values())
        assert not np.array_equal(policy_before[0], agent.policy.arrays()[0])
        assert not np.array_equal(target_before[0], agent.qnets.target[0].arrays()[0])
        assert all(state.step == 1 for state in agent.optimizers.values())
        assert stats.target_entropy_c == pytest.approx(target_entropy_at(agent.config.entropy, 100)[1])

    def test_update_is_deterministic(self):
        """Equal seeds give equal parameters"""
        results = []
        for _ in range(2):
            agent = create_agent(seed=4)
            agent.update(create_batch(np.random.default_rng(0), 16), 0, np.random.default_rng(1))
            results.append(agent.policy.arrays())
        for a, b in zip(*results):
            np.testing.assert_array_equal(a, b)

    def test_checkpoint_round_trip(self, tmp_path):
        """Saved and reloaded agents are bit-identical"""
        agent = create_agent()
        agent.update(create_batch(np.random.default_rng(0), 16), 10, np.random.default_rng(1))
        path = checkpoint_save(tmp_path / "agent.json", agent.to_checkpoint(10))
        restored = SacAgent.from_checkpoint(checkpoint_load(path), agent.config, SPEC)

        for a, b in zip(agent.policy.arrays(), restored.policy.arrays()):
            np.testing.assert_array_equal(a, b)
        for mine, theirs in zip((*agent.qnets.online, *agent.qnets.target), (*restored.qnets.online, *restored.qnets.target)):
            for a, b in zip(mine.arrays(), theirs.arrays()):
                np.testing.assert_array_equal(a, b)
        assert restored.temperatures == agent.temperatures
        for name, state in agent.optimizers.items():
            assert restored.optimizers[name].step == state.step
            for a, b in zip(state.v, restored.optimizers[name].v):
                np.testing.assert_array_equal(a, b)

    def test_checkpoint_architecture_mismatch(self, tmp_path):
        """Loading into a different architecture names the offending layer"""
        agent = create_agent()
        checkpoint = agent.to_checkpoint(0)
        with pytest.raises(CheckpointIntegrityError, match="layer 0"):
            SacAgent.from_checkpoint(checkpoint, create_train_config(hidden_dims=(4, 4)), SPEC)

    def test_qnets_init_independent(self):
        """The twin critics start from different parameters"""
        qnets = qnets_init(create_train_config(), np.random.default_rng(0))
        assert not np.array_equal(qnets.online[0].weights[0], qnets.online[1].weights[0])
