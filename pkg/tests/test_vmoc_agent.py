import numpy as np
import pytest
from scipy.stats import norm

from lab_errors import ConfigError
from envs import make_env
from replay_utils import ReplayBuffer, Transition
from run_config_utils import read_run_config, resolve_input_path, seed_streams
from vmoc_agent import (VMOCConfig, VMOCAgent, METRIC_COLUMNS, LOG_STD_MIN, LOG_STD_MAX, build_agent, evaluate,
                        option_usage_entropy, train_vmoc, save_agent, load_agent)

OBS_DIM = 3


def _agent(discrete, seed=0, **overrides):
    settings = dict(n_options=2, embedding_dim=3, hidden_sizes=[8], batch_size=16, normalize_obs=False)
    settings.update(overrides)
    action_dim = 3 if discrete else 1
    return VMOCAgent(OBS_DIM, action_dim, discrete, VMOCConfig(**settings), np.random.default_rng(seed))


def _batch(agent, n=16, seed=1):
    rng = np.random.default_rng(seed)
    if agent.discrete:
        a = rng.integers(agent.action_dim, size=n)
    else:
        a = rng.uniform(-0.9, 0.9, size=(n, agent.action_dim))
    return {'s': rng.normal(size=(n, OBS_DIM)), 'o_prev': rng.integers(agent.n_options, size=n), 'a': a,
            'r': rng.normal(size=n), 's_next': rng.normal(size=(n, OBS_DIM)),
            'o': rng.integers(agent.n_options, size=n), 'done': (rng.uniform(size=n) < 0.25).astype(float)}


def _gradient_error(agent, group, loss_fn, entries=5, steps=(1e-5, 1e-7)):
    ''' Worst mismatch between analytic and central-difference gradients over random entries of a group'''

    analytic = loss_fn().grads[group]
    rng = np.random.default_rng(7)
    worst = 0.0
    for param, grad in zip(agent.param_groups()[group], analytic):
        for _ in range(entries):
            idx = tuple(int(rng.integers(dim)) for dim in param.shape)
            saved = param[idx]
            errors = []
            # a relu kink inside the larger step is usually clear of the smaller one
            for step in steps:
                param[idx] = saved + step
                plus = loss_fn().loss
                param[idx] = saved - step
                minus = loss_fn().loss
                param[idx] = saved
                numeric = (plus - minus) / (2 * step)
                errors.append(abs(grad[idx] - numeric) / max(abs(grad[idx]), abs(numeric), 1e-3))
            worst = max(worst, min(errors))
    return worst


def _constant_head(net, values):
    ''' Make a network output the same values for every input'''

    net.params[-2][...] = 0.0
    net.params[-1][...] = values


@pytest.mark.parametrize('discrete', [True, False])
def test_critic_gradients(discrete):
    agent = _agent(discrete)
    batch = _batch(agent)
    assert _gradient_error(agent, 'qa', lambda: agent.critic_loss_action(batch)) < 1e-4
    assert _gradient_error(agent, 'qo', lambda: agent.critic_loss_option(batch)) < 1e-4


@pytest.mark.parametrize('discrete', [True, False])
def test_option_policy_gradients_include_the_embedding(discrete):
    agent = _agent(discrete, regularizer_mode='mutual_info')
    batch = _batch(agent)
    result = agent.actor_loss_option(batch)
    assert len(result.grads['po']) == len(agent.param_groups()['po'])
    assert np.any(result.grads['po'][-1] != 0.0)
    assert _gradient_error(agent, 'po', lambda: agent.actor_loss_option(batch)) < 1e-4


def test_discrete_action_policy_gradient():
    agent = _agent(True)
    batch = _batch(agent)
    assert _gradient_error(agent, 'pa', lambda: agent.actor_loss_action(batch)) < 1e-4


def test_continuous_action_policy_gradient_with_frozen_noise():
    agent = _agent(False)
    batch = _batch(agent)
    noise = agent.draw_action_noise(len(batch['r']))
    assert _gradient_error(agent, 'pa', lambda: agent.actor_loss_action(batch, noise)) < 1e-4


@pytest.mark.parametrize('discrete', [True, False])
def test_temperature_gradients_in_log_space(discrete):
    agent = _agent(discrete)
    batch = _batch(agent)
    noise = agent.draw_action_noise(len(batch['r']))
    loss_fn = lambda: agent.temperature_loss(batch, noise)  # noqa: E731
    result = loss_fn()
    assert result.grads['alpha_a'][0][0] == pytest.approx(result.info['loss_alpha_a'])
    assert _gradient_error(agent, 'alpha_a', loss_fn) < 1e-6
    assert _gradient_error(agent, 'alpha_o', loss_fn) < 1e-6


@pytest.mark.parametrize('seed', range(20))
@pytest.mark.parametrize('discrete', [True, False])
def test_all_gradients_on_seeded_draws(discrete, seed):
    agent = _agent(discrete, seed=seed, regularizer_mode='mutual_info')
    batch = _batch(agent, seed=seed + 100)
    noise = agent.draw_action_noise(len(batch['r']))
    losses = {'qa': lambda: agent.critic_loss_action(batch),
              'qo': lambda: agent.critic_loss_option(batch),
              'po': lambda: agent.actor_loss_option(batch),
              'pa': lambda: agent.actor_loss_action(batch, noise),
              'alpha_a': lambda: agent.temperature_loss(batch, noise),
              'alpha_o': lambda: agent.temperature_loss(batch, noise)}
    for group, loss_fn in losses.items():
        assert _gradient_error(agent, group, loss_fn, entries=3) < 1e-4, group


def _sac_reference_losses(agent, batch, noise):
    ''' Soft actor-critic with a learned state value, evaluated directly on the networks'''

    s, a, r, s_next, done = batch['s'], batch['a'], batch['r'], batch['s_next'], batch['done']
    alpha, gamma = agent.alpha_a, agent.config.gamma
    w = np.repeat(agent.embedding[:1], len(r), axis=0)

    value_next = np.minimum(agent.qo_target[0].forward(s_next)[:, 0], agent.qo_target[1].forward(s_next)[:, 0])
    target = r + gamma * (1.0 - done) * value_next
    critic = sum(np.mean((net.forward(np.hstack([s, w, a]))[:, 0] - target) ** 2) for net in agent.qa)

    out = agent.pi_a.forward(np.hstack([s, w]))
    mean, std = out[:, :1], np.exp(np.clip(out[:, 1:], LOG_STD_MIN, LOG_STD_MAX))
    u = mean + std * noise
    logp = np.sum(norm.logpdf(u, mean, std) - 2.0 * np.log(np.cosh(u)), axis=1)
    x_new = np.hstack([s, w, np.tanh(u)])
    q_new = np.minimum(agent.qa[0].forward(x_new)[:, 0], agent.qa[1].forward(x_new)[:, 0])
    actor = np.mean(alpha * logp - q_new)
    temperature = -np.mean(alpha * (logp + agent.target_entropy_a))
    return critic, actor, temperature


def test_single_option_reduces_to_soft_actor_critic():
    env = make_env('pendulum', np.random.default_rng(20))
    config = VMOCConfig(n_options=1, embedding_dim=4, hidden_sizes=[32, 32], batch_size=32, normalize_obs=False)
    agent = build_agent(env, config, np.random.default_rng(21))
    rng = np.random.default_rng(22)
    buffer = ReplayBuffer(1000, rng)
    obs = env.reset()
    for _ in range(300):
        a = rng.uniform(-1.0, 1.0, size=1)
        next_obs, r, done, info = env.step(agent.env_action(a))
        buffer.add(Transition(obs, 0, a, r, next_obs, 0, done))
        obs = env.reset() if info['truncated'] else next_obs

    for _ in range(100):
        batch = buffer.sample(32)
        noise = agent.draw_action_noise(32)
        critic, actor, temperature = _sac_reference_losses(agent, batch, noise)
        temps = agent.temperature_loss(batch, noise)
        assert agent.critic_loss_action(batch).loss == pytest.approx(critic, rel=1e-8, abs=1e-8)
        assert agent.actor_loss_action(batch, noise).loss == pytest.approx(actor, rel=1e-8, abs=1e-8)
        assert temps.info['loss_alpha_a'] == pytest.approx(temperature, rel=1e-8, abs=1e-8)
        assert temps.info['loss_alpha_o'] == 0.0 and temps.info['ent_o'] == 0.0
        agent.train_step(buffer)
    assert agent.act(obs, 0, 'explore')[0] == 0


def test_critic_residual_on_a_single_option():
    agent = _agent(True, n_options=1, gamma=0.9)
    batch = _batch(agent, n=4)
    n = 4
    x = np.concatenate([batch['s'], agent.embedding[batch['o']]], axis=1)
    q = [net.forward(x)[np.arange(n), batch['a']] for net in agent.qa]
    # one option: the option policy is certain and adds no entropy
    v_next = np.minimum(agent.qo_target[0].forward(batch['s_next']),
                        agent.qo_target[1].forward(batch['s_next']))[:, 0]
    target = batch['r'] + 0.9 * (1.0 - batch['done']) * v_next
    expected = sum(np.mean((qi - target) ** 2) for qi in q)
    result = agent.critic_loss_action(batch)
    assert result.loss == pytest.approx(expected, rel=1e-10)
    assert result.info['target_mean'] == pytest.approx(np.mean(target))


def test_regularizer_values():
    agent = _agent(True)
    batch = _batch(agent)
    assert np.array_equal(agent.regularizer_values(batch), np.zeros(16))
    agent.config.regularizer_mode = 'mutual_info'
    values = agent.regularizer_values(batch)
    assert values.shape == (16,) and np.all(values <= 0.0)


def test_default_target_entropies():
    assert _agent(True).target_entropy_a == pytest.approx(0.98 * np.log(3))
    continuous = _agent(False)
    assert continuous.target_entropy_a == -1.0
    assert continuous.target_entropy_o == pytest.approx(0.5 * np.log(2))


def test_act_modes():
    agent = _agent(False)
    obs = np.array([0.3, -0.2, 1.0])
    o, a = agent.act(obs, 0, 'greedy')
    assert o in (0, 1) and a.shape == (1,) and np.all(np.abs(a) <= 1.0)
    assert np.array_equal(agent.act(obs, 0, 'greedy')[1], a)
    for _ in range(20):
        o, a = agent.act(obs, 1, 'explore')
        assert np.all(np.abs(a) <= 1.0)
    with pytest.raises(ConfigError):
        agent.act(obs, 0, 'sample')
    discrete = _agent(True)
    o, a = discrete.act(obs, 1, 'explore')
    assert isinstance(a, int) and 0 <= a < 3


def test_greedy_option_is_the_argmax_logit():
    agent = _agent(True, n_options=4)
    _constant_head(agent.pi_o, [2.0, 1.0, 1.0, 1.0])
    rng = np.random.default_rng(5)
    for o_prev in range(4):
        assert agent.act(rng.normal(size=OBS_DIM), o_prev, 'greedy')[0] == 0
    picks = [agent.act(np.zeros(OBS_DIM), 1, 'explore', rng)[0] for _ in range(4000)]
    assert np.mean(np.array(picks) == 0) == pytest.approx(np.e / (np.e + 3.0), abs=0.04)


def test_option_actor_optimum_is_the_boltzmann_policy():
    agent = _agent(True, alpha_o=0.5)
    batch = _batch(agent)
    for net in agent.qo:
        _constant_head(net, [1.0, 0.0])
    _constant_head(agent.pi_o, [2.0, 0.0])
    result = agent.actor_loss_option(batch)
    assert result.loss == pytest.approx(-0.5 * np.logaddexp(2.0, 0.0), rel=1e-12)
    assert max(np.max(np.abs(g)) for g in result.grads['po']) < 1e-12
    for logits in ([1.0, 0.0], [3.0, 0.0], [0.0, 0.0]):
        _constant_head(agent.pi_o, logits)
        assert agent.actor_loss_option(batch).loss > result.loss


def test_constant_option_values_leave_the_uniform_policy_still():
    agent = _agent(True)
    batch = _batch(agent)
    for net in agent.qo:
        _constant_head(net, [0.7, 0.7])
    _constant_head(agent.pi_o, [0.0, 0.0])
    result = agent.actor_loss_option(batch)
    assert max(np.max(np.abs(g)) for g in result.grads['po']) < 1e-12
    assert result.info['entropy'] == pytest.approx(np.log(2))


def test_option_temperature_gradient_sign():
    agent = _agent(True, target_entropy_o=float(np.log(2)))
    batch = _batch(agent)
    _constant_head(agent.pi_o, [0.0, 0.0])
    assert agent.temperature_loss(batch).grads['alpha_o'][0][0] == pytest.approx(0.0, abs=1e-12)

    # entropy above its target: the temperature has to fall
    agent.target_entropy_o = 0.2
    result = agent.temperature_loss(batch)
    assert result.grads['alpha_o'][0][0] > 0.0
    alpha_o = agent.alpha_o
    agent._apply(result)
    assert agent.alpha_o < alpha_o

    agent.target_entropy_o = 1.0
    assert agent.temperature_loss(batch).grads['alpha_o'][0][0] < 0.0


def test_option_entropy_tracks_its_target():
    agent = _agent(True, lr=1e-2, target_entropy_o=0.3)
    batch = _batch(agent)
    for net in agent.qo:
        _constant_head(net, [1.0, 0.0])
    gaps = []
    for _ in range(2000):
        agent._apply(agent.actor_loss_option(batch))
        temps = agent.temperature_loss(batch)
        gaps.append(abs(temps.info['ent_o'] - 0.3))
        agent._apply(temps)
    assert np.mean(gaps[-500:]) < np.mean(gaps[:500])


def test_target_update_extremes():
    agent = _agent(False)
    for net in agent.qa + agent.qo:
        net.set_flat(net.get_flat() + 0.5)
    before = [net.get_flat() for net in agent.qa_target + agent.qo_target]
    agent.update_targets(sigma=0.0)
    assert all(np.array_equal(net.get_flat(), flat) for net, flat in zip(agent.qa_target + agent.qo_target, before))
    agent.update_targets(sigma=1.0)
    for target, online in zip(agent.qa_target + agent.qo_target, agent.qa + agent.qo):
        assert np.array_equal(target.get_flat(), online.get_flat())


def test_snapshot_is_frozen():
    agent = _agent(True)
    snapshot = agent.snapshot()
    obs = np.array([0.1, 0.2, 0.3])
    assert snapshot.act(obs, 0, 'greedy', None) == agent.act(obs, 0, 'greedy')
    agent.pi_o.params[-1] += 100.0 * np.arange(agent.n_options)
    assert agent.act(obs, 0, 'greedy')[0] == agent.n_options - 1
    assert not np.array_equal(snapshot.pi_o.params[-1], agent.pi_o.params[-1])


def _filled_buffer(agent, n=64, seed=3):
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(1000, rng)
    for _ in range(n):
        a = int(rng.integers(agent.action_dim)) if agent.discrete else rng.uniform(-1, 1, size=agent.action_dim)
        buffer.add(Transition(rng.normal(size=OBS_DIM), int(rng.integers(agent.n_options)), a,
                              float(rng.normal()), rng.normal(size=OBS_DIM), int(rng.integers(agent.n_options)),
                              bool(rng.uniform() < 0.1)))
    return buffer


@pytest.mark.parametrize('discrete', [True, False])
def test_train_step_reports_metrics(discrete):
    agent = _agent(discrete, normalize_obs=True)
    buffer = _filled_buffer(agent)
    for i in range(64):
        agent.normalizer.update(buffer.storage['s'][i])
    targets = agent.qa_target[0].get_flat()
    alpha_a = agent.alpha_a
    metrics = agent.train_step(buffer)
    assert set(METRIC_COLUMNS[3:]) <= set(metrics)
    assert all(np.isfinite(value) for value in metrics.values())
    assert not np.array_equal(agent.qa_target[0].get_flat(), targets)
    assert agent.alpha_a != alpha_a


def test_fixed_temperatures_stay_fixed():
    agent = _agent(True, auto_temperature=False)
    agent.train_step(_filled_buffer(agent))
    assert agent.alpha_a == pytest.approx(0.05) and agent.alpha_o == pytest.approx(0.05)


def test_save_and_load_reproduce_actions(tmp_path):
    agent = _agent(False, normalize_obs=True)
    buffer = _filled_buffer(agent)
    agent.normalizer.update(buffer.storage['s'][:64])
    agent.train_step(buffer)
    save_agent(agent, tmp_path / 'agent')
    loaded = load_agent(tmp_path / 'agent', OBS_DIM, 1, False, np.random.default_rng(9))
    assert loaded.alpha_a == agent.alpha_a and loaded.alpha_o == agent.alpha_o
    rng = np.random.default_rng(4)
    for _ in range(5):
        obs, o_prev = rng.normal(size=OBS_DIM), int(rng.integers(2))
        o, a = agent.act(obs, o_prev, 'greedy')
        o_loaded, a_loaded = loaded.act(obs, o_prev, 'greedy')
        assert o == o_loaded and np.array_equal(a, a_loaded)


def test_option_usage_entropy():
    assert option_usage_entropy([0, 0]) == 0.0
    assert option_usage_entropy([5, 5]) == pytest.approx(np.log(2))


def test_evaluate_counts_options():
    env = make_env('chain:4', np.random.default_rng(0))
    agent = VMOCAgent(4, 2, True, VMOCConfig(n_options=2, embedding_dim=2, hidden_sizes=[4]),
                      np.random.default_rng(1))
    result = evaluate(agent, env, 2)
    assert result['option_counts'].sum() >= 2
    assert 0.0 <= result['success_rate'] <= 1.0
    assert result['ret_std'] >= 0.0


def test_short_training_run_writes_rows():
    config = VMOCConfig(n_options=2, embedding_dim=4, hidden_sizes=[16], batch_size=8, total_steps=120,
                        start_steps=40, update_after=40, update_every=20, eval_interval=60, eval_episodes=1)
    factory = lambda rng: make_env('chain:4', rng)  # noqa: E731
    _, rows, evaluations = train_vmoc(factory, config, seed_streams(0), progress=False)
    assert [row['step'] for row in rows] == [60, 120]
    assert list(rows[0]) == METRIC_COLUMNS
    again = train_vmoc(factory, config, seed_streams(0), progress=False)[1]
    assert [row['ret_mean'] for row in rows] == [row['ret_mean'] for row in again]
    assert len(evaluations) == 2


@pytest.mark.slow
def test_chain_is_solved():
    config = VMOCConfig(n_options=2, embedding_dim=8, hidden_sizes=[64, 64], gamma=0.9, lr=1e-3, batch_size=64,
                        total_steps=4000, start_steps=500, update_after=500, update_every=50,
                        eval_interval=1000, eval_episodes=5)
    agent, rows, evaluations = train_vmoc(lambda rng: make_env('chain:5', rng), config, seed_streams(3),
                                          progress=False)
    assert evaluations[-1]['success_rate'] == 1.0


def _settings(name):
    ''' Environment id and agent config of a shipped train-vmoc settings file'''

    sec = read_run_config('train-vmoc', resolve_input_path(name))['train_vmoc']
    return sec['env_id'], VMOCConfig.from_dict(sec)


@pytest.mark.slow
@pytest.mark.parametrize('seed', [0, 1, 2])
def test_pendulum_median_return_improves_by_half(seed):
    env_id, config = _settings('train_pendulum.yaml')
    assert (config.n_options, config.embedding_dim, config.alpha_a, config.alpha_o) == (4, 40, 0.05, 0.05)
    assert not config.auto_temperature and config.total_steps <= 50000
    factory = lambda rng: make_env(env_id, rng)  # noqa: E731

    untrained = build_agent(factory(seed_streams(seed)['env']), config, seed_streams(seed)['init'])
    before = evaluate(untrained, factory(seed_streams(seed)['eval']), config.eval_episodes)['ret_median']
    _, _, evaluations = train_vmoc(factory, config, seed_streams(seed), progress=False)
    after = max(e['ret_median'] for e in evaluations)
    assert before < 0.0
    assert after >= before + 0.5 * abs(before)


@pytest.mark.slow
def test_four_rooms_is_solved_with_several_options():
    env_id, config = _settings('train_four_rooms.yaml')
    _, _, evaluations = train_vmoc(lambda rng: make_env(env_id, rng), config, seed_streams(0), progress=False)
    assert evaluations[-1]['success_rate'] >= 0.9
    assert evaluations[-1]['option_entropy'] >= 0.5
