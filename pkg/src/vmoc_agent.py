"""

VMOC agent

Off-policy variational Markovian option critic: twin soft critics for
actions and options with target copies, an embedding-based option policy,
a tanh-Gaussian (or categorical) action policy, automatic temperature
tuning, replay-buffer training and greedy evaluation.

Networks (s is the normalized observation, W the option embedding matrix):
  action critics   Q_A(s, W[o], a) -> 1     (discrete: Q_A(s, W[o]) -> A)
  option critics   Q_O(s) -> K
  action policy    pi_A(s, W[o]) -> mean, log_std   (discrete: A logits)
  option policy    pi_O(s, W[o_prev]) -> K logits

W only receives gradients through the option policy input.

"""

import os
import logging
from dataclasses import dataclass, fields, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.special import entr, log_softmax, softmax
from tqdm import tqdm

from lab_settings import read_lab_settings
from lab_errors import ConfigError, NonFiniteError
from nn_micro import (DenseNet, AdamState, adam_step, clip_grad_norm, polyak_update, save_checkpoint,
                      load_checkpoint, save_tensors, load_tensors)
from hitmdp_core import sample_categorical
from envs import RunningNormalizer
from replay_utils import ReplayBuffer, RolloutWorker, Transition, collect_parallel

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
ATANH_CLIP = 1.0 - 1e-6
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
METRIC_COLUMNS = ['step', 'ret_mean', 'ret_std', 'loss_qa', 'loss_qo', 'loss_pa', 'loss_po',
                  'alpha_a', 'alpha_o', 'ent_a', 'ent_o']
NETWORK_NAMES = ('qa1', 'qa2', 'qo1', 'qo2', 'qa1_target', 'qa2_target', 'qo1_target', 'qo2_target',
                 'pi_a', 'pi_o')


@dataclass
class VMOCConfig:
    n_options: int = 4
    embedding_dim: int = 40
    hidden_sizes: Sequence[int] = (256, 256)
    gamma: float = 0.99
    lr: float = 3e-4
    adam_eps: float = 1e-5
    batch_size: int = 64
    buffer_capacity: int = 1000000
    polyak: float = 0.005
    auto_temperature: bool = True
    alpha_a: float = 0.05
    alpha_o: float = 0.05
    target_entropy_a: Optional[float] = None
    target_entropy_o: Optional[float] = None
    regularizer_mode: str = 'zero'
    exploration_noise: float = 0.2
    grad_clip_norm: Optional[float] = None
    normalize_obs: bool = True
    total_steps: int = 50000
    start_steps: int = 1000
    update_after: int = 1000
    update_every: int = 50
    eval_interval: int = 5000
    eval_episodes: int = 10
    rollout_workers: int = 0

    @classmethod
    def from_dict(cls, section):
        ''' Build from a config section, ignoring keys that are not agent settings (e.g. env_id)'''

        names = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in section.items() if key in names})


@dataclass
class LossResult:
    loss: float
    grads: dict
    info: dict


def _softplus(x):
    return np.logaddexp(0.0, x)


def _log1m_tanh_sq(u):
    ''' log(1 - tanh(u)^2) without cancellation'''

    return 2.0 * (np.log(2.0) - u - _softplus(-2.0 * u))


def _check_finite(name, value):

    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f'{name} became non-finite')


def _act(pi_o, pi_a, embedding, normalizer, discrete, action_dim, noise_scale, obs, o_prev, mode, rng):
    """
    Shared action selection of the agent and its snapshots.

    Greedy mode takes the argmax option and tanh of the mean action. Explore
    mode samples both; for continuous actions the Gaussian exploration noise
    (noise_scale) is added after the tanh squash and the sum is clipped to
    [-1, 1], so explored actions do not follow the squashed-Gaussian density.
    """

    s = normalizer.normalize(obs) if normalizer is not None else np.asarray(obs, dtype=float)
    logits = pi_o.forward(np.concatenate([s, embedding[o_prev]]))
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError(f'Option policy produced non-finite logits {logits} for o_prev={o_prev}')
    if mode == 'greedy':
        o = int(np.argmax(logits))
    elif mode == 'explore':
        o = int(sample_categorical(softmax(logits), rng)[0])
    else:
        raise ConfigError(f'Unknown act mode: {mode}')

    out = pi_a.forward(np.concatenate([s, embedding[o]]))
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f'Action policy produced non-finite output {out} for option {o}')
    if discrete:
        if mode == 'greedy':
            return o, int(np.argmax(out))
        return o, int(sample_categorical(softmax(out), rng)[0])

    mean = out[:action_dim]
    if mode == 'greedy':
        return o, np.tanh(mean)
    std = np.exp(np.clip(out[action_dim:], LOG_STD_MIN, LOG_STD_MAX))
    a = np.tanh(mean + std * rng.standard_normal(action_dim))
    if noise_scale > 0:
        a = np.clip(a + noise_scale * rng.standard_normal(action_dim), -1.0, 1.0)
    return o, a


class AgentSnapshot:
    """Frozen copy of the acting networks, safe to share between rollout threads"""

    def __init__(self, agent):
        self.pi_o = agent.pi_o.clone()
        self.pi_a = agent.pi_a.clone()
        self.embedding = agent.embedding.copy()
        self.normalizer = agent.normalizer.copy() if agent.normalizer is not None else None
        self.discrete = agent.discrete
        self.action_dim = agent.action_dim
        self.noise_scale = agent.config.exploration_noise
        self.action_scale = agent.action_scale

    def act(self, obs, o_prev, mode, rng):
        return _act(self.pi_o, self.pi_a, self.embedding, self.normalizer, self.discrete, self.action_dim,
                    self.noise_scale, obs, o_prev, mode, rng)

    def env_action(self, a):
        return a if self.discrete else a * self.action_scale


class VMOCAgent:
    """
    Parameters and update rules of the VMOC agent.

    Parameters:
    - obs_dim (int): observation width.
    - action_dim (int): torque dimensions (continuous) or action count (discrete).
    - discrete (bool): categorical action policy when True.
    - config (VMOCConfig): hyperparameters.
    - rng (numpy Generator): initializes the networks and drives sampling.
    """

    def __init__(self, obs_dim, action_dim, discrete, config, rng, action_scale=1.0):

        if config.n_options < 1 or config.embedding_dim < 1:
            raise ConfigError('n_options and embedding_dim must be >= 1')
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.discrete = discrete
        self.config = config
        self.rng = rng
        self.action_scale = action_scale
        K, d = config.n_options, config.embedding_dim
        hidden = list(config.hidden_sizes)
        acts = ['relu'] * len(hidden) + ['identity']

        if discrete:
            qa_sizes = [obs_dim + d] + hidden + [action_dim]
            pa_sizes = [obs_dim + d] + hidden + [action_dim]
        else:
            qa_sizes = [obs_dim + d + action_dim] + hidden + [1]
            pa_sizes = [obs_dim + d] + hidden + [2 * action_dim]

        self.qa = [DenseNet(qa_sizes, acts, rng), DenseNet(qa_sizes, acts, rng)]
        self.qo = [DenseNet([obs_dim] + hidden + [K], acts, rng), DenseNet([obs_dim] + hidden + [K], acts, rng)]
        self.qa_target = [net.clone() for net in self.qa]
        self.qo_target = [net.clone() for net in self.qo]
        self.pi_a = DenseNet(pa_sizes, acts, rng)
        self.pi_o = DenseNet([obs_dim + d] + hidden + [K], acts, rng)
        self.embedding = rng.normal(size=(K, d))

        self.log_alpha_a = np.array([np.log(config.alpha_a)])
        self.log_alpha_o = np.array([np.log(config.alpha_o)])
        if config.target_entropy_a is not None:
            self.target_entropy_a = float(config.target_entropy_a)
        else:
            self.target_entropy_a = 0.98 * np.log(action_dim) if discrete else -float(action_dim)
        if config.target_entropy_o is not None:
            self.target_entropy_o = float(config.target_entropy_o)
        else:
            self.target_entropy_o = 0.5 * np.log(K)

        self.normalizer = RunningNormalizer(obs_dim) if config.normalize_obs else None

        self.optimizers = {name: AdamState.for_params(params, config.lr, config.adam_eps)
                           for name, params in self.param_groups().items()}

    @property
    def n_options(self):
        return self.config.n_options

    @property
    def alpha_a(self):
        return float(np.exp(self.log_alpha_a[0]))

    @property
    def alpha_o(self):
        return float(np.exp(self.log_alpha_o[0]))

    def param_groups(self):
        ''' Trainable parameter arrays per loss, in a fixed order'''

        return {'qa': self.qa[0].params + self.qa[1].params,
                'qo': self.qo[0].params + self.qo[1].params,
                'pa': self.pi_a.params,
                'po': self.pi_o.params + [self.embedding],
                'alpha_a': [self.log_alpha_a],
                'alpha_o': [self.log_alpha_o]}

    def snapshot(self):
        return AgentSnapshot(self)

    def act(self, obs, o_prev, mode='explore', rng=None):
        ''' Pick (o, a) for a raw observation; a is in [-1, 1] (continuous) or an action id'''

        return _act(self.pi_o, self.pi_a, self.embedding, self.normalizer, self.discrete, self.action_dim,
                    self.config.exploration_noise, obs, o_prev, mode, rng if rng is not None else self.rng)

    def env_action(self, a):
        return a if self.discrete else a * self.action_scale

    def normalize_batch(self, batch):
        ''' Copy of a replay batch with observations normalized by the current running moments'''

        if self.normalizer is None:
            return batch
        out = dict(batch)
        out['s'] = self.normalizer.normalize(batch['s'])
        out['s_next'] = self.normalizer.normalize(batch['s_next'])
        return out

    # Policy heads

    def option_distribution(self, s, o_prev):
        ''' pi^O(.|s, o_prev): probs, log-probs, network input and cache'''

        x = np.concatenate([s, self.embedding[o_prev]], axis=1)
        logits, cache = self.pi_o.forward_cache(x)
        return softmax(logits, axis=1), log_softmax(logits, axis=1), x, cache

    def _action_input(self, s, o):
        return np.concatenate([s, self.embedding[o]], axis=1)

    def _critic_input(self, s, o, a=None):
        if self.discrete:
            return np.concatenate([s, self.embedding[o]], axis=1)
        return np.concatenate([s, self.embedding[o], a], axis=1)

    def action_logprob(self, s, o, a):
        ''' log pi^A(a|s,o) of given actions (continuous actions are clipped inside (-1, 1))'''

        out = self.pi_a.forward(self._action_input(s, o))
        if self.discrete:
            return log_softmax(out, axis=1)[np.arange(len(a)), a]
        m = self.action_dim
        mean, log_std = out[:, :m], np.clip(out[:, m:], LOG_STD_MIN, LOG_STD_MAX)
        u = np.arctanh(np.clip(a, -ATANH_CLIP, ATANH_CLIP))
        eps = (u - mean) / np.exp(log_std)
        return np.sum(-0.5 * eps ** 2 - log_std - HALF_LOG_2PI - _log1m_tanh_sq(u), axis=1)

    def _action_values(self, nets, s, o, a=None):
        ''' Per-critic Q_A values: [n] for continuous, [n, A] for discrete'''

        x = self._critic_input(s, o, a)
        if self.discrete:
            return [net.forward(x) for net in nets]
        return [net.forward(x)[:, 0] for net in nets]

    # Losses

    def critic_loss_action(self, batch):
        ''' Twin action-critic regression onto r + gamma (1 - done) V_O(s', o)'''

        s, o, a, s_next = batch['s'], batch['o'], batch['a'], batch['s_next']
        n = len(batch['r'])

        probs_next, logp_next, _, _ = self.option_distribution(s_next, o)
        q_next = np.minimum(self.qo_target[0].forward(s_next), self.qo_target[1].forward(s_next))
        entropy_next = -np.sum(probs_next * logp_next, axis=1)
        v_next = np.sum(probs_next * q_next, axis=1) + self.alpha_o * entropy_next
        target = batch['r'] + self.config.gamma * (1.0 - batch['done']) * v_next

        x = self._critic_input(s, o, a)
        loss, grads = 0.0, []
        for net in self.qa:
            out, cache = net.forward_cache(x)
            upstream = np.zeros_like(out)
            if self.discrete:
                q = out[np.arange(n), a]
                upstream[np.arange(n), a] = 2.0 * (q - target) / n
            else:
                q = out[:, 0]
                upstream[:, 0] = 2.0 * (q - target) / n
            loss += float(np.mean((q - target) ** 2))
            grads += net.backward(x, upstream, cache)[0]
        return LossResult(loss, {'qa': grads}, {'target_mean': float(np.mean(target))})

    def regularizer_values(self, batch, logp_option=None):
        ''' f(o, s, o_prev): zero, or min(0, log pi^O(o|s,o_prev) - log m(o)) with m the batch option frequency'''

        n = len(batch['r'])
        if self.config.regularizer_mode != 'mutual_info':
            return np.zeros(n)
        if logp_option is None:
            _, logp_option, _, _ = self.option_distribution(batch['s'], batch['o_prev'])
        marginal = np.bincount(batch['o'], minlength=self.n_options) / n
        return np.minimum(0.0, logp_option[np.arange(n), batch['o']] - np.log(marginal[batch['o']]))

    def critic_loss_option(self, batch):
        ''' Twin option-critic regression onto f + min target Q_A(s,o,a) - alpha_a log pi^A(a|s,o)'''

        s, o, a = batch['s'], batch['o'], batch['a']
        n = len(batch['r'])
        q_hat = self._action_values(self.qa_target, s, o, a)
        if self.discrete:
            q_hat = np.minimum(q_hat[0][np.arange(n), a], q_hat[1][np.arange(n), a])
        else:
            q_hat = np.minimum(q_hat[0], q_hat[1])
        target = self.regularizer_values(batch) + q_hat - self.alpha_a * self.action_logprob(s, o, a)

        loss, grads = 0.0, []
        for net in self.qo:
            out, cache = net.forward_cache(s)
            q = out[np.arange(n), o]
            upstream = np.zeros_like(out)
            upstream[np.arange(n), o] = 2.0 * (q - target) / n
            loss += float(np.mean((q - target) ** 2))
            grads += net.backward(s, upstream, cache)[0]
        return LossResult(loss, {'qo': grads}, {'target_mean': float(np.mean(target))})

    def actor_loss_option(self, batch):
        ''' E[sum_o pi^O(o|s,o_prev) (alpha_o log pi^O - min Q_O(s,o))], gradients for pi_O and W'''

        s, o_prev = batch['s'], batch['o_prev']
        n = len(s)
        probs, logp, x, cache = self.option_distribution(s, o_prev)
        q_min = np.minimum(self.qo[0].forward(s), self.qo[1].forward(s))
        value = self.alpha_o * logp - q_min
        loss = float(np.mean(np.sum(probs * value, axis=1)))

        dlogits = probs * (value - np.sum(probs * value, axis=1, keepdims=True)) / n
        grads, dx = self.pi_o.backward(x, dlogits, cache)
        d_embedding = np.zeros_like(self.embedding)
        np.add.at(d_embedding, o_prev, dx[:, self.obs_dim:])
        entropy = float(np.mean(entr(probs).sum(axis=1)))
        return LossResult(loss, {'po': grads + [d_embedding]}, {'entropy': entropy})

    def draw_action_noise(self, n):
        return self.rng.standard_normal((n, self.action_dim))

    def actor_loss_action(self, batch, noise=None):
        """
        Reparameterized action policy loss E[alpha_a log pi^A(a~|s,o) - min_i Q_A_i(s,o,a~)].

        Continuous actions use a~ = tanh(mean + std * noise); noise is drawn
        from the agent rng unless given. Discrete actions use the exact
        expectation over actions.
        """

        s, o = batch['s'], batch['o']
        n = len(s)
        x = self._action_input(s, o)
        out, cache = self.pi_a.forward_cache(x)

        if self.discrete:
            probs, logp = softmax(out, axis=1), log_softmax(out, axis=1)
            q_values = self._action_values(self.qa, s, o)
            value = self.alpha_a * logp - np.minimum(q_values[0], q_values[1])
            loss = float(np.mean(np.sum(probs * value, axis=1)))
            upstream = probs * (value - np.sum(probs * value, axis=1, keepdims=True)) / n
            grads, _ = self.pi_a.backward(x, upstream, cache)
            return LossResult(loss, {'pa': grads}, {'entropy': float(np.mean(entr(probs).sum(axis=1))),
                                                    'logp_mean': float(np.mean(np.sum(probs * logp, axis=1)))})

        m = self.action_dim
        if noise is None:
            noise = self.draw_action_noise(n)
        mean, raw_log_std = out[:, :m], out[:, m:]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        u = mean + std * noise
        a = np.tanh(u)
        logp = np.sum(-0.5 * noise ** 2 - log_std - HALF_LOG_2PI - _log1m_tanh_sq(u), axis=1)

        critic_x = self._critic_input(s, o, a)
        q_out = [net.forward_cache(critic_x) for net in self.qa]
        q1, q2 = q_out[0][0][:, 0], q_out[1][0][:, 0]
        first = q1 <= q2
        q_min = np.where(first, q1, q2)
        loss = float(np.mean(self.alpha_a * logp - q_min))

        grad_a = np.zeros_like(a)
        for net, (_, critic_cache), mask in zip(self.qa, q_out, (first, ~first)):
            _, dx = net.backward(critic_x, mask[:, None].astype(float), critic_cache)
            grad_a += dx[:, -m:]

        d_u = self.alpha_a * 2.0 * a - grad_a * (1.0 - a ** 2)
        d_mean = d_u
        d_log_std = -self.alpha_a + d_u * std * noise
        d_raw = d_log_std * ((raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX))
        grads, _ = self.pi_a.backward(x, np.concatenate([d_mean, d_raw], axis=1) / n, cache)
        return LossResult(loss, {'pa': grads}, {'entropy': float(-np.mean(logp)),
                                                'logp_mean': float(np.mean(logp))})

    def temperature_loss(self, batch, noise=None):
        """
        J(alpha_a) = -E[alpha_a (log pi^A(a~|s,o) + H_A)], J(alpha_o) = -E[alpha_o (log pi^O + H_O)].

        Both are differentiated with respect to the log temperatures; the
        option term uses the exact expectation over options.
        """

        s, o, o_prev = batch['s'], batch['o'], batch['o_prev']
        if self.discrete:
            out = self.pi_a.forward(self._action_input(s, o))
            logp_a = -entr(softmax(out, axis=1)).sum(axis=1)
        else:
            m = self.action_dim
            if noise is None:
                noise = self.draw_action_noise(len(s))
            out = self.pi_a.forward(self._action_input(s, o))
            log_std = np.clip(out[:, m:], LOG_STD_MIN, LOG_STD_MAX)
            u = out[:, :m] + np.exp(log_std) * noise
            logp_a = np.sum(-0.5 * noise ** 2 - log_std - HALF_LOG_2PI - _log1m_tanh_sq(u), axis=1)
        probs, _, _, _ = self.option_distribution(s, o_prev)
        logp_o = -entr(probs).sum(axis=1)

        loss_a = float(-np.mean(self.alpha_a * (logp_a + self.target_entropy_a)))
        loss_o = float(-np.mean(self.alpha_o * (logp_o + self.target_entropy_o)))
        # d alpha / d log alpha = alpha, so each gradient equals its loss
        return LossResult(loss_a + loss_o, {'alpha_a': [np.array([loss_a])], 'alpha_o': [np.array([loss_o])]},
                          {'loss_alpha_a': loss_a, 'loss_alpha_o': loss_o,
                           'ent_a': float(-np.mean(logp_a)), 'ent_o': float(-np.mean(logp_o))})

    # Updates

    def _apply(self, result):

        _check_finite('loss', result.loss)
        groups = self.param_groups()
        for name, grads in result.grads.items():
            if self.config.grad_clip_norm is not None and not name.startswith('alpha'):
                clip_grad_norm(grads, self.config.grad_clip_norm)
            adam_step(self.optimizers[name], groups[name], grads)

    def update_targets(self, sigma=None):

        sigma = self.config.polyak if sigma is None else sigma
        for target, online in zip(self.qa_target + self.qo_target, self.qa + self.qo):
            polyak_update(target, online, sigma)

    def train_step(self, buffer, batch_size=None):
        ''' One update pass: action critics, option critics, option policy, action policy, targets, temperatures'''

        batch = self.normalize_batch(buffer.sample(batch_size or self.config.batch_size))

        qa = self.critic_loss_action(batch)
        self._apply(qa)
        qo = self.critic_loss_option(batch)
        self._apply(qo)
        po = self.actor_loss_option(batch)
        self._apply(po)
        pa = self.actor_loss_action(batch)
        self._apply(pa)
        self.update_targets()
        temps = self.temperature_loss(batch)
        if self.config.auto_temperature:
            self._apply(temps)

        return {'loss_qa': qa.loss, 'loss_qo': qo.loss, 'loss_pa': pa.loss, 'loss_po': po.loss,
                'loss_alpha_a': temps.info['loss_alpha_a'], 'loss_alpha_o': temps.info['loss_alpha_o'],
                'alpha_a': self.alpha_a, 'alpha_o': self.alpha_o,
                'ent_a': temps.info['ent_a'], 'ent_o': temps.info['ent_o']}


def option_usage_entropy(counts):
    ''' Entropy (nats) of the normalized option-usage counts'''

    counts = np.asarray(counts, dtype=float)
    if counts.sum() <= 0:
        return 0.0
    return float(entr(counts / counts.sum()).sum())


def evaluate(agent, env, n_episodes, rng=None):
    ''' Greedy evaluation; returns return statistics, success rate and option usage'''

    returns, successes = [], 0
    counts = np.zeros(agent.n_options)
    for _ in range(n_episodes):
        obs, o_prev, total = env.reset(), 0, 0.0
        while True:
            o, a = agent.act(obs, o_prev, 'greedy', rng)
            counts[o] += 1
            obs, r, done, info = env.step(agent.env_action(a))
            total += r
            o_prev = o
            if done or info.get('truncated', False):
                break
        successes += int(done)
        returns.append(total)
    returns = np.array(returns)
    return {'ret_mean': float(returns.mean()), 'ret_std': float(returns.std()),
            'ret_median': float(np.median(returns)), 'success_rate': successes / n_episodes,
            'option_counts': counts, 'option_entropy': option_usage_entropy(counts)}


def build_agent(env, config, rng):

    spec = env.spec
    return VMOCAgent(spec.obs_dim, spec.action_dim, spec.discrete, config, rng, spec.action_scale)


def _random_action(agent, rng):

    if agent.discrete:
        return int(rng.integers(agent.action_dim))
    return rng.uniform(-1.0, 1.0, size=agent.action_dim)


def train_vmoc(env_factory, config, streams, max_num_threads=1, progress=True):
    """
    Outer VMOC loop: collect transitions, run gradient passes, evaluate.

    Parameters:
    - env_factory (callable): rng -> environment.
    - config (VMOCConfig): agent and loop settings.
    - streams (dict): seeded generators 'env', 'agent', 'buffer', 'init', 'eval'.
    - max_num_threads (int): cap on concurrent rollout threads.

    Returns:
    - (agent, rows, evaluations): rows follow METRIC_COLUMNS, one per
      evaluation interval; evaluations hold the full evaluate() output.
    """

    env = env_factory(streams['env'])
    eval_env = env_factory(streams['eval'])
    agent = build_agent(env, config, streams['init'])
    agent.rng = streams['agent']
    buffer = ReplayBuffer(config.buffer_capacity, streams['buffer'])
    logger.info(f'Training VMOC with {config.n_options} options for {config.total_steps} steps')

    workers = []
    if config.rollout_workers > 0:
        children = streams['env'].spawn(config.rollout_workers)
        workers = [RolloutWorker(i, env_factory(child), child) for i, child in enumerate(children)]

    last = {key: float('nan') for key in METRIC_COLUMNS[3:]}
    rows, evaluations = [], []
    obs, o_prev = env.reset(), 0
    step = 0
    next_eval = config.eval_interval
    bar = tqdm(total=config.total_steps, disable=not progress or logger.getEffectiveLevel() > logging.INFO)

    while step < config.total_steps:
        chunk = min(config.update_every, config.total_steps - step)
        if workers and step >= config.start_steps:
            transitions, _ = collect_parallel(workers, agent.snapshot(), chunk, max_num_threads)
        else:
            transitions = []
            for _ in range(chunk):
                if step + len(transitions) < config.start_steps:
                    o, a = int(agent.rng.integers(agent.n_options)), _random_action(agent, agent.rng)
                else:
                    o, a = agent.act(obs, o_prev, 'explore')
                next_obs, r, done, info = env.step(agent.env_action(a))
                transitions.append(Transition(obs, o_prev, a, r, next_obs, o, done))
                obs, o_prev = next_obs, o
                if done or info.get('truncated', False):
                    obs, o_prev = env.reset(), 0

        for transition in transitions:
            if agent.normalizer is not None:
                agent.normalizer.update(transition.s)
            buffer.add(transition)
        step += len(transitions)
        bar.update(len(transitions))

        if step >= config.update_after and len(buffer) >= config.batch_size:
            for _ in range(len(transitions)):
                last = agent.train_step(buffer)

        if step >= next_eval:
            next_eval += config.eval_interval
            result = evaluate(agent, eval_env, config.eval_episodes)
            evaluations.append(dict(result, step=step))
            rows.append({'step': step, 'ret_mean': result['ret_mean'], 'ret_std': result['ret_std'],
                         **{key: last[key] for key in METRIC_COLUMNS[3:]}})
            logger.info(f"Step {step}: return {result['ret_mean']:.3f} +/- {result['ret_std']:.3f}, "
                        f"success {result['success_rate']:.2f}, alpha ({agent.alpha_a:.4f}, {agent.alpha_o:.4f})")
    bar.close()
    return agent, rows, evaluations


def save_agent(agent, output_dir):
    ''' One nn-micro checkpoint per network plus the option embedding and agent state'''

    os.makedirs(output_dir, exist_ok=True)
    nets = dict(zip(NETWORK_NAMES, agent.qa + agent.qo + agent.qa_target + agent.qo_target
                    + [agent.pi_a, agent.pi_o]))
    for name, net in nets.items():
        save_checkpoint(net, os.path.join(output_dir, name))
    save_tensors(os.path.join(output_dir, 'option_embedding'), {'W': agent.embedding},
                 {'n_options': agent.n_options, 'embedding_dim': agent.config.embedding_dim})
    state = {'log_alpha_a': agent.log_alpha_a, 'log_alpha_o': agent.log_alpha_o}
    if agent.normalizer is not None:
        state.update({f'normalizer_{key}': value for key, value in agent.normalizer.state_dict().items()})
    save_tensors(os.path.join(output_dir, 'agent_state'), state, {'config': asdict(agent.config)})
    logger.info(f'Saved agent checkpoints to {output_dir}')


def load_agent(output_dir, obs_dim, action_dim, discrete, rng, action_scale=1.0):

    state, manifest = load_tensors(os.path.join(output_dir, 'agent_state'))
    config = VMOCConfig.from_dict(manifest['config'])
    agent = VMOCAgent(obs_dim, action_dim, discrete, config, rng, action_scale)
    nets = [load_checkpoint(os.path.join(output_dir, name)) for name in NETWORK_NAMES]
    agent.qa, agent.qo = nets[0:2], nets[2:4]
    agent.qa_target, agent.qo_target = nets[4:6], nets[6:8]
    agent.pi_a, agent.pi_o = nets[8], nets[9]
    agent.embedding = load_tensors(os.path.join(output_dir, 'option_embedding'))[0]['W'].copy()
    agent.log_alpha_a = state['log_alpha_a'].copy()
    agent.log_alpha_o = state['log_alpha_o'].copy()
    if agent.normalizer is not None:
        agent.normalizer.load_state_dict({key[len('normalizer_'):]: value for key, value in state.items()
                                          if key.startswith('normalizer_')})
    agent.optimizers = {name: AdamState.for_params(params, config.lr, config.adam_eps)
                        for name, params in agent.param_groups().items()}
    return agent
