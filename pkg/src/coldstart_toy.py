"""

Cold-start toy

Supervised variational pre-training of discrete latent option sequences on
(prompt, chain-of-thought, answer) triples. A latent sequence o of length L
over K options is inferred by an autoregressive posterior q(o|W, Y^r, Y^a),
regularized toward an autoregressive prior p(o|W), and decoded into the
chain of thought and the answer.

Every conditional is a linear-softmax head. Sequences are summarized by the
mean of position-tagged token embeddings; the option slots of a head are
the concatenated option embeddings opt_emb[o_1..o_L] (zero for slots not
yet sampled); decoder heads are position-specific and also see the
embedding of the previous token.

Two objectives are provided: the exact ELBO, enumerating all K^L latent
sequences with analytic gradients, and a Gumbel-max estimator with
straight-through gradients.

"""

import os
import logging
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax
from tqdm import tqdm

from lab_settings import read_lab_settings
from lab_errors import ConfigError, DimensionError, EnumerationGuardError, NonFiniteError
from nn_micro import AdamState, adam_step, save_tensors, load_tensors
from hitmdp_core import sample_categorical

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

PAD, BOS, EOS = 0, 1, 2
VOCAB = (['<pad>', '<bos>', '<eos>'] + [str(i) for i in range(10)] + ['+', '=', ';', '>']
         + [chr(ord('a') + i) for i in range(16)])
TOKEN_IDS = {token: i for i, token in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)
LETTERS = VOCAB[-16:]
MAX_POSITIONS = 16
LATENT_GUARD = 10**6
TASKS = ('copy', 'add2', 'add3')
COPY_LENGTH = 3
ADD2_RANGE = 100
METRIC_COLUMNS = ['epoch', 'elbo', 'recon_cot', 'recon_ans', 'kl', 'exact_match']
PARAM_NAMES = ('pool_emb', 'tok_emb', 'opt_emb', 'prior_w', 'prior_b', 'post_w', 'post_b',
               'cot_w', 'cot_b', 'ans_w', 'ans_b')
SAMPLE_CHUNK = 4096


def encode(text):
    ''' Token ids of a compact or space-separated string of single-character symbols'''

    try:
        return [TOKEN_IDS[ch] for ch in text if not ch.isspace()]
    except KeyError as e:
        raise ConfigError(f'Symbol {e} is not in the vocabulary')


def decode(ids):
    return ' '.join(VOCAB[i] for i in ids)


@dataclass(frozen=True)
class ReasoningSample:
    prompt: tuple
    cot: tuple
    answer: tuple

    def __post_init__(self):
        object.__setattr__(self, 'prompt', tuple(int(i) for i in self.prompt))
        object.__setattr__(self, 'cot', tuple(int(i) for i in self.cot))
        object.__setattr__(self, 'answer', tuple(int(i) for i in self.answer))
        if not self.prompt or not self.answer:
            raise DimensionError('A reasoning sample needs a non-empty prompt and answer')
        for name, ids in (('prompt', self.prompt), ('cot', self.cot), ('answer', self.answer)):
            if any(i < 0 or i >= VOCAB_SIZE for i in ids):
                raise DimensionError(f'{name} holds ids outside the vocabulary: {ids}')
        if len(self.prompt) > MAX_POSITIONS or max(len(self.cot), len(self.answer)) + 1 > MAX_POSITIONS:
            raise DimensionError(f'Sample longer than {MAX_POSITIONS} positions: {decode(self.prompt)}')

    @classmethod
    def from_text(cls, prompt, cot, answer):
        return cls(encode(prompt), encode(cot), encode(answer))

    def to_text(self):
        return decode(self.prompt), decode(self.cot), decode(self.answer)


# Corpus

def _digits(n):
    return [str(d) for d in str(n)]


def _task_sample(task, index):

    if task == 'copy':
        payload = [LETTERS[(index // 16 ** k) % 16] for k in range(COPY_LENGTH)]
        return ReasoningSample.from_text(''.join(payload) + '>', ''.join(payload), ''.join(payload))
    if task == 'add2':
        a, b = divmod(index, ADD2_RANGE)
        cot = _digits(a) + ['+'] + _digits(b) + ['='] + _digits(a + b)
        return ReasoningSample.from_text(f'{a}+{b}=', ''.join(cot), str(a + b))
    a, rest = divmod(index, 100)
    b, c = divmod(rest, 10)
    x = a + b
    cot = [str(a), '+', str(b), '='] + _digits(x) + [';'] + _digits(x) + ['+', str(c), '='] + _digits(x + c)
    return ReasoningSample.from_text(f'{a}+{b}+{c}=', ''.join(cot), str(x + c))


def task_size(task):
    return {'copy': 16 ** COPY_LENGTH, 'add2': ADD2_RANGE ** 2, 'add3': 1000}[task]


def make_synthetic_corpus(task, n, seed):
    """
    Seeded synthetic corpus.

    Tasks:
    - copy: prompt "abc>", chain of thought and answer "abc".
    - add2: operands 0..99, prompt "34+57=", chain of thought "34+57=91", answer "91".
    - add3: prompt "3+5+2=", chain of thought "3+5=8;8+2=10", answer "10".

    Samples are distinct while n does not exceed the number of distinct
    problems of the task; larger corpora repeat problems in a fresh order.
    """

    task = str(task).lower()
    if task not in TASKS:
        raise ConfigError(f'Unknown cold-start task: {task}')
    if n < 1:
        raise ConfigError(f'Corpus size must be >= 1, got {n}')
    rng = np.random.default_rng(seed)
    total = task_size(task)
    if n <= total:
        indices = rng.choice(total, size=n, replace=False)
    else:
        indices = np.concatenate([rng.permutation(total) for _ in range(-(-n // total))])[:n]
    return [_task_sample(task, int(i)) for i in indices]


def split_corpus(samples, heldout_fraction, rng):
    ''' Shuffle and split into (train, heldout)'''

    if not 0.0 <= heldout_fraction < 1.0:
        raise ConfigError(f'heldout_fraction must lie in [0, 1), got {heldout_fraction}')
    order = rng.permutation(len(samples))
    n_heldout = int(round(heldout_fraction * len(samples)))
    heldout = [samples[i] for i in order[:n_heldout]]
    train = [samples[i] for i in order[n_heldout:]]
    return train, heldout


def write_corpus(samples, path):

    with open(path, 'w') as file:
        for sample in samples:
            file.write('\t'.join(sample.to_text()) + '\n')


def read_corpus(path):
    ''' One sample per line: prompt, cot and answer separated by tabs, tokens by spaces'''

    samples = []
    with open(path, 'r') as file:
        for line_number, line in enumerate(file, start=1):
            if not line.strip():
                continue
            fields = line.rstrip('\n').split('\t')
            if len(fields) != 3:
                raise ConfigError(f'{path} line {line_number}: expected 3 tab-separated fields, got {len(fields)}')
            try:
                ids = [[TOKEN_IDS[token] for token in field.split()] for field in fields]
                samples.append(ReasoningSample(*ids))
            except KeyError as e:
                raise ConfigError(f'{path} line {line_number}: unknown token {e}')
            except DimensionError as e:
                raise ConfigError(f'{path} line {line_number}: {e}')
    logger.info(f'Read {len(samples)} samples from {path}')
    return samples


# Model

class LatentReasoningModel:
    """
    Prior, posterior and the two decoders of the cold-start model.

    Parameters (dict self.params):
    - pool_emb [P, V, d]: position-tagged token embeddings for sequence summaries.
    - tok_emb [V, d]: previous-token embeddings of the decoders.
    - opt_emb [K, d]: option embedding matrix.
    - prior_w [L, K, d + L d], prior_b [L, K]: prior heads over [W | option slots].
    - post_w [L, K, 3 d + L d], post_b [L, K]: posterior heads over [W | Y^r | Y^a | option slots].
    - cot_w, ans_w [P, V, 2 d + L d], cot_b, ans_b [P, V]: decoder heads over
      [W | option slots | previous token].
    """

    def __init__(self, n_latent=6, latent_length=3, embedding_dim=32, rng=None, kl_weight=0.1,
                 gumbel_temperature=0.5, params=None):

        if n_latent < 1 or latent_length < 1 or embedding_dim < 1:
            raise ConfigError('n_latent, latent_length and embedding_dim must be >= 1')
        if kl_weight < 0:
            raise ConfigError(f'kl_weight must be >= 0, got {kl_weight}')
        if gumbel_temperature <= 0:
            raise ConfigError(f'gumbel_temperature must be > 0, got {gumbel_temperature}')
        self.n_latent = int(n_latent)
        self.latent_length = int(latent_length)
        self.embedding_dim = int(embedding_dim)
        self.kl_weight = float(kl_weight)
        self.gumbel_temperature = float(gumbel_temperature)
        self.optimizer_state = None

        shapes = self.param_shapes()
        if params is not None:
            self.params = {name: np.array(params[name], dtype=float) for name in PARAM_NAMES}
            for name, shape in shapes.items():
                if self.params[name].shape != shape:
                    raise DimensionError(f'{name} has shape {self.params[name].shape}, expected {shape}')
            return
        if rng is None:
            raise ValueError('LatentReasoningModel needs an rng or explicit params')
        self.params = {}
        for name, shape in shapes.items():
            if name.endswith('_emb'):
                self.params[name] = rng.normal(size=shape) * (1.0 if name == 'opt_emb' else 0.5)
            elif name.endswith('_w'):
                bound = 1.0 / np.sqrt(shape[-1])
                self.params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                self.params[name] = np.zeros(shape)

    def param_shapes(self):

        K, L, d, V, P = self.n_latent, self.latent_length, self.embedding_dim, VOCAB_SIZE, MAX_POSITIONS
        return {'pool_emb': (P, V, d), 'tok_emb': (V, d), 'opt_emb': (K, d),
                'prior_w': (L, K, d + L * d), 'prior_b': (L, K),
                'post_w': (L, K, 3 * d + L * d), 'post_b': (L, K),
                'cot_w': (P, V, 2 * d + L * d), 'cot_b': (P, V),
                'ans_w': (P, V, 2 * d + L * d), 'ans_b': (P, V)}

    @property
    def n_sequences(self):
        return self.n_latent ** self.latent_length

    def latent_sequences(self, guard=LATENT_GUARD):
        ''' All K^L latent sequences in lexicographic order, shape [K^L, L]'''

        if self.n_sequences > guard:
            raise EnumerationGuardError(f'{self.n_sequences} latent sequences exceed the guard {guard}')
        return np.array(list(itertools.product(range(self.n_latent), repeat=self.latent_length)),
                        dtype=int).reshape(-1, self.latent_length)

    def copy(self):
        return LatentReasoningModel(self.n_latent, self.latent_length, self.embedding_dim, None, self.kl_weight,
                                    self.gumbel_temperature, params={k: v.copy() for k, v in self.params.items()})

    def config_dict(self):
        return {'n_latent': self.n_latent, 'latent_length': self.latent_length,
                'embedding_dim': self.embedding_dim, 'kl_weight': self.kl_weight,
                'gumbel_temperature': self.gumbel_temperature}


# Linear-softmax heads with option slots

def _split_head(w, n_ctx, L, d):
    ''' Split head weights [T, V, F] into context, option-slot [T, V, L, d] and extra parts'''

    T, V = w.shape[:2]
    return w[:, :, :n_ctx], w[:, :, n_ctx:n_ctx + L * d].reshape(T, V, L, d), w[:, :, n_ctx + L * d:]


def _head_tables(w, b, ctx, extra, opt_emb, mask):
    """
    Per-position constant logits and option-slot logit tables of a head.

    Returns const [T, V] and G [T, L, K, V], so that the logits of a latent
    sequence o at position t are const[t] + sum_l G[t, l, o_l].
    """

    T, L = mask.shape
    d = opt_emb.shape[1]
    w_ctx, w_slot, w_extra = _split_head(w[:T], ctx.size, L, d)
    const = w_ctx @ ctx + b[:T]
    if extra is not None:
        const = const + np.einsum('tve,te->tv', w_extra, extra)
    G = np.einsum('tvlf,kf->tlkv', w_slot, opt_emb) * mask[:, :, None, None]
    return const, G


def _head_logits(const, G, seqs):

    T, L = G.shape[:2]
    picked = G[np.arange(T)[None, :, None], np.arange(L)[None, None, :], seqs[:, None, :]]
    return const[None] + picked.sum(axis=2)


def _head_backward(w, ctx, extra, opt_emb, mask, seqs, dlogits, slot_grads=False):
    ''' Gradients of sum(dlogits * logits) for a head; returns (dw, db, dctx, dextra, dopt_emb, dslots)'''

    T, L = mask.shape
    K, d = opt_emb.shape
    n_ctx = ctx.size
    w_ctx, w_slot, w_extra = _split_head(w[:T], n_ctx, L, d)

    dconst = dlogits.sum(axis=0)
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[:2])
    db[:T] = dconst
    dw[:T, :, :n_ctx] = dconst[:, :, None] * ctx[None, None, :]
    dctx = np.einsum('tvc,tv->c', w_ctx, dconst)
    dextra = None
    if extra is not None:
        dw[:T, :, n_ctx + L * d:] = dconst[:, :, None] * extra[:, None, :]
        dextra = np.einsum('tve,tv->te', w_extra, dconst)

    onehot = np.eye(K)[seqs]
    dG = np.einsum('nlk,ntv->tlkv', onehot, dlogits) * mask[:, :, None, None]
    dw[:T, :, n_ctx:n_ctx + L * d] = np.einsum('tlkv,kf->tvlf', dG, opt_emb).reshape(T, -1, L * d)
    dopt = np.einsum('tlkv,tvlf->kf', dG, w_slot)
    dslots = np.einsum('ntv,tvlf,tl->nlf', dlogits, w_slot, mask) if slot_grads else None
    return dw, db, dctx, dextra, dopt, dslots


def _pool(pool_emb, ids):
    return pool_emb[np.arange(len(ids)), list(ids)].mean(axis=0)


def _pool_backward(dpool_emb, ids, dvec):
    np.add.at(dpool_emb, (np.arange(len(ids)), list(ids)), dvec / len(ids))


def _latent_mask(L):
    return np.tril(np.ones((L, L)), -1)


def _contexts(model, sample):
    ''' Prior context [W] and posterior context [W | Y^r | Y^a] (an empty Y^r pools to zero)'''

    pool_emb = model.params['pool_emb']
    ctx_prior = _pool(pool_emb, sample.prompt)
    ctx_cot = _pool(pool_emb, sample.cot) if sample.cot else np.zeros(model.embedding_dim)
    return ctx_prior, np.concatenate([ctx_prior, ctx_cot, _pool(pool_emb, sample.answer)])


def _decoder_io(tokens):
    ''' (targets, previous tokens) of a decoded sequence terminated by EOS'''

    targets = list(tokens) + [EOS]
    return np.array(targets), np.array([BOS] + list(tokens))


def _forward(model, sample, seqs):
    ''' Log-probabilities of every piece of the model for a batch of latent sequences [N, L]'''

    p = model.params
    L = model.latent_length
    ctx_prior, ctx_post = _contexts(model, sample)
    mask = _latent_mask(L)
    n = len(seqs)
    cache = {'seqs': seqs, 'ctx_prior': ctx_prior, 'ctx_post': ctx_post}

    for name, w, b, ctx in (('prior', p['prior_w'], p['prior_b'], ctx_prior),
                            ('post', p['post_w'], p['post_b'], ctx_post)):
        const, G = _head_tables(w, b, ctx, None, p['opt_emb'], mask)
        logp = log_softmax(_head_logits(const, G, seqs), axis=2)
        cache[f'{name}_tables'] = (const, G)
        cache[f'{name}_logp'] = logp
        cache[f'{name}_seq'] = logp[np.arange(n)[:, None], np.arange(L)[None, :], seqs].sum(axis=1)

    for name, tokens in (('cot', sample.cot), ('ans', sample.answer)):
        targets, prev = _decoder_io(tokens)
        T = len(targets)
        extra = p['tok_emb'][prev]
        const, G = _head_tables(p[f'{name}_w'], p[f'{name}_b'], ctx_prior, extra, p['opt_emb'], np.ones((T, L)))
        logp = log_softmax(_head_logits(const, G, seqs), axis=2)
        cache[f'{name}_io'] = (targets, prev, extra)
        cache[f'{name}_logp'] = logp
        cache[f'{name}_seq'] = logp[:, np.arange(T), targets].sum(axis=1)

    step_kl = np.sum(np.exp(cache['post_logp']) * (cache['post_logp'] - cache['prior_logp']), axis=2)
    cache['step_kl'] = step_kl
    cache['path_kl'] = step_kl.sum(axis=1)
    return cache


def _backward(model, sample, cache, d_cot, d_ans, d_prior, d_post, slot_grads=False):
    ''' Parameter gradients from logit-space gradients of the four heads'''

    p = model.params
    L = model.latent_length
    d = model.embedding_dim
    seqs = cache['seqs']
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    d_ctx_prior = np.zeros(d)
    dslots = np.zeros((len(seqs), L, d)) if slot_grads else None

    for name, dlogits in (('cot', d_cot), ('ans', d_ans)):
        targets, prev, extra = cache[f'{name}_io']
        dw, db, dctx, dextra, dopt, ds = _head_backward(p[f'{name}_w'], cache['ctx_prior'], extra, p['opt_emb'],
                                                        np.ones((len(targets), L)), seqs, dlogits, slot_grads)
        grads[f'{name}_w'] += dw
        grads[f'{name}_b'] += db
        grads['opt_emb'] += dopt
        np.add.at(grads['tok_emb'], prev, dextra)
        d_ctx_prior += dctx
        if slot_grads:
            dslots += ds

    mask = _latent_mask(L)
    dw, db, dctx, _, dopt, _ = _head_backward(p['prior_w'], cache['ctx_prior'], None, p['opt_emb'], mask, seqs,
                                              d_prior)
    grads['prior_w'] += dw
    grads['prior_b'] += db
    grads['opt_emb'] += dopt
    d_ctx_prior += dctx

    dw, db, dctx, _, dopt, _ = _head_backward(p['post_w'], cache['ctx_post'], None, p['opt_emb'], mask, seqs,
                                              d_post)
    grads['post_w'] += dw
    grads['post_b'] += db
    grads['opt_emb'] += dopt
    d_ctx_prior += dctx[:d]
    if sample.cot:
        _pool_backward(grads['pool_emb'], sample.cot, dctx[d:2 * d])
    _pool_backward(grads['pool_emb'], sample.answer, dctx[2 * d:])
    _pool_backward(grads['pool_emb'], sample.prompt, d_ctx_prior)
    return grads, dslots


def _logit_residual(logp, index):
    ''' onehot(index) - softmax along the last axis'''

    return np.eye(logp.shape[-1])[index] - np.exp(logp)


def _decoder_residual(cache, name):

    targets = cache[f'{name}_io'][0]
    return _logit_residual(cache[f'{name}_logp'], np.broadcast_to(targets, (len(cache['seqs']), len(targets))))


# Objectives

def elbo_sft_exact(model, sample):
    """
    Exact ELBO over every latent sequence.

    ELBO = sum_o q(o)[log p(Y^r|o,W) + log p(Y^a|o,W)] - beta KL(q || p)

    Returns:
    - (elbo, parts) with parts {'recon_cot', 'recon_ans', 'kl'}.

    Raises:
    - EnumerationGuardError when K^L exceeds the guard.
    """

    cache = _forward(model, sample, model.latent_sequences())
    q = np.exp(cache['post_seq'])
    recon_cot = float(q @ cache['cot_seq'])
    recon_ans = float(q @ cache['ans_seq'])
    kl = float(q @ (cache['post_seq'] - cache['prior_seq']))
    return recon_cot + recon_ans - model.kl_weight * kl, {'recon_cot': recon_cot, 'recon_ans': recon_ans, 'kl': kl}


def elbo_gradients(model, sample):
    ''' (-ELBO, gradients of -ELBO per parameter) of the exact objective'''

    seqs = model.latent_sequences()
    cache = _forward(model, sample, seqs)
    beta = model.kl_weight
    q = np.exp(cache['post_seq'])
    recon = cache['cot_seq'] + cache['ans_seq']
    log_ratio = cache['post_seq'] - cache['prior_seq']
    elbo = float(q @ recon - beta * q @ log_ratio)

    d_cot = q[:, None, None] * _decoder_residual(cache, 'cot')
    d_ans = q[:, None, None] * _decoder_residual(cache, 'ans')
    d_prior = beta * q[:, None, None] * _logit_residual(cache['prior_logp'], seqs)
    advantage = recon - beta * log_ratio
    d_post = (q * advantage)[:, None, None] * _logit_residual(cache['post_logp'], seqs)

    grads, _ = _backward(model, sample, cache, -d_cot, -d_ans, -d_prior, -d_post)
    return -elbo, grads


def log_marginal_exact(model, sample):
    ''' log p(Y^r, Y^a | W) summed over every latent sequence'''

    cache = _forward(model, sample, model.latent_sequences())
    return float(logsumexp(cache['prior_seq'] + cache['cot_seq'] + cache['ans_seq']))


def true_posterior(model, sample):
    ''' p(o | W, Y^r, Y^a) over latent_sequences() order'''

    cache = _forward(model, sample, model.latent_sequences())
    return softmax(cache['prior_seq'] + cache['cot_seq'] + cache['ans_seq'])


def _sample_posterior(model, cache_tables, n, rng, temperature):
    ''' Gumbel-max samples of q(o|.) with their relaxed one-hots'''

    const, G = cache_tables
    L, K = model.latent_length, model.n_latent
    seqs = np.zeros((n, L), dtype=int)
    relaxed = np.zeros((n, L, K))
    for i in range(L):
        logits = const[i][None, :] + sum(G[i, l, seqs[:, l]] for l in range(i))
        perturbed = log_softmax(logits, axis=1) + rng.gumbel(size=(n, K))
        seqs[:, i] = np.argmax(perturbed, axis=1)
        relaxed[:, i] = softmax(perturbed / temperature, axis=1)
    return seqs, relaxed


def _posterior_tables(model, sample):

    p = model.params
    _, ctx_post = _contexts(model, sample)
    return _head_tables(p['post_w'], p['post_b'], ctx_post, None, p['opt_emb'], _latent_mask(model.latent_length))


def elbo_sft_gumbel_estimate(model, sample, n_samples, seed, stratified=False, temperature=None):
    """
    Monte-Carlo ELBO from hard Gumbel-max posterior samples.

    Each sample contributes log p(Y^r|o,W) + log p(Y^a|o,W) - beta sum_i
    KL(q(.|o_<i) || p(.|o_<i)), the per-factor KL being analytic along the
    sampled prefix. With stratified=True every latent sequence is visited
    once with weight q(o) (n_samples must equal K^L) and the result is exact.

    Returns:
    - (estimate, std_error)
    """

    if n_samples < 1:
        raise ConfigError(f'n_samples must be >= 1, got {n_samples}')
    beta = model.kl_weight
    if stratified:
        if n_samples != model.n_sequences:
            raise ConfigError(f'Stratified estimation needs n_samples = K^L = {model.n_sequences}')
        cache = _forward(model, sample, model.latent_sequences())
        values = cache['cot_seq'] + cache['ans_seq'] - beta * cache['path_kl']
        return float(np.exp(cache['post_seq']) @ values), 0.0

    rng = np.random.default_rng(seed)
    tables = _posterior_tables(model, sample)
    temperature = model.gumbel_temperature if temperature is None else temperature
    values = []
    for start in range(0, n_samples, SAMPLE_CHUNK):
        seqs, _ = _sample_posterior(model, tables, min(SAMPLE_CHUNK, n_samples - start), rng, temperature)
        cache = _forward(model, sample, seqs)
        values.append(cache['cot_seq'] + cache['ans_seq'] - beta * cache['path_kl'])
    values = np.concatenate(values)
    std_error = float(values.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return float(values.mean()), std_error


def gumbel_gradients(model, sample, rng, n_samples=1):
    """
    Straight-through Gumbel-Softmax gradients of -ELBO.

    Forward passes use hard samples; the decoders' gradient with respect to
    each option slot flows into the posterior logits through the relaxed
    one-hot at the model temperature. Option prefixes are held constant in
    the per-factor KL terms.
    """

    tables = _posterior_tables(model, sample)
    tau = model.gumbel_temperature
    beta = model.kl_weight
    seqs, relaxed = _sample_posterior(model, tables, n_samples, rng, tau)
    cache = _forward(model, sample, seqs)
    values = cache['cot_seq'] + cache['ans_seq'] - beta * cache['path_kl']

    n = n_samples
    d_cot = _decoder_residual(cache, 'cot') / n
    d_ans = _decoder_residual(cache, 'ans') / n
    q, p = np.exp(cache['post_logp']), np.exp(cache['prior_logp'])
    d_prior = beta * (q - p) / n
    d_post = -beta * q * ((cache['post_logp'] - cache['prior_logp']) - cache['step_kl'][:, :, None]) / n

    # Slot gradients of the decoders reach the posterior through the relaxed sample
    zeros = np.zeros_like(d_prior)
    _, dslots = _backward(model, sample, cache, d_cot, d_ans, zeros, zeros, slot_grads=True)
    dy = dslots @ model.params['opt_emb'].T
    d_post = d_post + relaxed * (dy - np.sum(relaxed * dy, axis=2, keepdims=True)) / tau

    grads, _ = _backward(model, sample, cache, -d_cot, -d_ans, -d_prior, -d_post)
    return -float(values.mean()), grads


# Training

def train_epoch(model, dataset, mode='exact', lr=1e-2, optimizer='adam', rng=None):
    """
    One pass of per-sample updates on -ELBO.

    Parameters:
    - model (LatentReasoningModel): updated in place.
    - dataset (list of ReasoningSample): visited in a shuffled order when rng is given.
    - mode (str): 'exact' (enumerated objective) or 'gumbel' (straight-through estimator).
    - lr (float): step size.
    - optimizer (str): 'adam' (state kept on the model) or 'sgd'.

    Returns:
    - dict with the mean loss of the pass and the number of updates.
    """

    if not dataset:
        raise ConfigError('train_epoch needs a non-empty dataset')
    if mode not in ('exact', 'gumbel'):
        raise ConfigError(f'Unknown cold-start training mode: {mode}')
    if optimizer not in ('adam', 'sgd'):
        raise ConfigError(f'Unknown optimizer: {optimizer}')
    if mode == 'gumbel' and rng is None:
        raise ConfigError('Gumbel training needs an rng')

    names = list(PARAM_NAMES)
    params = [model.params[name] for name in names]
    if optimizer == 'adam' and (model.optimizer_state is None or model.optimizer_state.lr != lr):
        model.optimizer_state = AdamState.for_params(params, lr=lr, eps=1e-8)

    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    losses = []
    for index in order:
        sample = dataset[index]
        if mode == 'exact':
            loss, grads = elbo_gradients(model, sample)
        else:
            loss, grads = gumbel_gradients(model, sample, rng)
        if not np.isfinite(loss):
            raise NonFiniteError(f'Cold-start loss became non-finite on sample {index}: {decode(sample.prompt)}')
        losses.append(loss)
        grad_list = [grads[name] for name in names]
        if optimizer == 'adam':
            adam_step(model.optimizer_state, params, grad_list)
        else:
            for param, grad in zip(params, grad_list):
                param -= lr * grad
    return {'loss': float(np.mean(losses)), 'n_updates': len(losses)}


def evaluate_corpus(model, samples):
    ''' Mean exact ELBO and parts over samples'''

    totals = {'elbo': 0.0, 'recon_cot': 0.0, 'recon_ans': 0.0, 'kl': 0.0}
    for sample in samples:
        elbo, parts = elbo_sft_exact(model, sample)
        totals['elbo'] += elbo
        for key, value in parts.items():
            totals[key] += value
    return {key: value / len(samples) for key, value in totals.items()}


# Inference

def _greedy_decode(w, b, ctx, slots, tok_emb):

    out, prev = [], BOS
    for t in range(MAX_POSITIONS):
        logits = w[t] @ np.concatenate([ctx, slots, tok_emb[prev]]) + b[t]
        token = int(np.argmax(logits))
        if token == EOS:
            break
        out.append(token)
        prev = token
    return out


def infer(model, prompt, seed=None, emit_cot=True, greedy_latent=False, rng=None):
    """
    Sample a latent sequence from the prior and decode greedily.

    Returns:
    - (o, cot, answer): o is the latent sequence, cot is None unless emit_cot.
    """

    prompt = list(prompt)
    if not prompt:
        raise ConfigError('infer needs a non-empty prompt')
    rng = rng if rng is not None else np.random.default_rng(seed)
    p = model.params
    L = model.latent_length
    ctx = _pool(p['pool_emb'], prompt)
    const, G = _head_tables(p['prior_w'], p['prior_b'], ctx, None, p['opt_emb'], _latent_mask(L))

    o = []
    for i in range(L):
        logits = const[i] + sum(G[i, l, o[l]] for l in range(i))
        if greedy_latent:
            o.append(int(np.argmax(logits)))
        else:
            o.append(int(sample_categorical(softmax(logits), rng)[0]))
    slots = p['opt_emb'][o].reshape(-1)

    answer = _greedy_decode(p['ans_w'], p['ans_b'], ctx, slots, p['tok_emb'])
    cot = _greedy_decode(p['cot_w'], p['cot_b'], ctx, slots, p['tok_emb']) if emit_cot else None
    return o, cot, answer


def exact_match(model, samples, seed=0, greedy_latent=False):
    ''' Fraction of samples whose inferred answer equals the reference answer'''

    if not samples:
        return float('nan')
    rng = np.random.default_rng(seed)
    hits = sum(infer(model, sample.prompt, emit_cot=False, greedy_latent=greedy_latent, rng=rng)[2]
               == list(sample.answer) for sample in samples)
    return hits / len(samples)


def train_coldstart(model, train_set, heldout_set, epochs, mode='exact', lr=1e-2, optimizer='adam',
                    eval_interval=20, rng=None, progress=True):
    """
    Epoch loop with periodic exact evaluation.

    Returns:
    - rows (list of dict) following METRIC_COLUMNS: epoch 0 and every
      eval_interval epochs, plus the final epoch.
    """

    def _row(epoch):
        stats = evaluate_corpus(model, train_set)
        match = exact_match(model, heldout_set) if heldout_set else float('nan')
        logger.info(f"Epoch {epoch}: ELBO {stats['elbo']:.4f} (KL {stats['kl']:.4f}), held-out exact match {match:.3f}")
        return {'epoch': epoch, **stats, 'exact_match': match}

    rows = [_row(0)]
    for epoch in tqdm(range(1, epochs + 1), disable=not progress or logger.getEffectiveLevel() > logging.INFO):
        result = train_epoch(model, train_set, mode, lr, optimizer, rng)
        logger.debug(f"Epoch {epoch}: mean loss {result['loss']:.6f}")
        if epoch % eval_interval == 0 or epoch == epochs:
            rows.append(_row(epoch))
    return rows


# Checkpoints

def export_option_embedding(model, path_prefix):
    ''' Write the option embedding in the layout VMOC checkpoints use'''

    save_tensors(path_prefix, {'W': model.params['opt_emb']},
                 {'n_options': model.n_latent, 'embedding_dim': model.embedding_dim})


def save_model(model, path_prefix):

    os.makedirs(os.path.dirname(os.path.abspath(path_prefix)), exist_ok=True)
    save_tensors(path_prefix, model.params, {'config': model.config_dict(), 'vocab': VOCAB})


def load_model(path_prefix):

    tensors, manifest = load_tensors(path_prefix)
    if manifest.get('vocab') != VOCAB:
        raise ConfigError(f'{path_prefix} was written with a different vocabulary')
    return LatentReasoningModel(**manifest['config'], params=tensors)
