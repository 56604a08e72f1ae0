"""

Run config utilities

Reading an experiment config (JSON or YAML) over the default lab settings,
applying dotted key=value overrides, validating value ranges, deriving the
named random streams from the root seed and writing the resolved config.

"""

import copy
import json
import logging
import os
from pprint import pformat

import numpy as np
import yaml

from lab_settings import read_lab_settings
from lab_errors import ConfigError
from hitmdp_core import REGULARIZER_MODES
from coldstart_toy import TASKS
from nn_micro import MAX_LAYERS

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

COMMAND_SECTIONS = {
    'solve-tabular': 'solve_tabular',
    'check-homomorphism': 'check_homomorphism',
    'train-vmoc': 'train_vmoc',
    'coldstart': 'coldstart',
    'replay-metrics': 'replay_metrics',
}
STREAM_NAMES = ('env', 'agent', 'buffer', 'init', 'eval')
RESOLVED_CONFIG = 'config-resolved.json'


def _positive(v):
    return v > 0


def _at_least(n):
    return lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= n


def _discount(v):
    return 0.0 <= v < 1.0


def _one_of(choices):
    return lambda v: v in choices


GENERAL_RULES = [
    ('version', _at_least(1), 'an integer >= 1'),
    ('seed', _at_least(0), 'an integer >= 0'),
    ('threads', _at_least(1), 'an integer >= 1'),
]

SECTION_RULES = {
    'solve_tabular': [
        ('n_options', _at_least(1), 'an integer >= 1'),
        ('gamma', _discount, 'in [0, 1)'),
        ('alpha_a', _positive, '> 0'),
        ('alpha_o', _positive, '> 0'),
        ('regularizer_mode', _one_of(REGULARIZER_MODES), f'one of {REGULARIZER_MODES}'),
        ('tol', _positive, '> 0'),
        ('max_sweeps', _at_least(1), 'an integer >= 1'),
        ('max_rounds', _at_least(1), 'an integer >= 1'),
        ('init', _one_of(('uniform', 'random')), "'uniform' or 'random'"),
    ],
    'check_homomorphism': [
        ('tol', _positive, '> 0'),
        ('value_tol', _positive, '> 0'),
        ('elbo_horizon', _at_least(0), 'an integer >= 0'),
        ('abstract_policy_seed', _at_least(0), 'an integer >= 0'),
    ],
    'train_vmoc': [
        ('n_options', _at_least(1), 'an integer >= 1'),
        ('embedding_dim', _at_least(1), 'an integer >= 1'),
        ('hidden_sizes', lambda v: isinstance(v, (list, tuple)) and 1 <= len(v) < MAX_LAYERS
         and all(_at_least(1)(n) for n in v), f'a list of 1 to {MAX_LAYERS - 1} positive integers'),
        ('gamma', _discount, 'in [0, 1)'),
        ('lr', _positive, '> 0'),
        ('adam_eps', _positive, '> 0'),
        ('batch_size', _at_least(1), 'an integer >= 1'),
        ('buffer_capacity', _at_least(1), 'an integer >= 1'),
        ('polyak', lambda v: 0.0 < v <= 1.0, 'in (0, 1]'),
        ('alpha_a', _positive, '> 0'),
        ('alpha_o', _positive, '> 0'),
        ('regularizer_mode', _one_of(REGULARIZER_MODES), f'one of {REGULARIZER_MODES}'),
        ('exploration_noise', lambda v: v >= 0, '>= 0'),
        ('grad_clip_norm', lambda v: v is None or v > 0, 'null or > 0'),
        ('total_steps', _at_least(1), 'an integer >= 1'),
        ('start_steps', _at_least(0), 'an integer >= 0'),
        ('update_after', _at_least(0), 'an integer >= 0'),
        ('update_every', _at_least(1), 'an integer >= 1'),
        ('eval_interval', _at_least(1), 'an integer >= 1'),
        ('eval_episodes', _at_least(1), 'an integer >= 1'),
        ('rollout_workers', _at_least(0), 'an integer >= 0'),
    ],
    'coldstart': [
        ('task', _one_of(TASKS), f'one of {TASKS}'),
        ('n_samples', _at_least(1), 'an integer >= 1'),
        ('heldout_fraction', lambda v: 0.0 <= v < 1.0, 'in [0, 1)'),
        ('n_latent', _at_least(1), 'an integer >= 1'),
        ('latent_length', _at_least(1), 'an integer >= 1'),
        ('embedding_dim', _at_least(1), 'an integer >= 1'),
        ('kl_weight', lambda v: v >= 0, '>= 0'),
        ('gumbel_temperature', _positive, '> 0'),
        ('mode', _one_of(('exact', 'gumbel')), "'exact' or 'gumbel'"),
        ('optimizer', _one_of(('adam', 'sgd')), "'adam' or 'sgd'"),
        ('lr', _positive, '> 0'),
        ('epochs', _at_least(0), 'an integer >= 0'),
        ('eval_interval', _at_least(1), 'an integer >= 1'),
    ],
    'replay_metrics': [
        ('window', _at_least(1), 'an integer >= 1'),
    ],
}


def section_for(command):

    if command not in COMMAND_SECTIONS:
        raise ConfigError(f'Unknown command: {command}')
    return COMMAND_SECTIONS[command]


def default_config(command):
    ''' Defaults of a command from the lab settings file'''

    section = section_for(command)
    return {'version': lab_dict['config_version'], 'seed': lab_dict['seed'],
            'output_dir': os.path.join(lab_dict['output_dir'], section),
            'threads': lab_dict['max_num_threads'], section: copy.deepcopy(lab_dict[section])}


def read_config_file(config_path):
    ''' Parse a JSON or YAML config file into a mapping'''

    if not os.path.exists(config_path):
        raise ConfigError(f'Config file not found: {config_path}')
    try:
        with open(config_path, 'r') as file:
            doc = yaml.safe_load(file)
    except yaml.YAMLError as e:
        raise ConfigError(f'Unreadable config file {config_path}: {e}')
    if not isinstance(doc, dict):
        raise ConfigError(f'Config file {config_path} must hold a mapping')
    return doc


def merge_config(base, update, prefix=''):
    ''' Recursively merge update into base, rejecting keys that base does not define'''

    for key, value in update.items():
        dotted = f'{prefix}{key}'
        if key not in base:
            raise ConfigError(f'Unknown config key: {dotted}')
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f'Config key {dotted} must hold a mapping')
            merge_config(base[key], value, prefix=f'{dotted}.')
        else:
            base[key] = value
    return base


def parse_override(text):
    ''' "a.b=value" -> (["a", "b"], parsed value)'''

    if '=' not in text:
        raise ConfigError(f'Override must look like key=value, got: {text}')
    key, raw = text.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError(f'Override has an empty key: {text}')
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f'Cannot parse override value for {key}: {e}')
    # YAML 1.1 reads exponent floats without a dot (3e-4) as strings
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            pass
    return key.split('.'), value


def apply_override(config, section, text):
    ''' Apply one override; a bare key (no section) refers to the command section'''

    path, value = parse_override(text)
    if len(path) == 1 and path[0] not in config and path[0] in config[section]:
        path = [section] + path
    node = config
    for i, key in enumerate(path[:-1]):
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"Unknown config key: {'.'.join(path[:i + 1])}")
        node = node[key]
    if path[-1] not in node:
        raise ConfigError(f"Unknown config key: {'.'.join(path)}")
    node[path[-1]] = value


def validate_config(command, config):
    ''' Range checks of the general keys and the command section'''

    section = section_for(command)
    checks = [(key, config.get(key), rule, text) for key, rule, text in GENERAL_RULES]
    checks += [(f'{section}.{key}', config[section].get(key), rule, text) for key, rule, text in SECTION_RULES[section]]
    for dotted, value, rule, text in checks:
        try:
            valid = rule(value)
        except TypeError:
            valid = False
        if not valid:
            raise ConfigError(f'Config key {dotted} must be {text}, got {value!r}')
    if config['version'] != lab_dict['config_version']:
        raise ConfigError(f"Unsupported config version {config['version']} (expected {lab_dict['config_version']})")
    return config


def read_run_config(command, config_path=None, overrides=(), seed=None, output_dir=None, threads=None):
    """
    Resolve the effective config of a command.

    Order: lab defaults, then the config file (which must carry a version),
    then --set overrides, then the explicit seed/output_dir/threads flags.

    Returns:
    - dict with 'version', 'seed', 'output_dir', 'threads' and the command section.

    Raises:
    - ConfigError for unknown keys, bad values or an unreadable file.
    """

    section = section_for(command)
    config = default_config(command)
    if config_path is not None:
        doc = read_config_file(config_path)
        if 'version' not in doc:
            raise ConfigError(f'Config file {config_path} has no version field')
        merge_config(config, doc)
    for text in overrides:
        apply_override(config, section, text)
    if seed is not None:
        config['seed'] = seed
    if output_dir is not None:
        config['output_dir'] = output_dir
    if threads is not None:
        config['threads'] = threads

    validate_config(command, config)
    logger.debug(f'Resolved {command} config:\n{pformat(config)}')
    return config


def write_resolved_config(config, out_dir):

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_CONFIG)
    with open(path, 'w') as file:
        json.dump(config, file, indent=1, sort_keys=True)
    return path


def seed_streams(root_seed):
    ''' Independent named generators spawned from the root seed in a fixed order'''

    children = np.random.SeedSequence(root_seed).spawn(len(STREAM_NAMES))
    return {name: np.random.default_rng(child) for name, child in zip(STREAM_NAMES, children)}


def resolve_input_path(path):
    ''' Absolute path, path relative to the working directory, or file in the settings directory'''

    if os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = os.path.join(lab_dict['settings_dir'], path)
    if os.path.exists(candidate):
        return candidate
    raise ConfigError(f'Input file not found: {path}')
