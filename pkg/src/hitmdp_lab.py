"""

HiT-MDP lab

Config-driven experiment runner for the hidden temporal option lab.

Subcommands:
- solve-tabular       soft option policy iteration on a finite model
- check-homomorphism  validate a finite homomorphism and its equivalence gaps
- train-vmoc          train the option critic agent on a built-in environment
- coldstart           cold-start latent reasoning training on a toy corpus
- replay-metrics      summarize a metrics CSV written by another subcommand

Each run writes config-resolved.json, its metrics and checkpoints to the
output directory. Exit status: 0 success, 1 invalid input or failed
homomorphism check, 2 runtime fault.

"""

import argparse
import logging
import os
import sys

import numpy as np

from lab_settings import read_lab_settings
from lab_errors import ConfigError, LabError
from logging_utils import set_logger, level_from_env
from run_config_utils import (COMMAND_SECTIONS, read_run_config, write_resolved_config, seed_streams,
                              resolve_input_path)
from metrics_utils import write_metrics, replay_metrics, SOLVE_COLUMNS, VMOC_COLUMNS, COLDSTART_COLUMNS
from hitmdp_core import mdp_from_json, uniform_policies, random_policies
from tabular_solver import TemperaturePair, soft_option_policy_iteration, soft_value_iteration, export_solution
from homomorphism import (mirror_chain_fixture, homomorphism_from_json, perturb_abstract_reward,
                          validate_homomorphism, value_equivalence_gap, lift_policy, elbo_gap, report_to_json)
from envs import make_env
from vmoc_agent import VMOCConfig, train_vmoc, save_agent
from coldstart_toy import (LatentReasoningModel, make_synthetic_corpus, read_corpus, write_corpus, split_corpus,
                           train_coldstart, save_model, export_option_embedding)

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])


class LabArgumentParser(argparse.ArgumentParser):
    """Argument parser that reports bad command lines as ConfigError"""

    def error(self, message):
        raise ConfigError(message)


def run_solve_tabular(config, out_dir, threads):
    ''' Soft option policy iteration; writes solution.json and the per-improvement metrics'''

    sec = config['solve_tabular']
    streams = seed_streams(config['seed'])
    if sec['mdp_file']:
        mdp = mdp_from_json(resolve_input_path(sec['mdp_file']))
    else:
        env = make_env(sec['env_id'], streams['env'])
        if not hasattr(env, 'model'):
            raise ConfigError(f"Environment {sec['env_id']} has no finite model to solve")
        mdp = env.model(sec['n_options'], sec['gamma'], sec['regularizer_mode'])
    logger.info(f'Solving finite model with (S, K, A) = {mdp.shape}, gamma {mdp.discount}')

    temps = TemperaturePair(sec['alpha_a'], sec['alpha_o'])
    if sec['init'] == 'uniform':
        init = uniform_policies(*mdp.shape)
    else:
        init = random_policies(*mdp.shape, streams['init'])
    result = soft_option_policy_iteration(mdp, init, temps, sec['tol'], sec['max_rounds'],
                                          max_sweeps=sec['max_sweeps'])

    rows = [{'iteration': i + 1, 'elbo': elbo, 'policy_change': change, 'sweeps': sweeps}
            for i, (elbo, change, sweeps) in enumerate(zip(result.elbo_trace, result.policy_changes, result.sweeps))]
    write_metrics(rows, SOLVE_COLUMNS, os.path.join(out_dir, 'metrics.csv'))
    export_solution(os.path.join(out_dir, 'solution.json'), result.policies, result.q, result.elbo_trace)

    if mdp.regularizer_mode == 'zero':
        optimum = soft_value_iteration(mdp, temps, sec['tol'] * 1e-2, sec['max_sweeps'])
        gap = float(np.max(np.abs(optimum.q_option - result.q.q_option)))
        logger.info(f'Sup-norm distance to the soft-optimal option values: {gap:.3g}')
    logger.info(f'Final ELBO {result.elbo_trace[-1]:.10g} after {len(result.elbo_trace)} improvements')
    return 0


def run_check_homomorphism(config, out_dir, threads):
    ''' Validate a homomorphism fixture; on success also report value-equivalence and ELBO gaps'''

    sec = config['check_homomorphism']
    if sec['fixture'] == 'mirror':
        h = mirror_chain_fixture()
    else:
        h = homomorphism_from_json(resolve_input_path(sec['fixture']))
    if sec['perturb']:
        h = perturb_abstract_reward(h, sec['perturb'])
    logger.info(f'Checking homomorphism {h.base_mdp.shape} -> {h.abstract_mdp.shape}')

    report = validate_homomorphism(h, sec['tol'])
    extra = {}
    if report.passed:
        abstract = h.abstract_mdp
        policy = random_policies(*abstract.shape, np.random.default_rng(sec['abstract_policy_seed']))
        lifted = lift_policy(h, policy)
        gap, entropy_term = elbo_gap(h, policy, lifted, sec['elbo_horizon'])
        extra = {'value_gap_optimal': value_equivalence_gap(h, mode='optimal', tol=sec['value_tol']),
                 'value_gap_fixed_policy': value_equivalence_gap(h, mode='fixed_policy', abstract_policy=policy,
                                                                 tol=sec['value_tol']),
                 'elbo_gap': gap, 'conditional_entropy': entropy_term, 'elbo_horizon': sec['elbo_horizon']}
        logger.info(f"Homomorphism check passed: value gaps {extra['value_gap_optimal']:.3g} (optimal), "
                    f"{extra['value_gap_fixed_policy']:.3g} (fixed policy), ELBO gap {gap:.6g}")
    else:
        for example in report.counterexamples:
            logger.warning(f'Counterexample: {example}')
        for issue in report.structure_issues:
            logger.warning(f'Structure issue: {issue}')
    report_to_json(report, os.path.join(out_dir, 'report.json'), dict(extra, status='pass' if report.passed else 'fail'))
    return 0 if report.passed else 1


def run_train_vmoc(config, out_dir, threads):
    ''' Train VMOC; writes metrics.csv, evaluation.csv and the agent checkpoints'''

    sec = config['train_vmoc']
    streams = seed_streams(config['seed'])
    agent_config = VMOCConfig.from_dict(sec)

    def env_factory(rng):
        return make_env(sec['env_id'], rng)

    agent, rows, evaluations = train_vmoc(env_factory, agent_config, streams, max_num_threads=threads)
    write_metrics(rows, VMOC_COLUMNS, os.path.join(out_dir, 'metrics.csv'))
    eval_rows = [{'step': e['step'], 'ret_median': e['ret_median'], 'success_rate': e['success_rate'],
                  'option_entropy': e['option_entropy']} for e in evaluations]
    write_metrics(eval_rows, ['step', 'ret_median', 'success_rate', 'option_entropy'],
                  os.path.join(out_dir, 'evaluation.csv'))
    save_agent(agent, os.path.join(out_dir, 'checkpoints'))
    return 0


def run_coldstart(config, out_dir, threads):
    ''' Cold-start training; writes metrics.csv, the corpus, the model and the option embedding'''

    sec = config['coldstart']
    streams = seed_streams(config['seed'])
    if sec['corpus_file']:
        samples = read_corpus(resolve_input_path(sec['corpus_file']))
    else:
        samples = make_synthetic_corpus(sec['task'], sec['n_samples'], config['seed'])
    train_set, heldout_set = split_corpus(samples, sec['heldout_fraction'], streams['eval'])
    logger.info(f'Cold-start on {len(train_set)} training and {len(heldout_set)} held-out samples')

    model = LatentReasoningModel(sec['n_latent'], sec['latent_length'], sec['embedding_dim'], streams['init'],
                                 sec['kl_weight'], sec['gumbel_temperature'])
    rows = train_coldstart(model, train_set, heldout_set, sec['epochs'], sec['mode'], sec['lr'], sec['optimizer'],
                           sec['eval_interval'], streams['agent'])
    write_metrics(rows, COLDSTART_COLUMNS, os.path.join(out_dir, 'metrics.csv'))
    write_corpus(samples, os.path.join(out_dir, 'corpus.tsv'))
    save_model(model, os.path.join(out_dir, 'coldstart_model'))
    export_option_embedding(model, os.path.join(out_dir, 'option_embedding'))
    return 0


def run_replay_metrics(config, out_dir, threads):
    ''' Print the smoothed summary of a metrics CSV and write summary.json'''

    sec = config['replay_metrics']
    if not sec['metrics_path']:
        raise ConfigError('replay-metrics needs a metrics file (replay_metrics.metrics_path)')
    _, text = replay_metrics(sec['metrics_path'], sec['window'], out_dir)
    print(text)
    return 0


COMMANDS = {
    'solve-tabular': run_solve_tabular,
    'check-homomorphism': run_check_homomorphism,
    'train-vmoc': run_train_vmoc,
    'coldstart': run_coldstart,
    'replay-metrics': run_replay_metrics,
}


def build_parser():

    parser = LabArgumentParser(prog='hitmdp_lab', description='Hidden temporal option lab experiment runner.')
    subparsers = parser.add_subparsers(dest='command', required=True)
    for command in COMMAND_SECTIONS:
        sub = subparsers.add_parser(command, help=COMMANDS[command].__doc__.strip())
        sub.add_argument('--config', type=str, default=None, help='Experiment config file (JSON or YAML)')
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help='Override a config key, e.g. train_vmoc.gamma=0.99')
        sub.add_argument('--seed', type=int, default=None, help='Root seed of every random stream')
        sub.add_argument('--out', type=str, default=None, help='Output directory')
        sub.add_argument('--threads', type=int, default=None, help='Cap on worker threads')
        if command == 'replay-metrics':
            sub.add_argument('metrics_path', nargs='?', default=None, help='Metrics CSV to summarize')
    return parser


def main(argv=None):
    """
    Run one subcommand.

    Parameters:
    - argv (list of str, optional): command line without the program name.

    Returns:
    - int exit status: 0 success, 1 invalid input or failed homomorphism check, 2 runtime fault.
    """

    set_logger(None, lab_dict['logger_name'], level_from_env())
    try:
        args = build_parser().parse_args(argv)
        config = read_run_config(args.command, args.config, args.overrides, args.seed, args.out, args.threads)
        if getattr(args, 'metrics_path', None):
            config['replay_metrics']['metrics_path'] = args.metrics_path
        out_dir = config['output_dir']
        os.makedirs(out_dir, exist_ok=True)
        set_logger(os.path.join(out_dir, os.path.basename(lab_dict['log_file'])), lab_dict['logger_name'],
                   level_from_env())
        write_resolved_config(config, out_dir)

        logger.info(f'Running {args.command} with seed {config["seed"]}, output to {out_dir}')
        status = COMMANDS[args.command](config, out_dir, config['threads'])
        logger.info(f'{args.command} finished with status {status}')
        return status

    except ConfigError as e:
        logger.error(f'Invalid input: {e}')
        return 1
    except LabError as e:
        logger.error(f'{type(e).__name__}: {e}')
        return 2
    except Exception as e:
        logger.exception(f'Runtime fault in {" ".join(argv) if argv else "hitmdp_lab"}: {e}')
        return 2


if __name__ == '__main__':
    sys.exit(main())
