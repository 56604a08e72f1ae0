"""

Metrics utilities

Writing the per-command metrics CSV files and replaying them into a
smoothed summary (final/best values and trends) printed as an aligned
table and stored as summary.json.

"""

import json
import logging
import os

import numpy as np
import pandas as pd

from lab_settings import read_lab_settings
from lab_errors import ConfigError
from vmoc_agent import METRIC_COLUMNS as VMOC_COLUMNS
from coldstart_toy import METRIC_COLUMNS as COLDSTART_COLUMNS

# Initialize the logger with the same settings
lab_dict = read_lab_settings()
logger = logging.getLogger(lab_dict['logger_name'])

FLOAT_FORMAT = '%.10g'
SMOOTHING_WINDOW = 20
SOLVE_COLUMNS = ['iteration', 'elbo', 'policy_change', 'sweeps']
SCHEMAS = {
    'train-vmoc': {'columns': VMOC_COLUMNS, 'value': 'ret_mean'},
    'solve-tabular': {'columns': SOLVE_COLUMNS, 'value': 'elbo'},
    'coldstart': {'columns': COLDSTART_COLUMNS, 'value': 'elbo'},
}


def write_metrics(rows, columns, path):
    ''' Write metric rows with a fixed float format so identical runs give identical files'''

    df = pd.DataFrame(rows, columns=columns)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep='nan')
    logger.info(f'Wrote {len(df)} metric rows to {path}')
    return df


def detect_schema(columns):

    for name, schema in SCHEMAS.items():
        if list(columns) == schema['columns']:
            return name
    raise ConfigError(f'Metrics header {list(columns)} matches no known schema')


def read_metrics(metrics_path):
    """
    Read and validate a metrics CSV.

    Every cell must parse as a number ('nan' marks a value not yet
    available, such as a loss before the first update).

    Raises:
    - ConfigError naming the file line of a malformed row.
    """

    if not os.path.exists(metrics_path):
        raise ConfigError(f'Metrics file not found: {metrics_path}')
    try:
        raw = pd.read_csv(metrics_path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise ConfigError(f'Malformed metrics file {metrics_path}: {e}')
    except pd.errors.EmptyDataError:
        raise ConfigError(f'Metrics file {metrics_path} is empty')

    schema = detect_schema(raw.columns)
    if raw.empty:
        raise ConfigError(f'Metrics file {metrics_path} holds a header but no rows')
    values = raw.apply(pd.to_numeric, errors='coerce')
    bad = values.isna() & (raw.apply(lambda column: column.str.strip().str.lower()) != 'nan')
    if bad.any().any():
        row = int(np.argmax(bad.any(axis=1).to_numpy()))
        column = bad.columns[bad.iloc[row].to_numpy()][0]
        raise ConfigError(f'{metrics_path} line {row + 2}: column {column} holds '
                          f'non-numeric value [{raw.iloc[row][column]}]')
    return schema, values


def smooth(series, window=SMOOTHING_WINDOW):
    ''' Trailing moving average over up to window rows'''

    return series.rolling(window=window, min_periods=1).mean()


def summarize(schema, df, window=SMOOTHING_WINDOW):
    ''' Final/best value of the schema's headline column and first-to-last smoothed trends of every column'''

    x_name = df.columns[0]
    value = SCHEMAS[schema]['value']
    smoothed = df.apply(lambda column: smooth(column, window))
    headline = df[value]
    best_row = 0
    if headline.notna().any():
        best_row = int(np.nanargmax(headline.to_numpy()))

    trends = {}
    for column in df.columns[1:]:
        first, last = smoothed[column].iloc[0], smoothed[column].iloc[-1]
        trends[column] = {'first': float(first), 'last': float(last), 'change': float(last - first),
                          'best': float(df[column].max()), 'final': float(df[column].iloc[-1])}
    return {
        'schema': schema,
        'rows': int(len(df)),
        'window': window,
        'value_column': value,
        'final': float(headline.iloc[-1]),
        'final_smoothed': float(smoothed[value].iloc[-1]),
        'best': float(headline.iloc[best_row]),
        'best_at': float(df[x_name].iloc[best_row]),
        'x_column': x_name,
        'trends': trends,
    }


def format_summary(summary):
    ''' Aligned text table of a summary'''

    table = pd.DataFrame.from_dict(summary['trends'], orient='index')[['first', 'last', 'change', 'best', 'final']]
    header = (f"{summary['schema']}: {summary['rows']} rows, window {summary['window']}\n"
              f"{summary['value_column']}: final {summary['final']:.6g} (smoothed {summary['final_smoothed']:.6g}), "
              f"best {summary['best']:.6g} at {summary['x_column']} {summary['best_at']:.6g}\n")
    return header + table.to_string(float_format=lambda v: f'{v:.6g}')


def replay_metrics(metrics_path, window=SMOOTHING_WINDOW, out_dir=None):
    """
    Summarize a metrics CSV.

    Parameters:
    - metrics_path (str): CSV written by one of the lab commands.
    - window (int): smoothing window in rows.
    - out_dir (str, optional): where summary.json is written.

    Returns:
    - (summary dict, aligned text table)
    """

    if window < 1:
        raise ConfigError(f'Smoothing window must be >= 1, got {window}')
    schema, df = read_metrics(metrics_path)
    summary = summarize(schema, df, window)
    text = format_summary(summary)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, 'summary.json'), 'w') as file:
            json.dump(summary, file, indent=1, sort_keys=True)
    return summary, text
