"""

Lab settings

This script contains functions for the lab settings.
Principally reading default settings from a yaml file, and setting file paths.


"""
import os
import copy
from functools import lru_cache

import yaml


@lru_cache(maxsize=None)
def _load_settings_file(file_path):

    with open(file_path, 'r') as file:
        return yaml.safe_load(file)


def read_lab_settings(lab_settings_file='lab_settings.yaml'):
    """Function to read default lab settings from yaml file"""

    dir_path = os.path.dirname(os.path.realpath(__file__))
    file_path = os.path.join(dir_path, lab_settings_file)

    lab_settings_dict = copy.deepcopy(_load_settings_file(file_path))

    #Resolve relative paths
    lab_settings_dict['output_dir'] = os.path.normpath(os.path.join(dir_path, lab_settings_dict['output_dir']))
    lab_settings_dict['settings_dir'] = os.path.normpath(os.path.join(dir_path, lab_settings_dict['settings_dir']))
    lab_settings_dict['log_file'] = os.path.join(lab_settings_dict['output_dir'], lab_settings_dict['log_file'])

    return lab_settings_dict
