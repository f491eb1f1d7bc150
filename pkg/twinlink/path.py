"""
where twinlink finds its assets and writes its files
"""

import os

PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
BASE_DIR = os.path.dirname(PACKAGE_DIR)

ASSET_DIR = os.path.join(PACKAGE_DIR, 'assets')
TEMPLATE_DIR = os.path.join(PACKAGE_DIR, 'templates')

DEFAULT_EXPERIMENT = os.path.join(ASSET_DIR, 'experiment.json')
DEFAULT_URDF = os.path.join(ASSET_DIR, 'ur10.urdf')

# writable storage; create with check_dir before use
STORAGE_DIR = os.path.join(BASE_DIR, 'storage')
LOG_DIR = os.path.join(STORAGE_DIR, 'logs')
OUTPUT_DIR = os.path.join(STORAGE_DIR, 'output')


def check_dir(dirname: str) -> None:
    os.makedirs(dirname, exist_ok=True)
