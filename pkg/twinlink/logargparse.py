"""
ArgumentParser with the logging options every twinlink command takes

my_parse_args() does the common startup: --set overrides, logging
(console, optional daily-rotated file, optional dictConfig/fileConfig
file), config banner, Sentry and Stats.
"""

import argparse
import json
import logging
import logging.config
import logging.handlers
import os
import sys
from typing import List, Optional

# PyPI:
import yaml

# local:
from twinlink import VERSION
from twinlink.config import conf
import twinlink.path as path
import twinlink.sentry
from twinlink.stats import Stats

LEVELS = ['debug', 'info', 'warning', 'error', 'critical']

LEVEL_DEST = 'log_level'        # Namespace attribute

LOG_FORMAT = '%(asctime)s | %(levelname)s | %(name)s | %(message)s'

logger = logging.getLogger(__name__)


def _load_log_config(fname: str) -> None:
    if fname.endswith('.json'):
        with open(fname) as f:
            logging.config.dictConfig(json.load(f))
    elif fname.endswith(('.yaml', '.yml')):
        with open(fname) as f:
            logging.config.dictConfig(yaml.safe_load(f))
    else:
        logging.config.fileConfig(fname, disable_existing_loggers=False)


class LogFile:
    """
    the root logger's file handler (at most one)
    """

    def __init__(self) -> None:
        self.handler: Optional[logging.Handler] = None

    def open(self, fname: str) -> None:
        root = logging.getLogger()
        if self.handler:
            root.removeHandler(self.handler)
            self.handler.close()
        if not fname.endswith('.log'):
            fname += '.log'
        # new file after midnight UTC
        self.handler = logging.handlers.TimedRotatingFileHandler(
            fname, when='midnight', utc=True,
            backupCount=conf.LOG_BACKUP_COUNT)
        self.handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(self.handler)
        logger.info(f"logging to {fname}")


log_file = LogFile()


class LogArgumentParser(argparse.ArgumentParser):
    def __init__(self, prog: str, descr: str):
        super().__init__(prog=prog, description=descr)

        default_fname = f"{prog}.log"

        levels = self.add_argument_group('logging')
        levels.add_argument('--verbose', '-v', action='store_const',
                            const='DEBUG', dest=LEVEL_DEST,
                            help="log at DEBUG level")
        levels.add_argument('--quiet', '-q', action='store_const',
                            const='WARNING', dest=LEVEL_DEST,
                            help="log at WARNING level")
        levels.add_argument('--log-level', '-l', choices=LEVELS,
                            dest=LEVEL_DEST,
                            default=os.getenv('LOG_LEVEL', 'info'),
                            help="default logging level (env LOG_LEVEL)")
        levels.add_argument('--logger-level', '-L', action='append',
                            default=[], metavar='LOGGER:LEVEL',
                            help="logging level for one logger (repeatable)")
        levels.add_argument('--list-loggers', action='store_true',
                            help="print logger names and exit")
        levels.add_argument('--log-config', metavar='FILE',
                            help="logging config (.json, .yml or .ini)")
        levels.add_argument('--log-file', default=default_fname,
                            help=f"file in {path.LOG_DIR} (default: {default_fname})")
        levels.add_argument('--no-log-file', action='store_const',
                            const=None, dest='log_file',
                            help="log to stderr only")

        self.add_argument('--set', '-S', action='append', default=[],
                          metavar='VAR=VALUE',
                          help="override an environment/config variable")
        self.add_argument('--version', '-V', action='version',
                          version=f"twinlink {prog} {VERSION}")

    def my_parse_args(self, argv: Optional[List[str]] = None) -> argparse.Namespace:
        args = self.parse_args(argv)

        # before anything reads conf
        for setting in args.set:
            var, sep, val = setting.partition('=')
            if not sep:
                self.error(f"--set {setting}: expected VAR=VALUE")
            os.environ[var] = val

        if args.list_loggers:
            for name in sorted(logging.root.manager.loggerDict):
                print(name)
            sys.exit(0)

        level = (getattr(args, LEVEL_DEST) or 'info').upper()
        logging.basicConfig(format=LOG_FORMAT, level=level)

        if args.log_config:
            _load_log_config(args.log_config)

        for setting in args.logger_level:
            name, sep, lvl = setting.rpartition(':')
            if not sep:
                self.error(f"--logger-level {setting}: expected LOGGER:LEVEL")
            logging.getLogger(name).setLevel(lvl.upper())

        if args.log_file:
            path.check_dir(path.LOG_DIR)
            log_file.open(os.path.join(path.LOG_DIR, args.log_file))

        conf.start(self.prog, self.description)
        if not args.log_file:
            logger.info("not logging to a file")

        twinlink.sentry.init()
        Stats.init(self.prog)
        return args
