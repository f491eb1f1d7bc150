"""
twinlink process configuration

Values come from environment variables (or a .env file); each one is
read and logged on first use only, so a command's startup banner lists
just the settings it actually touched.

Experiment parameters (robots, setpoints, lag model, camera) live
in the experiment JSON document (see twinlink/experiment.py).
"""

import logging
import os
from typing import Any, Callable, Dict, List, Optional

# PyPI
from dotenv import load_dotenv

# local
from twinlink import VERSION

load_dotenv()  # .env in the working directory, if any

logger = logging.getLogger(__name__)


def _conf_property(name: str, convert: Callable[[str], Any], defval: Any,
                   hidden: bool = False) -> property:
    """
    property reading environment variable `name` through `convert`;
    unset or unparsable gives defval.  Unset optional values (defval
    None) are not logged.
    """

    def getter(confobj: '_Config') -> Any:
        if name in confobj.values:
            return confobj.values[name]
        text = os.environ.get(name)
        if text is None:
            value = defval
        else:
            try:
                value = convert(text)
            except ValueError:
                logger.warning(f"{name}: bad value {text!r}, using {defval!r}")
                value = defval
        if value is None:
            confobj.values[name] = None
        else:
            confobj._log(name, value, hidden)
        return value
    return property(getter)


def conf_default(name: str, defval: str) -> property:
    return _conf_property(name, str, defval)


def conf_int(name: str, defval: int) -> property:
    return _conf_property(name, int, defval)


def conf_float(name: str, defval: float) -> property:
    return _conf_property(name, float, defval)


def conf_optional(name: str, hidden: bool = False) -> property:
    """
    None when not set
    """
    return _conf_property(name, str, None, hidden)


class _Config:                  # only instantiated in this file
    """
    All "members" are property functions (working only on an
    instance), and there is exactly ONE instance: conf.
    """

    def __init__(self) -> None:
        self.values: Dict[str, Any] = {}  # cache
        self.msgs: List[str] = []  # logged before start()
        self.logging = False

    def _log(self, name: str, value: Any, hidden: bool = False) -> None:
        self.values[name] = value
        msg = f"{name}: {'(hidden)' if hidden else value}"
        if self.logging:
            logger.info(msg)
        else:
            self.msgs.append(msg)

    def start(self, prog: Optional[str], descr: Optional[str]) -> None:
        """
        log the startup banner and any values read before logging was
        configured.  Called from LogArgumentParser.my_parse_args.
        """
        if not prog:
            return
        git_rev = os.environ.get('GIT_REV', '(GIT_REV not set)')
        logger.info('-' * 72)
        logger.info(f"Starting {prog} ({descr}) version {VERSION} {git_rev}")
        for msg in self.msgs:
            logger.info(msg)
        self.msgs = []
        self.logging = True

    # alphabetical

    # address a standalone bridge server listens on
    BRIDGE_HOST = conf_default('BRIDGE_HOST', '0.0.0.0')

    # rosbridge convention
    BRIDGE_PORT = conf_int('BRIDGE_PORT', 9090)

    # per-subscriber queue bound; overflow drops oldest
    BRIDGE_QUEUE_SIZE = conf_int('BRIDGE_QUEUE_SIZE', 1024)

    # number of old log files to keep
    LOG_BACKUP_COUNT = conf_int('LOG_BACKUP_COUNT', 7)

    # capture render threads (files still complete in trigger order)
    RENDER_WORKERS = conf_int('RENDER_WORKERS', 2)

    SENTRY_DSN = conf_optional('SENTRY_DSN', hidden=True)

    # required if STATSD_URL set
    STATSD_PREFIX = conf_optional('STATSD_PREFIX')

    # statsd://host:port
    STATSD_URL = conf_optional('STATSD_URL')

    # output directory when neither --out nor the experiment sets one
    TWINLINK_OUT = conf_optional('TWINLINK_OUT')

    # seconds to wait for a WebSocket connection (or server startup)
    WS_CONNECT_TIMEOUT = conf_float('WS_CONNECT_TIMEOUT', 10.0)


conf = _Config()

if __name__ == '__main__':
    logging.basicConfig(level='INFO')
    conf.start('config', 'test')
    print(conf.BRIDGE_PORT, conf.BRIDGE_QUEUE_SIZE, conf.TWINLINK_OUT)
