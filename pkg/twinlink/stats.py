"""
statsd reporting for twinlink components

Counters, gauges and timings go to statsd when STATSD_URL and
STATSD_PREFIX are both set, and nowhere otherwise.  Stats never raise:
a lost statsd connection is retried once per report, then dropped.

Names and labels are listed in doc/stats.md.
"""

import logging
from typing import Any, Callable, List, Optional, Tuple
from urllib.parse import urlparse

# PyPI
import statsd                   # type: ignore[import-untyped]

from twinlink.config import conf

Labels = List[Tuple[str, Any]]

logger = logging.getLogger(__name__)


def stat_name(name: str, labels: Labels = []) -> str:
    """
    fold labels into a dotted graphite name: ("robot", 1) becomes
    "name.robot_1".  Sorted by label name so the order of the
    caller's list doesn't matter.
    """
    parts = [name] + [f"{key}_{val}" for key, val in sorted(labels)]
    return '.'.join(parts)


class Stats:
    """
    one per process: Stats.init from the main program, Stats.get
    everywhere else.
    """

    _instance: Optional['Stats'] = None

    @classmethod
    def init(cls, component: str) -> 'Stats':
        if cls._instance:
            raise RuntimeError(
                f"Stats.init({component}): already have {cls._instance.component}")
        cls._instance = cls(component)
        return cls._instance

    @classmethod
    def get(cls) -> 'Stats':
        # library use (tests) without a main program reports as "lib"
        if not cls._instance:
            cls._instance = cls('lib')
        return cls._instance

    def __init__(self, component: str):
        self.component = component
        self.client: Optional[Any] = None
        self.host: Optional[str] = None
        self.port = 8125
        self.prefix: Optional[str] = None

        if conf.STATSD_URL:
            url = urlparse(conf.STATSD_URL)
            self.host = url.hostname
            self.port = url.port or self.port
        if conf.STATSD_PREFIX:
            self.prefix = f"{conf.STATSD_PREFIX}.{component}"

        if not self.enabled:
            logger.debug("statsd not configured")

    @property
    def enabled(self) -> bool:
        return bool(self.host and self.prefix)

    def _send(self, call: Callable[[Any], None]) -> None:
        if not self.enabled:
            return
        for _ in range(2):
            try:
                if self.client is None:  # (re)connect
                    self.client = statsd.StatsdClient(
                        self.host, self.port, self.prefix)
                call(self.client)
                return
            except Exception:
                self.client = None

    def incr(self, name: str, value: int = 1, labels: Labels = []) -> None:
        """
        bump a counter (names end in "s")
        """
        full = stat_name(name, labels)
        self._send(lambda c: c.incr(full, value))

    def gauge(self, name: str, value: float, labels: Labels = []) -> None:
        full = stat_name(name, labels)
        self._send(lambda c: c.gauge(full, value))

    def timing(self, name: str, sec: float, labels: Labels = []) -> None:
        """
        report a duration given in seconds (statsd wants ms)
        """
        full = stat_name(name, labels)
        self._send(lambda c: c.timing(full, sec * 1000))
