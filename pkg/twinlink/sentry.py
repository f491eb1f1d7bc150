"""
Sentry error reporting, enabled by SENTRY_DSN
(called from logargparse and server)
"""

import logging

# PyPI:
import sentry_sdk

from twinlink import APP, VERSION
from twinlink.config import conf

logger = logging.getLogger(__name__)


def init() -> bool:
    """
    returns True if events will be sent
    """
    dsn = conf.SENTRY_DSN
    if not dsn:
        logger.info("Sentry not configured")
        return False

    env = 'staging' if APP.startswith('staging-') else 'production'
    sentry_sdk.init(dsn=dsn, environment=env, release=VERSION)
    return True
