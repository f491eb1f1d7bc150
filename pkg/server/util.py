"""
JSON envelope for the bridge status API
"""

import functools
import inspect
import logging
import time
from typing import Any, Callable, Dict, TypedDict, Union

from twinlink import VERSION
from twinlink.stats import Stats

logger = logging.getLogger(__name__)

OK = 'OK'
ERROR = 'ERROR'


class _Envelope(TypedDict):
    status: str                 # OK or ERROR
    duration: int               # ms
    version: str


class OkResult(_Envelope):
    results: Dict


class ErrorResult(_Envelope):
    statusCode: int
    message: str


ApiResult = Union[OkResult, ErrorResult]


def _finish(name: str, status: str, started: float) -> int:
    """
    count the request, return its duration in ms
    """
    sec = time.monotonic() - started
    Stats.get().incr('api.requests', labels=[('name', name), ('status', status)])
    logger.debug(f"{name}: {status} in {sec:.3f}s")
    return round(sec * 1000)


def api_method(func: Callable[..., Any]) -> Callable[..., Any]:
    """
    decorator for FastAPI endpoints (sync or async): results go in an
    OK envelope; an exception is logged and returned as an ERROR
    envelope with statusCode 400.
    """
    @functools.wraps(func)
    async def wrapper(*args: Any, **kwargs: Any) -> ApiResult:
        name = func.__name__
        started = time.monotonic()
        try:
            results = func(*args, **kwargs)
            if inspect.isawaitable(results):
                results = await results
        except Exception as e:
            logger.exception(name)
            return {'status': ERROR, 'statusCode': 400, 'message': str(e),
                    'version': VERSION, 'duration': _finish(name, ERROR, started)}
        return {'status': OK, 'results': results, 'version': VERSION,
                'duration': _finish(name, OK, started)}
    return wrapper
