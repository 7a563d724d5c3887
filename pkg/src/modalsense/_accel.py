"""Backend switch for the hot kernels.

Numba is used when importable unless ``MODALSENSE_NO_NUMBA`` is set to a
truthy value, in which case every kernel falls back to its numpy path.
"""
import logging
import os

logger = logging.getLogger(__name__)

_DISABLED = os.environ.get("MODALSENSE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("disabled by MODALSENSE_NO_NUMBA")
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError as exc:  # pragma: no cover - depends on environment
    HAS_NUMBA = False
    logger.debug("numba unavailable (%s); using numpy kernels", exc)


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a no-op decorator."""
    if HAS_NUMBA:
        return _njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
