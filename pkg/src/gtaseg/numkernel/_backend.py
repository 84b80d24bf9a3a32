"""Kernel backend selection.

The compiled extension is preferred; set ``GTASEG_PURE=1`` to force the numpy
fallback (the benchmark and the backend-parity tests do this per import).
"""

import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

_ext = None
if os.environ.get("GTASEG_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _ext
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")

if _ext is not None:
    BACKEND = "cython"
    im2col = _ext.im2col
    col2im = _ext.col2im
    softmax_ce = _ext.softmax_ce
else:
    BACKEND = "numpy"
    im2col = _fallback.im2col
    col2im = _fallback.col2im
    softmax_ce = _fallback.softmax_ce
