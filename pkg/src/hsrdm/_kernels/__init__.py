"""Kernel backend selection.

The compiled extension is preferred; the numpy module is a drop-in
fallback.  Set ``HSRDM_PURE_PYTHON=1`` to force the fallback (used by
the parity tests and the benchmark).
"""

import os

from . import _chain_np

if os.environ.get("HSRDM_PURE_PYTHON", "") == "1":
    impl = _chain_np
else:
    try:
        from . import _chain_cy as impl  # type: ignore[no-redef]
    except ImportError:
        impl = _chain_np

BACKEND = impl.BACKEND

filter_pass = impl.filter_pass
smooth_pass = impl.smooth_pass
viterbi_path = impl.viterbi_path
catglm_obj_grad = impl.catglm_obj_grad
entity_catglm_obj_grad = impl.entity_catglm_obj_grad
entity_log_trans_tensor = impl.entity_log_trans_tensor


def numpy_backend():
    return _chain_np


def compiled_backend():
    """The compiled module, or None when it failed to build."""
    try:
        from . import _chain_cy
    except ImportError:
        return None
    return _chain_cy
