"""Kernel selection: compiled ``_core`` when importable, else ``_fallback``.

Set ``SETKD_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

if os.environ.get("SETKD_PURE_PYTHON"):
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:  # extension not built
        _impl = _fallback

lsa_lex = _impl.lsa_lex
solve = _impl.solve
box_cost_matrix = _impl.box_cost_matrix
box_loss_grad = _impl.box_loss_grad
padded_cost = _impl.padded_cost
set_loss = _impl.set_loss
attention = _impl.attention
attention_backward = _impl.attention_backward
COMPILED = _impl is not _fallback
