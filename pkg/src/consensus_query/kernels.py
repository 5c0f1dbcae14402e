"""Hot-kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` take over.  Setting the environment
variable ``CONSENSUS_QUERY_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py as python_backend

compiled_backend = None
if not os.environ.get("CONSENSUS_QUERY_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

aggregate_batch = _active.aggregate_batch
categorical_draw = _active.categorical_draw
subset_error_count = _active.subset_error_count
vote_loglik = _active.vote_loglik
ess_update = _active.ess_update
cov_logp_grad = _active.cov_logp_grad
cov_hmc = _active.cov_hmc
ncp_logp_grad = _active.ncp_logp_grad
ncp_hmc = _active.ncp_hmc


def backends():
    """Available backends by name, compiled first when present."""
    out = {}
    if compiled_backend is not None:
        out["compiled"] = compiled_backend
    out["python"] = python_backend
    return out
