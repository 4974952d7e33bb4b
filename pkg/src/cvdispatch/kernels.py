"""Backend selection for the indexing kernels.

Prefers the compiled Cython extension; falls back to the pure-Python
reference when the extension is unavailable. Both expose the same
functions with identical output.
"""

try:
    from . import _ckernels as _impl
except ImportError:  # extension not built
    from . import _pykernels as _impl

from . import _pykernels as reference

BACKEND: str = _impl.BACKEND

fnv1a64 = _impl.fnv1a64
activation_indices_batch = _impl.activation_indices_batch
