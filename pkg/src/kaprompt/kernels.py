"""Kernel backend selection.

The compiled extension (``kaprompt._kernels_c``) is used when it imports;
otherwise the numpy fallback. ``KAPROMPT_KERNELS`` forces a choice:
``cython`` (fail if missing), ``python``, or ``auto`` (default).

Callers go through the module-level functions below so that ``set_backend``
takes effect everywhere at once.
"""
import logging
import os

import numpy as np

from kaprompt import _kernels_py

log = logging.getLogger(__name__)

try:
    from kaprompt import _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

_BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    _BACKENDS["cython"] = _kernels_c


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ImportError(f"kernel backend {name!r} is not available "
                          f"(have: {', '.join(available_backends())})") from None


def _initial_backend():
    choice = os.environ.get("KAPROMPT_KERNELS", "auto").lower()
    if choice == "auto":
        return "cython" if "cython" in _BACKENDS else "python"
    get_backend(choice)
    return choice


_active_name = _initial_backend()
_active = _BACKENDS[_active_name]


def backend_name():
    return _active_name


def set_backend(name):
    """Switch the process-wide kernel backend; returns the previous name."""
    global _active, _active_name
    previous = _active_name
    _active = get_backend(name)
    _active_name = name
    return previous


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def attention_forward(q, k, v, n_heads, scale):
    return _active.attention_forward(_c(q), _c(k), _c(v), int(n_heads), float(scale))


def attention_backward(dout, q, k, v, probs, n_heads, scale):
    return _active.attention_backward(_c(dout), _c(q), _c(k), _c(v), _c(probs),
                                      int(n_heads), float(scale))


def layer_norm_forward(x, gamma, beta, eps):
    return _active.layer_norm_forward(_c(x), _c(gamma), _c(beta), float(eps))


def layer_norm_backward(dy, xhat, rstd, gamma):
    return _active.layer_norm_backward(_c(dy), _c(xhat), _c(rstd), _c(gamma))


def coverage_histogram(relation, effect):
    return _active.coverage_histogram(_c(relation), _c(effect))
