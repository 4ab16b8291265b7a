"""
This sets up optional values
"""
from __future__ import absolute_import

FASTMATH = "fastmath"
CACHE = "cache"
STD_GUARD = "std_guard"
MAX_PL_ITEMS = "max_pl_items"
DIVERGENCE_RATIO = "divergence_ratio"


OPTIONS = {
    FASTMATH: False,
    CACHE: True,
    STD_GUARD: 1e-8,
    MAX_PL_ITEMS: 6,
    DIVERGENCE_RATIO: 1.10,
}


def _isbool(x):
    return isinstance(x, bool)


def _isint(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _ispositive(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0


_VALIDATORS = {
    FASTMATH: _isbool,
    CACHE: _isbool,
    STD_GUARD: _ispositive,
    MAX_PL_ITEMS: _isint,
    DIVERGENCE_RATIO: _ispositive,
}

_SETTERS = {}


class set_options(object):
    """Set options for dppo in a controlled context.

    Currently supported options:

    - `fastmath` : numba fastmath for jitted kernels.  Kept off by default
      so the stagnation and Plackett-Luce kernels are bit-reproducible.
    - `cache` : numba on-disk cache.
    - `std_guard` : constant added to the group std in GRPO weights.
    - `max_pl_items` : largest ranking length enumerated by
      :func:`dppo.prefcheck.pl_normalization_check`.
    - `divergence_ratio` : SFT phase aborts if final NLL exceeds
      initial NLL by this factor.

    You can use ``set_options`` either as a context manager:

    >>> with set_options(std_guard=1e-6):
    ...     params = grpo_step(params, ref, groups, lr=0.1)
    ...

    Or to set global options:

    >>> set_options(max_pl_items=5)
    """

    def __init__(self, **kwargs):
        self.old = {}
        for k, v in kwargs.items():
            if k not in OPTIONS:
                raise ValueError(
                    "argument name %r is not in the set of valid options %r"
                    % (k, set(OPTIONS))
                )
            if k in _VALIDATORS and not _VALIDATORS[k](v):
                raise ValueError(f"option {k!r} given an invalid value: {v!r}")
            self.old[k] = OPTIONS[k]
        self._apply_update(kwargs)

    def _apply_update(self, options_dict):
        for k, v in options_dict.items():
            if k in _SETTERS:
                _SETTERS[k](v)
        OPTIONS.update(options_dict)

    def __enter__(self):
        return

    def __exit__(self, type, value, traceback):
        self._apply_update(self.old)
