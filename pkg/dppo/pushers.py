"""
low level routines to do pushing

Rollout outcomes are pushed into an integer count table with one row per
sample and two columns, ``(T, successes)``.  An epoch table tracks which
epoch each row currently describes: pushing an outcome from a newer epoch
restarts that row's counters.
"""
from __future__ import absolute_import

from .utils import myjit

COUNT_T = 0
COUNT_SUCCESS = 1


@myjit
def _push_rollout(counts, epochs, row, epoch, success):
    if epoch > epochs[row]:
        epochs[row] = epoch
        counts[row, COUNT_T] = 0
        counts[row, COUNT_SUCCESS] = 0
    elif epoch < epochs[row]:
        # stale outcome from an already superseded epoch
        return

    counts[row, COUNT_T] += 1
    if success:
        counts[row, COUNT_SUCCESS] += 1


@myjit
def _push_rollouts(counts, epochs, rows, epoch, successes):
    ns = rows.shape[0]
    for s in range(ns):
        _push_rollout(counts, epochs, rows[s], epoch, successes[s])


@myjit
def _success_rates(counts, out):
    n = counts.shape[0]
    for i in range(n):
        t = counts[i, COUNT_T]
        if t > 0:
            out[i] = counts[i, COUNT_SUCCESS] / t
        else:
            out[i] = -1.0


_PUSHERS = {False: _push_rollout, True: _push_rollouts}


def factory_pushers(vec=True):
    """
    select a pusher

    Parameters
    ----------
    vec : bool
        if True, push arrays of outcomes sharing one epoch
    """
    return _PUSHERS[vec]
