"""
Structured policy responses
"""
from __future__ import absolute_import

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError

__all__ = ["StructuredResponse", "answer_index"]


@dataclass(frozen=True)
class StructuredResponse(object):
    """
    A single policy output.

    Parameters
    ----------
    format : bool
        format flag (the structured reasoning trace is present)
    answer : int or float or None
        choice index in ``[0, K)`` for choice skills, real value for the
        numeric skill.  ``None`` marks a response with no answer field.
    """

    format: bool
    answer: object = None

    @property
    def has_answer(self):
        return self.answer is not None

    @property
    def is_numeric(self):
        return isinstance(self.answer, (float, np.floating))


def answer_index(sample, response):
    """
    Index of the answer slot selected by `response` on `sample`.

    For choice skills this is the answer itself.  For the numeric skill the
    value is mapped to the nearest candidate value (lower slot on ties).
    """
    if response.answer is None:
        raise ContractError(f"response to sample {sample.id} carries no answer")

    if sample.skill.is_numeric:
        if not response.is_numeric:
            raise ContractError(
                f"numeric sample {sample.id} ({sample.skill.name}) needs a real-valued answer"
            )
        return int(np.argmin(np.abs(np.asarray(sample.answers) - float(response.answer))))

    if response.is_numeric or isinstance(response.answer, bool):
        raise ContractError(
            f"choice sample {sample.id} ({sample.skill.name}) needs an integer answer"
        )
    idx = int(response.answer)
    if not 0 <= idx < len(sample.answers):
        raise ContractError(
            f"answer {idx} out of range for sample {sample.id} with K={len(sample.answers)}"
        )
    return idx
