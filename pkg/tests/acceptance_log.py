"""Collects one pass/fail line per acceptance criterion."""

import contextlib
from dataclasses import dataclass


@dataclass
class Outcome:
    number: int
    title: str
    passed: bool = False
    detail: str = ""


RESULTS = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record the outcome of the enclosed checks; assertion failures propagate."""
    outcome = Outcome(number, title)
    RESULTS[number] = outcome
    try:
        yield outcome
    except BaseException as exc:
        outcome.detail = (outcome.detail + "; " if outcome.detail else "") + f"{type(exc).__name__}: {exc}".split("\n")[0]
        raise
    outcome.passed = True


def lines():
    return [f"criterion {o.number:2d} {'PASS' if o.passed else 'FAIL'}  {o.title}" + (f"  [{o.detail}]" if o.detail else "")
            for o in (RESULTS[k] for k in sorted(RESULTS))]
