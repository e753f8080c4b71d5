"""Row-access scopes for site data.

Every read of a :class:`~fedci.dgp.SiteSample` row array goes through
:func:`check_access`. Outside any scope reads are unrestricted (oracles and
tests build pooled data on purpose). Inside :func:`server_scope` no rows may
be read at all, and inside ``site_scope(k)`` only site ``k``'s rows may.
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import Counter

from .errors import FederationViolation

SERVER = "server"

_scope: contextvars.ContextVar = contextvars.ContextVar("fedci_scope", default=None)
_tracker: contextvars.ContextVar = contextvars.ContextVar("fedci_tracker", default=None)


class AccessTracker:
    """Counts row reads by (scope, site owning the rows)."""

    def __init__(self):
        self.reads = Counter()

    def record(self, scope, owner):
        self.reads[(scope, owner)] += 1

    @property
    def cross_site_reads(self):
        return {key: c for key, c in self.reads.items() if key[0] != key[1]}


def current_scope():
    return _scope.get()


def check_access(owner):
    scope = _scope.get()
    if scope is None:
        return
    tracker = _tracker.get()
    if tracker is not None:
        tracker.record(scope, owner)
    if scope != owner:
        who = "the server" if scope == SERVER else f"site {scope}"
        raise FederationViolation(f"{who} attempted to read rows owned by site {owner}")


@contextlib.contextmanager
def server_scope(tracker: AccessTracker | None = None):
    token = _scope.set(SERVER)
    ttoken = _tracker.set(tracker) if tracker is not None else None
    try:
        yield
    finally:
        if ttoken is not None:
            _tracker.reset(ttoken)
        _scope.reset(token)


@contextlib.contextmanager
def site_scope(site_id):
    token = _scope.set(site_id)
    try:
        yield
    finally:
        _scope.reset(token)
