"""Simulated coordinator/site network with per-round payload accounting.

Server-side code runs inside :func:`~fedci.access.server_scope`; each site
callback runs inside ``site_scope(site_id)`` and may touch only its own
sample and its private ``state`` dict. Messages are copied and frozen on
the way through, and every scalar that crosses the wire is counted in a
:class:`RoundLog`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from ..access import AccessTracker, site_scope
from ..errors import FedCIError, LocalSolverError

__all__ = ["Network", "SiteContext", "RoundLog", "RoundRecord", "payload_size", "freeze"]


def payload_size(obj) -> int:
    """Number of scalars in a message (nested tuples, lists, dicts and arrays)."""
    if obj is None:
        return 0
    if isinstance(obj, np.ndarray):
        return int(obj.size)
    if isinstance(obj, (tuple, list)):
        return sum(payload_size(o) for o in obj)
    if isinstance(obj, dict):
        return sum(payload_size(v) for v in obj.values())
    if np.isscalar(obj):
        return 1
    raise TypeError(f"cannot send a {type(obj).__name__}")


def freeze(obj):
    if isinstance(obj, np.ndarray):
        a = np.array(obj, copy=True)
        a.setflags(write=False)
        return a
    if isinstance(obj, (tuple, list)):
        return tuple(freeze(o) for o in obj)
    if isinstance(obj, dict):
        return {k: freeze(v) for k, v in obj.items()}
    return obj


@dataclass(frozen=True)
class RoundRecord:
    index: int
    label: str
    up: tuple  # scalars sent by each site to the server
    down: tuple  # scalars sent by the server to each site
    p2p: tuple  # scalars sent by each site to its peers

    def to_dict(self):
        return {
            "round": self.index,
            "label": self.label,
            "up": list(self.up),
            "down": list(self.down),
            "p2p": list(self.p2p),
        }


@dataclass
class RoundLog:
    protocol: str
    site_ids: tuple
    rounds: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def total_rounds(self):
        return len(self.rounds)

    def add(self, label, up, down, p2p=None):
        K = len(self.site_ids)
        rec = RoundRecord(
            len(self.rounds) + 1,
            label,
            tuple(int(u) for u in up),
            tuple(int(v) for v in down),
            tuple(int(v) for v in (p2p if p2p is not None else [0] * K)),
        )
        self.rounds.append(rec)
        return rec

    def totals(self):
        return {
            "rounds": self.total_rounds,
            "up": sum(sum(r.up) for r in self.rounds),
            "down": sum(sum(r.down) for r in self.rounds),
            "p2p": sum(sum(r.p2p) for r in self.rounds),
        }

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "site_ids": [str(s) for s in self.site_ids],
            "total_rounds": self.total_rounds,
            "totals": self.totals(),
            "meta": self.meta,
            "rounds": [r.to_dict() for r in self.rounds],
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def csv_rows(self):
        rows = []
        for r in self.rounds:
            for s, u, v, p in zip(self.site_ids, r.up, r.down, r.p2p):
                rows.append([self.protocol, r.index, r.label, str(s), u, v, p])
        return rows

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["protocol", "round", "label", "site", "up", "down", "p2p"])
            w.writerows(self.csv_rows())


class SiteContext:
    """What a site callback sees: its own sample and private state."""

    __slots__ = ("index", "site_id", "sample", "state", "n")

    def __init__(self, index, sample, state):
        self.index = index
        self.site_id = sample.site_id
        self.sample = sample
        self.state = state
        self.n = sample.n


class Network:
    """K sites around a coordinator.

    ``n_k``, ``d`` and site ids are public enrolment metadata. Everything
    else the server learns arrives through :meth:`exchange` or
    :meth:`gossip` and is counted.
    """

    def __init__(self, samples, tracker: AccessTracker | None = None):
        if not samples:
            raise ValueError("a network needs at least one site")
        self._samples = list(samples)
        self._state = [dict() for _ in self._samples]
        self.site_ids = tuple(s.site_id for s in self._samples)
        if len(set(self.site_ids)) != len(self.site_ids):
            raise ValueError("site ids must be unique")
        self.n_k = np.array([s.n for s in self._samples], dtype=float)
        self.d = self._samples[0].d
        self.tracker = tracker if tracker is not None else AccessTracker()

    @property
    def K(self):
        return len(self._samples)

    @property
    def n(self):
        return int(self.n_k.sum())

    @property
    def rho(self):
        return self.n_k / self.n_k.sum()

    def new_log(self, protocol) -> RoundLog:
        return RoundLog(protocol, self.site_ids)

    def _ctx(self, k):
        return SiteContext(k, self._samples[k], self._state[k])

    def local(self, fn, wrap_round=None):
        """Run ``fn(ctx)`` at every site without communicating; results stay private.

        The return values are handed back to the caller only so the
        simulation can read out site-held quantities (personalized models,
        test hooks); protocols never feed them into server computations.
        """
        out = []
        for k in range(self.K):
            with site_scope(self.site_ids[k]):
                out.append(self._call(fn, k, wrap_round, self._ctx(k)))
        return out

    def _call(self, fn, k, round_index, *args):
        try:
            return fn(*args)
        except FedCIError as exc:
            if round_index is None or isinstance(exc, LocalSolverError):
                raise
            raise LocalSolverError(self.site_ids[k], round_index, exc) from exc

    def exchange(self, fn, log: RoundLog, down=None, label="", wrap=False):
        """One server round: broadcast ``down``, collect ``fn(ctx, down)`` from each site."""
        down = freeze(down)
        size_down = payload_size(down)
        index = log.total_rounds + 1
        ups = []
        for k in range(self.K):
            with site_scope(self.site_ids[k]):
                ups.append(freeze(self._call(fn, k, index if wrap else None, self._ctx(k), down)))
        log.add(label, [payload_size(u) for u in ups], [size_down] * self.K)
        return ups

    def gossip(self, send, receive, topology, log: RoundLog, label="", wrap=False):
        """One peer-to-peer round.

        ``send(ctx)`` produces the message a site shares with every
        neighbour; ``receive(ctx, {j: msg_j})`` then updates each site's
        state from its own and its neighbours' messages.
        """
        index = log.total_rounds + 1
        msgs = []
        for k in range(self.K):
            with site_scope(self.site_ids[k]):
                msgs.append(freeze(self._call(send, k, index if wrap else None, self._ctx(k))))
        sent = [payload_size(msgs[k]) * len(topology.neighbors[k]) for k in range(self.K)]
        for k in range(self.K):
            inbox = {j: msgs[j] for j in sorted(topology.neighbors[k] | {k})}
            with site_scope(self.site_ids[k]):
                self._call(receive, k, index if wrap else None, self._ctx(k), inbox)
        log.add(label, [0] * self.K, [0] * self.K, sent)
