"""Discrete-event plumbing: ordered event queue, lossy network links, event log."""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Any

from . import crypto


class EventQueue:
    """Events ordered by (tick, submission sequence); ties break by sequence."""

    def __init__(self):
        self._heap: list[tuple[int, int, Any]] = []
        self._seq = 0

    def push(self, tick: int, event: Any) -> int:
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (tick, seq, event))
        return seq

    def __len__(self) -> int:
        return len(self._heap)

    def __iter__(self):
        return (event for _, _, event in self._heap)

    def next_tick(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def pop_at(self, tick: int) -> Any | None:
        if self._heap and self._heap[0][0] == tick:
            return heapq.heappop(self._heap)[2]
        return None


@dataclass(frozen=True)
class Link:
    delay_min: int = 1
    delay_max: int = 1
    drop_probability: float = 0.0
    duplicate_probability: float = 0.0

    def __post_init__(self):
        if not 1 <= self.delay_min <= self.delay_max:
            raise ValueError("need 1 <= delay_min <= delay_max")
        for p in (self.drop_probability, self.duplicate_probability):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


class Network:
    def __init__(self, links: dict[tuple[str, str], Link] | None = None, default: Link = Link()):
        self.links = dict(links or {})
        self.default = default

    def link(self, src: str, dst: str) -> Link:
        return self.links.get((src, dst), self.default)

    def sample(self, rng: random.Random, src: str, dst: str) -> list[int]:
        """Delivery delays for one send: empty when dropped, two entries when duplicated.

        Always draws the same number of variates so one link's settings never
        shift the random stream seen by another.
        """
        link = self.link(src, dst)
        drop = rng.random()
        dup = rng.random()
        d1 = rng.randint(link.delay_min, link.delay_max)
        d2 = rng.randint(link.delay_min, link.delay_max)
        if drop < link.drop_probability:
            return []
        if dup < link.duplicate_probability:
            return [d1, d2]
        return [d1]


@dataclass
class EventLog:
    lines: list[str] = field(default_factory=list)

    def record(self, tick: int, chain: str, kind: str, payload: bytes, summary: str) -> None:
        digest = crypto.hash(crypto.tagged(crypto.TAG_LOG, payload)).hex()
        summary = summary.replace("\t", " ").replace("\n", " ")
        self.lines.append(f"{tick}\t{chain}\t{kind}\t{digest}\t{summary}")

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)

    def digest(self) -> str:
        return crypto.hash(self.text().encode()).hex()

    def kinds(self, kind: str) -> list[str]:
        return [line for line in self.lines if line.split("\t")[2] == kind]
