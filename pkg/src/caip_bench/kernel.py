"""Deterministic discrete-event kernel: virtual clock, event queue, seeded RNG.

The random number generator is pinned bit-exactly (PCG32, see ``Pcg32``)
so that traces produced with the same seed are identical across platforms
and toolchain versions.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Optional


class SchedulingInPast(Exception):
    """An event was scheduled before the current clock: a logic bug."""


class EmptyQueue(Exception):
    """advance() was called on an empty event queue."""


# --- seeded RNG -------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1
_PCG_MULTIPLIER = 6364136223846793005
# Default stream constant from the PCG reference implementation (pcg_basic.c).
_PCG_DEFAULT_STREAM = 0xDA3E39CB94B95BDB


class Pcg32:
    """PCG32 generator, bit-exact with the C reference (pcg32_random_r).

    Seeding follows pcg32_srandom_r with ``initstate = seed`` and
    ``initseq`` fixed to the reference default stream:

        state = 0; inc = (initseq << 1) | 1
        next_u32(); state += seed; next_u32()

    Each ``next_u32`` step computes (all arithmetic mod 2**64)::

        old       = state
        state     = old * 6364136223846793005 + inc
        xorshifted = ((old >> 18) ^ old) >> 27   (low 32 bits)
        rot        = old >> 59
        output     = xorshifted rotated right by rot (32-bit)

    ``uniform_int(bound)`` returns ``next_u32() % (bound + 1)`` for
    bound > 0 and returns 0 *without consuming a draw* for bound == 0,
    so zero-jitter links never advance the generator.
    """

    __slots__ = ("_state", "_inc")

    def __init__(self, seed: int, stream: int = _PCG_DEFAULT_STREAM) -> None:
        self._state = 0
        self._inc = ((stream << 1) | 1) & _MASK64
        self.next_u32()
        self._state = (self._state + (seed & _MASK64)) & _MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self._state
        self._state = (old * _PCG_MULTIPLIER + self._inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & _MASK32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & _MASK32

    def uniform_int(self, bound: int) -> int:
        """Uniform integer in [0, bound], inclusive."""
        if bound < 0:
            raise ValueError(f"negative bound: {bound}")
        if bound == 0:
            return 0
        return self.next_u32() % (bound + 1)


# --- events and queue -------------------------------------------------------

@dataclass(frozen=True)
class SimEvent:
    """One scheduled occurrence: a delivery, a timer expiry, or a script step.

    ``kind`` is a short discriminant string; ``payload`` carries the
    kind-specific data (message envelope, timer id, script entry).
    """

    fire_at: int
    seq: int
    kind: str
    payload: Any = None

    KIND_DELIVERY = "delivery"
    KIND_TIMER = "timer"
    KIND_INJECTION = "injection"


class EventQueue:
    """Min-queue ordered by (fire_at, insertion seq): FIFO among equal times."""

    def __init__(self) -> None:
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._next_seq = 0
        self.clock = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, fire_at: int, kind: str, payload: Any = None) -> SimEvent:
        if fire_at < self.clock:
            raise SchedulingInPast(
                f"fire_at={fire_at} before clock={self.clock} (kind={kind})"
            )
        event = SimEvent(fire_at=fire_at, seq=self._next_seq, kind=kind, payload=payload)
        self._next_seq += 1
        heapq.heappush(self._heap, (event.fire_at, event.seq, event))
        return event

    def advance(self) -> SimEvent:
        """Pop the minimum-(fire_at, seq) event and move the clock to it."""
        if not self._heap:
            raise EmptyQueue("advance() on empty queue")
        _, _, event = heapq.heappop(self._heap)
        self.clock = event.fire_at
        return event


# --- link latency model -----------------------------------------------------

@dataclass(frozen=True)
class LinkModel:
    """Directed link with base latency, uniform jitter, and a priority discount.

    The discount applies to traffic on flows carrying a prioritized
    association; it never drives the delay negative (invariant:
    0 <= priority_discount <= base_latency).
    """

    src: str
    dst: str
    base_latency: int
    jitter_bound: int = 0
    priority_discount: int = 0

    def __post_init__(self) -> None:
        if self.base_latency < 0:
            raise ValueError(f"base_latency < 0 on {self.src}->{self.dst}")
        if self.jitter_bound < 0:
            raise ValueError(f"jitter_bound < 0 on {self.src}->{self.dst}")
        if not 0 <= self.priority_discount <= self.base_latency:
            raise ValueError(
                f"priority_discount outside [0, base_latency] on {self.src}->{self.dst}"
            )


def sample_link_delay(link: LinkModel, rng: Pcg32, prioritized: bool) -> int:
    """Delay = base - (discount if prioritized) + uniform jitter in [0, bound]."""
    delay = link.base_latency
    if prioritized:
        delay -= link.priority_discount
    delay += rng.uniform_int(link.jitter_bound)
    return delay
