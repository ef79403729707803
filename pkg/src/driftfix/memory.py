"""Bi-memory replay store and the replay-selection strategies.

The store keeps two pools: a fixed upstream pool and a growing pool of past
online errors. Selections draw half from each side (backfilling from the
other on shortfall). Conditional strategies rank a random candidate pool by
scores computed against a throwaway "virtual" model fine-tuned on the
current errors:

    MaxLoss:      score = loss under the virtual model
    interference: score = loss under the virtual model - loss under f_prev
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .clusters import Example
from .learner import LearnerState, example_losses, fine_tune

STRATEGIES = ("random", "maxloss", "mir")


@dataclass(frozen=True)
class BiMemory:
    upstream: tuple[Example, ...]
    online: tuple[tuple[Example, int], ...]  # (example, insertion timestep)
    online_capacity: int | None = None
    evicted_ids: tuple[int, ...] = ()

    @classmethod
    def from_upstream(
        cls, pool: Sequence[Example], online_capacity: int | None = None
    ) -> "BiMemory":
        return cls(upstream=tuple(pool), online=(), online_capacity=online_capacity)

    def online_examples(self) -> list[Example]:
        return [ex for ex, _ in self.online]

    def size(self) -> int:
        return len(self.upstream) + len(self.online)

    def audit(self) -> dict:
        """Dump for the run log: ids and insertion timesteps only."""
        return {
            "upstream_ids": [ex.id for ex in self.upstream],
            "online": [[ex.id, t] for ex, t in self.online],
            "online_capacity": self.online_capacity,
            "evicted_ids": list(self.evicted_ids),
        }


def memory_write(mem: BiMemory, errors: Sequence[Example], t: int) -> BiMemory:
    """Append the step-t errors to the online pool; upstream never changes.

    When a capacity is set, the oldest online entries are evicted first and
    their ids recorded.
    """
    if not errors:
        return mem
    online = list(mem.online) + [(ex, t) for ex in errors]
    evicted = list(mem.evicted_ids)
    if mem.online_capacity is not None and len(online) > mem.online_capacity:
        overflow = len(online) - mem.online_capacity
        evicted += [ex.id for ex, _ in online[:overflow]]
        online = online[overflow:]
    return BiMemory(
        upstream=mem.upstream,
        online=tuple(online),
        online_capacity=mem.online_capacity,
        evicted_ids=tuple(evicted),
    )


@dataclass(frozen=True)
class ReplaySelection:
    chosen: tuple[Example, ...]
    scores: tuple[float, ...] | None
    candidate_pool_size: int
    strategy: str


def _draw_side(pool: list[Example], count: int, rng: np.random.Generator) -> list[Example]:
    if count == 0 or not pool:
        return []
    count = min(count, len(pool))
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in idx]


def _balanced_draw(mem: BiMemory, size: int, rng: np.random.Generator) -> list[Example]:
    """Half upstream, half online (online gets the odd extra), with backfill."""
    upstream = sorted(mem.upstream, key=lambda e: e.id)
    online = sorted(mem.online_examples(), key=lambda e: e.id)
    total = len(upstream) + len(online)
    if size >= total:
        return upstream + online
    want_u = size // 2
    want_o = size - want_u
    take_u = min(want_u, len(upstream))
    take_o = min(want_o, len(online))
    short = size - (take_u + take_o)
    if short > 0:
        # backfill from whichever side has room; size < total so it fits
        extra_u = min(short, len(upstream) - take_u)
        take_u += extra_u
        take_o += short - extra_u
    return _draw_side(upstream, take_u, rng) + _draw_side(online, take_o, rng)


def select_random(mem: BiMemory, r: int, rng: np.random.Generator) -> ReplaySelection:
    """Uniform bi-balanced draw of r examples; empty when both pools are empty."""
    if r < 1:
        raise ValueError(f"replay size must be >= 1, got {r}")
    chosen = _balanced_draw(mem, r, rng)
    return ReplaySelection(
        chosen=tuple(sorted(chosen, key=lambda e: e.id)),
        scores=None,
        candidate_pool_size=mem.size(),
        strategy="random",
    )


def score_interference(
    f_prev: LearnerState, f_virtual: LearnerState, candidates: Sequence[Example]
) -> np.ndarray:
    """Loss delta per candidate: virtual-model loss minus f_prev loss."""
    if not candidates:
        raise ValueError("score_interference needs candidates")
    return example_losses(f_virtual, candidates) - example_losses(f_prev, candidates)


def score_maxloss(f_virtual: LearnerState, candidates: Sequence[Example]) -> np.ndarray:
    """Per-candidate loss under the virtual model only."""
    if not candidates:
        raise ValueError("score_maxloss needs candidates")
    return example_losses(f_virtual, candidates)


def select_conditional(
    mem: BiMemory,
    f_prev: LearnerState,
    errors: Sequence[Example],
    r: int,
    c: int,
    strategy: str,
    lr: float,
    virt_epochs: int,
    rng: np.random.Generator,
    batch_size: int = 8,
) -> ReplaySelection:
    """Score a random candidate pool of size c and keep the top r.

    The virtual model is f_prev fine-tuned on the current errors for
    ``virt_epochs`` epochs. Ties are broken by ascending example id. With
    strategy "random" this reduces to ``select_random`` (scores ignored,
    identical rng draws).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    if r > c:
        raise ValueError(f"replay size r={r} must not exceed candidate pool c={c}")
    if strategy == "random":
        return select_random(mem, r, rng)
    candidates = _balanced_draw(mem, c, rng)
    if not candidates:
        return ReplaySelection(chosen=(), scores=None, candidate_pool_size=0, strategy=strategy)
    if virt_epochs > 0 and errors:
        f_virtual = fine_tune(f_prev, errors, lr, virt_epochs, batch_size=batch_size)
    else:
        f_virtual = f_prev
    if strategy == "maxloss":
        scores = score_maxloss(f_virtual, candidates)
    else:
        scores = score_interference(f_prev, f_virtual, candidates)
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], candidates[i].id))
    top = order[: min(r, len(candidates))]
    return ReplaySelection(
        chosen=tuple(candidates[i] for i in top),
        scores=tuple(float(scores[i]) for i in top),
        candidate_pool_size=len(candidates),
        strategy=strategy,
    )
