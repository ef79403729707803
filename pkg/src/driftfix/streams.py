"""Query streams with controllable non-stationarity.

Each episode of size b mixes three sources: the in-distribution cluster V_0
(a share that decays geometrically with factor alpha), the current major OOD
cluster (a gamma share of the OOD budget), and the remaining OOD clusters.
The major cluster evolves as a Markov chain with stay-probability beta.

Per-episode budgets:
    b_u  = round(b * alpha^(t-1))     examples from V_0
    b_o  = b - b_u                    total OOD examples
    b_o' = round(b_o * gamma)         from the major cluster
with round() half-away-from-zero. Draws are uniform without replacement
within an episode; by default the same example may recur in later episodes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .clusters import ClusterSet, Example, clusters_digest
from .seeds import derive_seed, spawn_rng

FORMAT_TAG = "stream-v1"


class PoolExhaustedError(ValueError):
    """An episode demanded more examples than a cluster pool can supply."""


class StreamFileError(ValueError):
    """Malformed or mismatched stream file."""


@dataclass(frozen=True)
class StreamConfig:
    T: int
    b: int
    alpha: float
    beta: float
    gamma: float
    seed: int
    heldout_per_cluster: int = 100
    replace_across_episodes: bool = True

    def validate(self) -> None:
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.b < 1:
            raise ValueError(f"b must be >= 1, got {self.b}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.heldout_per_cluster < 1:
            raise ValueError("heldout_per_cluster must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "StreamConfig":
        return cls(
            T=int(data["T"]),
            b=int(data["b"]),
            alpha=float(data["alpha"]),
            beta=float(data["beta"]),
            gamma=float(data["gamma"]),
            seed=int(data["seed"]),
            heldout_per_cluster=int(data.get("heldout_per_cluster", 100)),
            replace_across_episodes=bool(data.get("replace_across_episodes", True)),
        )


class EpisodeBudget(NamedTuple):
    upstream: int
    ood: int
    ood_major: int


@dataclass(frozen=True)
class Episode:
    t: int
    examples: tuple[Example, ...]
    major_cluster: int
    budget: EpisodeBudget


@dataclass(frozen=True)
class QueryStream:
    config: StreamConfig
    episodes: tuple[Episode, ...]
    heldout_set: tuple[Example, ...]
    role: str | None = None


def round_half_away(x: float) -> int:
    """round() with .5 away from zero (budgets are non-negative)."""
    if x < 0:
        return -int(math.floor(-x + 0.5))
    return int(math.floor(x + 0.5))


def episode_budget(t: int, config: StreamConfig) -> EpisodeBudget:
    """Budget split for episode t (1-based)."""
    if t < 1:
        raise ValueError(f"episode index must be >= 1, got {t}")
    b_u = round_half_away(config.b * config.alpha ** (t - 1))
    b_o = config.b - b_u
    b_major = round_half_away(b_o * config.gamma)
    return EpisodeBudget(upstream=b_u, ood=b_o, ood_major=b_major)


def next_major_cluster(c_prev: int, n_clusters: int, beta: float, rng: np.random.Generator) -> int:
    """Markov transition: stay with probability beta, else jump uniformly."""
    if n_clusters < 1:
        raise ValueError("need at least one OOD cluster")
    if not 1 <= c_prev <= n_clusters:
        raise ValueError(f"c_prev must be in [1, {n_clusters}], got {c_prev}")
    if n_clusters == 1:
        return c_prev
    if rng.random() < beta:
        return c_prev
    others = [c for c in range(1, n_clusters + 1) if c != c_prev]
    return int(others[rng.integers(0, len(others))])


def _draw(
    pool: Sequence[Example],
    count: int,
    rng: np.random.Generator,
    what: str,
) -> list[Example]:
    if count == 0:
        return []
    if count > len(pool):
        raise PoolExhaustedError(
            f"{what}: needs {count} examples but only {len(pool)} available"
        )
    idx = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in idx]


def sample_stream(clusters: ClusterSet, config: StreamConfig) -> QueryStream:
    """Sample one stream of T episodes plus its matched held-out set.

    Deterministic given ``config.seed``. Episode draw order is fixed:
    major-cluster transition, then the V_0 / major / non-major picks, and the
    held-out set last.
    """
    config.validate()
    n = clusters.n_ood
    rng = spawn_rng(config.seed, "stream")

    # mutable views of the pools so the no-global-replacement mode can consume them
    train_pools: list[list[Example]] = [list(p) for p in clusters.clusters]

    episodes: list[Episode] = []
    c_prev: int | None = None
    for t in range(1, config.T + 1):
        budget = episode_budget(t, config)
        if n >= 1:
            if c_prev is None:
                c_t = int(rng.integers(1, n + 1))
            else:
                c_t = next_major_cluster(c_prev, n, config.beta, rng)
        else:
            c_t = 0
            if budget.ood > 0:
                raise PoolExhaustedError(
                    f"episode {t}: OOD budget {budget.ood} but the cluster set has no OOD clusters"
                )
        picks: list[Example] = []
        picks += _draw(train_pools[0], budget.upstream, rng, f"episode {t}: cluster 0")
        if budget.ood > 0:
            picks += _draw(
                train_pools[c_t], budget.ood_major, rng, f"episode {t}: cluster {c_t}"
            )
            rest = budget.ood - budget.ood_major
            if rest > 0:
                other_pool = [
                    ex for k in range(1, n + 1) if k != c_t for ex in train_pools[k]
                ]
                picks += _draw(
                    other_pool, rest, rng, f"episode {t}: non-major clusters (major={c_t})"
                )
        assert len(picks) == config.b, f"episode {t}: |Q_t| = {len(picks)} != b = {config.b}"
        if not config.replace_across_episodes:
            taken = {ex.id for ex in picks}
            for k in range(n + 1):
                train_pools[k] = [ex for ex in train_pools[k] if ex.id not in taken]
        episodes.append(
            Episode(t=t, examples=tuple(picks), major_cluster=c_t, budget=budget)
        )
        if n >= 1:
            c_prev = c_t

    present = sorted({ex.cluster_id for ep in episodes for ex in ep.examples})
    heldout: list[Example] = []
    for cid in present:
        pool = clusters.heldout[cid]
        take = min(config.heldout_per_cluster, len(pool))
        heldout += _draw(pool, take, rng, f"held-out cluster {cid}")
    return QueryStream(config=config, episodes=tuple(episodes), heldout_set=tuple(heldout))


def sample_stream_family(
    clusters: ClusterSet,
    config: StreamConfig,
    n_validation: int,
    n_test: int,
    base_seed: int,
) -> tuple[list[QueryStream], list[QueryStream]]:
    """Sample n_validation + n_test streams under one configuration.

    Stream i uses the seed derived from (base_seed, "stream", i); the first
    n_validation are tagged validation, the rest test.
    """
    if n_validation < 1 or n_test < 1:
        raise ValueError("need n_validation >= 1 and n_test >= 1")
    validation: list[QueryStream] = []
    test: list[QueryStream] = []
    for i in range(n_validation + n_test):
        cfg = replace(config, seed=derive_seed(base_seed, "stream", i))
        role = "validation" if i < n_validation else "test"
        stream = replace(sample_stream(clusters, cfg), role=role)
        (validation if i < n_validation else test).append(stream)
    return validation, test


# --- persistence ------------------------------------------------------------
#
# Line-delimited text. Header record:
#   #stream-v1 <TAB> {"config": {...}, "clusters_sha256": ..., "role": ...}
# then one line per episode:
#   episode <TAB> t <TAB> major_cluster <TAB> b_u,b_o,b_o' <TAB> ids (space-separated)
# and a final held-out record:
#   heldout <TAB> ids (space-separated)


def stream_to_bytes(stream: QueryStream, clusters_sha256: str) -> bytes:
    header = {
        "config": stream.config.to_dict(),
        "clusters_sha256": clusters_sha256,
        "role": stream.role,
    }
    lines = [f"#{FORMAT_TAG}\t{json.dumps(header, sort_keys=True)}"]
    for ep in stream.episodes:
        ids = " ".join(str(ex.id) for ex in ep.examples)
        bu, bo, bm = ep.budget
        lines.append(f"episode\t{ep.t}\t{ep.major_cluster}\t{bu},{bo},{bm}\t{ids}")
    lines.append("heldout\t" + " ".join(str(ex.id) for ex in stream.heldout_set))
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_stream(stream: QueryStream, path: str | Path, clusters: ClusterSet) -> None:
    Path(path).write_bytes(stream_to_bytes(stream, clusters_digest(clusters)))


def load_stream(path: str | Path, clusters: ClusterSet) -> QueryStream:
    """Rebuild a stream against ``clusters``; verifies the recorded digest."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(f"#{FORMAT_TAG}\t"):
        raise StreamFileError(f"{path}: missing '{FORMAT_TAG}' header record")
    header = json.loads(lines[0].split("\t", 1)[1])
    recorded = header.get("clusters_sha256")
    actual = clusters_digest(clusters)
    if recorded != actual:
        raise StreamFileError(
            f"{path}: cluster digest mismatch (stream was sampled from {recorded}, "
            f"given {actual})"
        )
    config = StreamConfig.from_dict(header["config"])
    by_id = {ex.id: ex for ex in clusters.all_examples()}

    def resolve(raw: str, line_no: int) -> list[Example]:
        out = []
        for tok in raw.split():
            ex = by_id.get(int(tok))
            if ex is None:
                raise StreamFileError(f"{path}: line {line_no}: unknown example id {tok}")
            out.append(ex)
        return out

    episodes: list[Episode] = []
    heldout: tuple[Example, ...] | None = None
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        kind, _, rest = line.partition("\t")
        if kind == "episode":
            t_raw, major_raw, budget_raw, ids_raw = rest.split("\t")
            bu, bo, bm = (int(v) for v in budget_raw.split(","))
            examples = resolve(ids_raw, line_no)
            if len(examples) != config.b:
                raise StreamFileError(
                    f"{path}: line {line_no}: episode has {len(examples)} ids, b={config.b}"
                )
            episodes.append(
                Episode(
                    t=int(t_raw),
                    examples=tuple(examples),
                    major_cluster=int(major_raw),
                    budget=EpisodeBudget(bu, bo, bm),
                )
            )
        elif kind == "heldout":
            heldout = tuple(resolve(rest, line_no))
        else:
            raise StreamFileError(f"{path}: line {line_no}: unknown record kind {kind!r}")
    if len(episodes) != config.T:
        raise StreamFileError(f"{path}: found {len(episodes)} episodes, config says T={config.T}")
    if heldout is None:
        raise StreamFileError(f"{path}: missing held-out record")
    return QueryStream(
        config=config,
        episodes=tuple(episodes),
        heldout_set=heldout,
        role=header.get("role"),
    )
