"""Labeled data pools: one in-distribution cluster plus shifted OOD clusters.

Each cluster is a K-class Gaussian mixture. Cluster 0 uses the base class
means; every OOD cluster applies a rigid transform (planar rotation and/or
translation) to those means, so the task stays the same while the input
distribution shifts. Each cluster also carries a disjoint held-out pool used
for generalization scoring.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .seeds import spawn_rng

FORMAT_TAG = "clusters-v1"


class ClusterFileError(ValueError):
    """Malformed cluster file; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


@dataclass(frozen=True)
class Example:
    """One labeled point; ids are unique within a ClusterSet."""

    id: int
    features: tuple[float, ...]
    label: int
    cluster_id: int


@dataclass(frozen=True)
class ClusterShift:
    """Rigid transform defining one OOD cluster's class means.

    ``angle`` rotates every consecutive coordinate pair plane (0,1), (2,3), ...
    by the same amount; ``translation`` is added afterwards.
    """

    angle: float = 0.0
    translation: tuple[float, ...] | None = None


@dataclass(frozen=True)
class GeneratorSpec:
    d: int
    K: int
    per_cluster_size: int
    heldout_per_cluster: int
    base_means: tuple[tuple[float, ...], ...]
    noise_scale: float
    shifts: tuple[ClusterShift, ...]
    seed: int

    def validate(self) -> None:
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.per_cluster_size <= 0:
            raise ValueError("per_cluster_size must be positive")
        if self.heldout_per_cluster <= 0:
            raise ValueError("heldout_per_cluster must be positive")
        if not self.noise_scale > 0:
            raise ValueError("noise_scale must be positive")
        if len(self.base_means) != self.K:
            raise ValueError(f"need K={self.K} base means, got {len(self.base_means)}")
        for i, m in enumerate(self.base_means):
            if len(m) != self.d:
                raise ValueError(f"base mean {i} has {len(m)} entries, expected d={self.d}")
        seen = set(self.base_means)
        if len(seen) != self.K:
            raise ValueError("base class means must be distinct")
        for i, shift in enumerate(self.shifts):
            if shift.translation is not None and len(shift.translation) != self.d:
                raise ValueError(f"shift {i}: translation length != d")

    @property
    def n_ood(self) -> int:
        return len(self.shifts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        shifts = tuple(
            ClusterShift(
                angle=float(s["angle"]),
                translation=None if s.get("translation") is None else tuple(float(v) for v in s["translation"]),
            )
            for s in data["shifts"]
        )
        return cls(
            d=int(data["d"]),
            K=int(data["K"]),
            per_cluster_size=int(data["per_cluster_size"]),
            heldout_per_cluster=int(data["heldout_per_cluster"]),
            base_means=tuple(tuple(float(v) for v in m) for m in data["base_means"]),
            noise_scale=float(data["noise_scale"]),
            shifts=shifts,
            seed=int(data["seed"]),
        )


@dataclass(frozen=True)
class ClusterSet:
    """Training pools and disjoint held-out pools, one pair per cluster."""

    clusters: tuple[tuple[Example, ...], ...]
    heldout: tuple[tuple[Example, ...], ...]
    d: int
    K: int
    gen_spec: GeneratorSpec

    @property
    def n_ood(self) -> int:
        return len(self.clusters) - 1

    def all_examples(self) -> list[Example]:
        out: list[Example] = []
        for pool in self.clusters:
            out.extend(pool)
        for pool in self.heldout:
            out.extend(pool)
        return out


def features_matrix(examples: Sequence[Example]) -> np.ndarray:
    return np.array([e.features for e in examples], dtype=float)


def labels_array(examples: Sequence[Example]) -> np.ndarray:
    return np.array([e.label for e in examples], dtype=int)


def _pairwise_rotation(d: int, angle: float) -> np.ndarray:
    """Block-diagonal rotation by ``angle`` in planes (0,1), (2,3), ..."""
    rot = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    for j in range(0, d - 1, 2):
        rot[j, j] = c
        rot[j, j + 1] = -s
        rot[j + 1, j] = s
        rot[j + 1, j + 1] = c
    return rot


def cluster_means(spec: GeneratorSpec, cluster_id: int) -> np.ndarray:
    """Class means of one cluster: identity transform for cluster 0."""
    base = np.array(spec.base_means, dtype=float)
    if cluster_id == 0:
        return base
    shift = spec.shifts[cluster_id - 1]
    means = base @ _pairwise_rotation(spec.d, shift.angle).T
    if shift.translation is not None:
        means = means + np.array(shift.translation, dtype=float)
    return means


def _draw_pool(
    rng: np.random.Generator,
    means: np.ndarray,
    size: int,
    noise_scale: float,
    cluster_id: int,
    start_id: int,
) -> tuple[Example, ...]:
    k = means.shape[0]
    labels = rng.integers(0, k, size=size)
    feats = means[labels] + noise_scale * rng.standard_normal((size, means.shape[1]))
    return tuple(
        Example(
            id=start_id + i,
            features=tuple(float(v) for v in feats[i]),
            label=int(labels[i]),
            cluster_id=cluster_id,
        )
        for i in range(size)
    )


def generate_clusters(spec: GeneratorSpec) -> ClusterSet:
    """Deterministically sample all training and held-out pools from ``spec``."""
    spec.validate()
    n_clusters = spec.n_ood + 1
    clusters: list[tuple[Example, ...]] = []
    heldout: list[tuple[Example, ...]] = []
    next_id = 0
    for cid in range(n_clusters):
        means = cluster_means(spec, cid)
        rng = spawn_rng(spec.seed, "cluster", cid)
        pool = _draw_pool(rng, means, spec.per_cluster_size, spec.noise_scale, cid, next_id)
        next_id += len(pool)
        clusters.append(pool)
    for cid in range(n_clusters):
        means = cluster_means(spec, cid)
        rng = spawn_rng(spec.seed, "heldout", cid)
        pool = _draw_pool(rng, means, spec.heldout_per_cluster, spec.noise_scale, cid, next_id)
        next_id += len(pool)
        heldout.append(pool)
    return ClusterSet(
        clusters=tuple(clusters),
        heldout=tuple(heldout),
        d=spec.d,
        K=spec.K,
        gen_spec=spec,
    )


def default_generator_spec(seed: int = 7) -> GeneratorSpec:
    """Desk-scale benchmark: 5 classes in 8 dims, 5 OOD clusters.

    Class means sit on scaled axes; OOD rotations are large enough that a
    model trained on cluster 0 errs on well over 30% of OOD queries.
    """
    d, k = 8, 5
    scale = 3.0
    means = []
    for j in range(k):
        m = [0.0] * d
        m[j] = scale
        means.append(tuple(m))
    angles = (0.40, 0.55, 0.70, 0.85, 1.00)
    shifts = tuple(ClusterShift(angle=a * np.pi) for a in angles)
    return GeneratorSpec(
        d=d,
        K=k,
        per_cluster_size=1200,
        heldout_per_cluster=200,
        base_means=tuple(means),
        noise_scale=0.8,
        shifts=shifts,
        seed=seed,
    )


# --- persistence ------------------------------------------------------------
#
# Line-delimited text. First line is a header record:
#   #clusters-v1 <TAB> {"d":..,"K":..,"N":..,"gen_spec":{...}}
# then one example per line, fields in this fixed order:
#   id <TAB> cluster_id <TAB> split <TAB> label <TAB> features (space-separated)
# with split in {train, heldout}. Floats use repr so files round-trip exactly.


def clusters_to_bytes(cs: ClusterSet) -> bytes:
    header = {
        "d": cs.d,
        "K": cs.K,
        "N": cs.n_ood,
        "gen_spec": cs.gen_spec.to_dict(),
    }
    lines = [f"#{FORMAT_TAG}\t{json.dumps(header, sort_keys=True)}"]
    for split, pools in (("train", cs.clusters), ("heldout", cs.heldout)):
        for pool in pools:
            for ex in pool:
                feats = " ".join(repr(v) for v in ex.features)
                lines.append(f"{ex.id}\t{ex.cluster_id}\t{split}\t{ex.label}\t{feats}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def clusters_digest(cs: ClusterSet) -> str:
    return hashlib.sha256(clusters_to_bytes(cs)).hexdigest()


def save_clusters(cs: ClusterSet, path: str | Path) -> None:
    Path(path).write_bytes(clusters_to_bytes(cs))


def _parse_example(line: str, line_no: int, d: int, k: int, n: int) -> tuple[Example, str]:
    parts = line.split("\t")
    if len(parts) != 5:
        raise ClusterFileError(f"expected 5 tab-separated fields, got {len(parts)}", line_no)
    raw_id, raw_cid, split, raw_label, raw_feats = parts
    try:
        ex_id = int(raw_id)
    except ValueError:
        raise ClusterFileError(f"field 'id': not an integer: {raw_id!r}", line_no)
    try:
        cid = int(raw_cid)
    except ValueError:
        raise ClusterFileError(f"field 'cluster_id': not an integer: {raw_cid!r}", line_no)
    if split not in ("train", "heldout"):
        raise ClusterFileError(f"field 'split': expected train|heldout, got {split!r}", line_no)
    try:
        label = int(raw_label)
    except ValueError:
        raise ClusterFileError(f"field 'label': not an integer: {raw_label!r}", line_no)
    try:
        feats = tuple(float(v) for v in raw_feats.split())
    except ValueError:
        raise ClusterFileError("field 'features': non-numeric entry", line_no)
    if len(feats) != d:
        raise ClusterFileError(f"field 'features': expected {d} values, got {len(feats)}", line_no)
    if not all(np.isfinite(feats)):
        raise ClusterFileError("field 'features': non-finite entry", line_no)
    if not 0 <= label < k:
        raise ClusterFileError(f"example id {ex_id}: label {label} out of range [0, {k})", line_no)
    if not 0 <= cid <= n:
        raise ClusterFileError(f"example id {ex_id}: cluster_id {cid} out of range [0, {n}]", line_no)
    return Example(id=ex_id, features=feats, label=label, cluster_id=cid), split


def load_clusters(path: str | Path) -> ClusterSet:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"#{FORMAT_TAG}\t"):
        raise ClusterFileError(f"missing '{FORMAT_TAG}' header record", 1)
    try:
        header = json.loads(lines[0].split("\t", 1)[1])
        d, k, n = int(header["d"]), int(header["K"]), int(header["N"])
        gen_spec = GeneratorSpec.from_dict(header["gen_spec"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ClusterFileError(f"bad header record: {exc}", 1)
    train: list[list[Example]] = [[] for _ in range(n + 1)]
    heldout: list[list[Example]] = [[] for _ in range(n + 1)]
    seen_ids: set[int] = set()
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        ex, split = _parse_example(line, line_no, d, k, n)
        if ex.id in seen_ids:
            raise ClusterFileError(f"duplicate example id {ex.id}", line_no)
        seen_ids.add(ex.id)
        (train if split == "train" else heldout)[ex.cluster_id].append(ex)
    for cid in range(n + 1):
        if not train[cid]:
            raise ClusterFileError(f"cluster {cid}: empty training pool")
        if not heldout[cid]:
            raise ClusterFileError(f"cluster {cid}: empty held-out pool")
    return ClusterSet(
        clusters=tuple(tuple(p) for p in train),
        heldout=tuple(tuple(p) for p in heldout),
        d=d,
        K=k,
        gen_spec=gen_spec,
    )
