import numpy as np
import pytest

from driftfix.clusters import (
    ClusterShift,
    GeneratorSpec,
    default_generator_spec,
    generate_clusters,
)


def small_spec(seed: int = 3, noise: float = 0.5, **overrides) -> GeneratorSpec:
    """Tiny 3-class / 2-OOD-cluster spec for fast tests."""
    base = GeneratorSpec(
        d=4,
        K=3,
        per_cluster_size=150,
        heldout_per_cluster=60,
        base_means=((2.5, 0.0, 0.0, 0.0), (0.0, 2.5, 0.0, 0.0), (0.0, 0.0, 2.5, 0.0)),
        noise_scale=noise,
        shifts=(ClusterShift(angle=0.5 * np.pi), ClusterShift(angle=np.pi)),
        seed=seed,
    )
    if overrides:
        from dataclasses import replace

        base = replace(base, **overrides)
    return base


@pytest.fixture(scope="session")
def small_clusters():
    return generate_clusters(small_spec())


@pytest.fixture(scope="session")
def default_clusters():
    return generate_clusters(default_generator_spec())
