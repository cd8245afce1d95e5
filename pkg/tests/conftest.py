"""Shared builders for randomized test datasets."""

import itertools

import numpy as np

from cluster_qini.data import ClusterDataset, PolicyAssignment, PropensityModel


def random_dataset(rng, n_clusters=None, max_size=3, d_x=2, d_z=2, binary_y=False):
    """A small ragged dataset with random treatments and outcomes.

    With ``binary_y`` each cluster has at most one unit outcome of 1, so
    cluster totals are binary like the simulator's purchase indicator.
    """
    if n_clusters is None:
        n_clusters = int(rng.integers(1, 6))
    sizes = rng.integers(1, max_size + 1, size=n_clusters)
    n_units = int(sizes.sum())
    w = rng.integers(0, 2, size=n_units)
    if binary_y:
        y = np.zeros(n_units)
        offset = 0
        for size in sizes:
            if rng.uniform() < 0.5:
                y[offset + int(rng.integers(size))] = 1.0
            offset += int(size)
    else:
        y = rng.normal(size=n_units)
    c = w * rng.uniform(0.0, 2.0, size=n_units)
    return ClusterDataset(
        x=rng.uniform(size=(n_clusters, d_x)),
        z=rng.uniform(size=(n_units, d_z)),
        w=w,
        y=y,
        c=c,
        sizes=sizes,
    )


def random_assignment(rng, dataset):
    return PolicyAssignment(rng.integers(0, 2, size=dataset.n_units), dataset.sizes)


def constant_propensity(p=0.5):
    return PropensityModel.constant(p)


def enumerate_treatments(m):
    """All 2^m binary treatment vectors of a cluster, as int8 arrays."""
    return [np.array(w, dtype=np.int8) for w in itertools.product((0, 1), repeat=m)]


def config_probability(w, e1):
    """Design probability of one treatment vector under iid Bernoulli(e1)."""
    w = np.asarray(w)
    return float(np.prod(np.where(w == 1, e1, 1.0 - e1)))
