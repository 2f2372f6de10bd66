"""Shared fixtures: tiny hand-built bundles and the frozen benchmark scenario."""

from __future__ import annotations

import numpy as np
import pytest

from rvrank.datastore import build_bundle
from rvrank.synthgen import SynthConfig, generate

# The acceptance scenario: tuned once so that plain retrieval is well below
# 0.6 rank-1 while the planted part details make verification easy, then
# frozen.  42 test identities in confuser groups of 4.
SCENARIO = SynthConfig(n_identities=140, clothes_per_identity=3,
                       images_per_cloth=2, confuser_group_size=4,
                       feature_dim=32, part_dim=8, part_count=15,
                       identity_shift=0.2, cloth_shift=1.0, general_noise=0.3,
                       detail_noise=0.0, part_dropout=0.0, seed=0)


@pytest.fixture(scope="session")
def scenario():
    """(bundle, ground truth) for the frozen scenario; generated once."""
    return generate(SCENARIO)


def random_bundle(rng: np.random.Generator, *, n_query: int = 4,
                  n_gallery: int = 12, n_identities: int = 5, n_cloths: int = 3,
                  dims: tuple[int, int, int] = (6, 4, 5),
                  part_presence: float = 1.0):
    """A random two-split (Q/G) bundle for metric and ranking tests."""
    d, dp, k = dims
    rows = []
    feats = []
    present = []
    parts = []
    for role, count in (("Q", n_query), ("G", n_gallery)):
        for i in range(count):
            rows.append((i, role, int(rng.integers(n_identities)),
                         int(rng.integers(n_cloths)), int(rng.integers(4))))
            feats.append(rng.normal(size=d))
            present.append(rng.random(k) < part_presence)
            parts.append(rng.normal(size=(k, dp)))
    return build_bundle(rows, np.stack(feats), np.stack(present), np.stack(parts))


def eligible_orders(rng: np.random.Generator, bundle) -> list[list[int]]:
    """A random full permutation of the eligible gallery per query."""
    gallery = bundle.splits["G"]
    orders = []
    for query in bundle.splits["Q"]:
        elig = [g.index for g in gallery
                if not (g.identity == query.identity and g.cloth == query.cloth)]
        orders.append([elig[i] for i in rng.permutation(len(elig))])
    return orders


def oracle_metrics(bundle, orders, k_max):
    """Scalar-loop CMC / mAP / AUC reference, no vectorisation."""
    gallery = bundle.splits["G"]
    cmc_hits = [0] * k_max
    aps = []
    excluded = []
    for query, order in zip(bundle.splits["Q"], orders):
        labels = [int(gallery[g].identity == query.identity) for g in order]
        if sum(labels) == 0:
            excluded.append(query.index)
            continue
        first = labels.index(1) + 1
        for k in range(1, k_max + 1):
            if first <= k:
                cmc_hits[k - 1] += 1
        seen = 0
        precisions = []
        for rank, lab in enumerate(labels, start=1):
            if lab:
                seen += 1
                precisions.append(seen / rank)
        aps.append(sum(precisions) / len(precisions))
    n = len(aps)
    cmc = [h / n if n else 0.0 for h in cmc_hits]
    map_score = sum(aps) / n if n else 0.0
    auc = sum(cmc) / k_max
    return cmc, map_score, auc, excluded


def train_bundle(rng: np.random.Generator, *, n_identities: int = 4,
                 n_cloths: int = 2, images_per_cloth: int = 2,
                 dims: tuple[int, int, int] = (5, 3, 4)):
    """A random train-split-only bundle (plus empty eval splits)."""
    d, dp, k = dims
    rows = []
    feats = []
    present = []
    parts = []
    i = 0
    for ident in range(n_identities):
        for cloth in range(n_cloths):
            for slot in range(images_per_cloth):
                rows.append((i, "T", ident, cloth, slot))
                feats.append(rng.normal(size=d))
                present.append(np.ones(k, dtype=bool))
                parts.append(rng.normal(size=(k, dp)))
                i += 1
    return build_bundle(rows, np.stack(feats), np.stack(present), np.stack(parts))
