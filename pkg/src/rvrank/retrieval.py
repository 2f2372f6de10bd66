"""Brute-force retrieval and pair dataset construction.

Retrieval compares query features against gallery features with an exact
distance matrix, applies the eligibility rule (a gallery image with the same
identity *and* the same cloth index as the query never competes), and keeps
the top-P nearest candidates per query.  Candidate scores are negated
distances, so higher is always better downstream.

Pair datasets reuse the same machinery:

* evaluation pairs label each retrieved candidate 1 (same identity) or 0,
* training pairs collect, per train-split anchor, up to P nearest
  same-identity/different-cloth positives and up to P nearest
  different-identity negatives from the train split itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .datastore import DatasetBundle, ImageRecord

METRICS = ("euclidean", "cosine")

PAIR_HEADER = ("query_role", "query_index", "rank", "cand_role", "cand_index",
               "score", "label")

_COSINE_EPS = 1e-12


class CandidateEntry(NamedTuple):
    gallery_index: int
    score: float


@dataclass
class CandidateList:
    """Top candidates for one query, best first; ``score`` is -distance."""

    query_index: int
    entries: list[CandidateEntry]


@dataclass(frozen=True)
class Pair:
    """One (query, candidate) row of a pair dataset.

    ``rank`` is 1-based within the query's list; for training pairs the
    positive and negative sub-lists are ranked independently.  ``label`` is
    1 when both images share an identity, else 0.
    """

    query_role: str
    query_index: int
    rank: int
    cand_role: str
    cand_index: int
    score: float
    label: int


@dataclass
class PairSet:
    """A pair dataset plus its provenance tag (train, valid or test)."""

    pairs: list[Pair] = field(default_factory=list)
    provenance: str = ""

    def by_query(self) -> dict[tuple[str, int], list[Pair]]:
        """Group pairs per query, preserving file/rank order."""
        out: dict[tuple[str, int], list[Pair]] = {}
        for p in self.pairs:
            out.setdefault((p.query_role, p.query_index), []).append(p)
        return out


def stack_features(records: list[ImageRecord]) -> np.ndarray:
    """Stack global features into an (n, D) float64 matrix."""
    if not records:
        return np.zeros((0, 0))
    return np.stack([r.global_feature for r in records]).astype(np.float64)


def distance_matrix(query_feats: np.ndarray, gallery_feats: np.ndarray,
                    metric: str = "euclidean") -> np.ndarray:
    """Exact pairwise distances, (n_query, n_gallery), float64.

    ``euclidean`` is the L2 distance; ``cosine`` is 1 - cosine similarity
    with zero-norm rows guarded by a small epsilon.
    """
    q = np.asarray(query_feats, dtype=np.float64)
    g = np.asarray(gallery_feats, dtype=np.float64)
    if metric == "euclidean":
        qq = (q * q).sum(axis=1)[:, None]
        gg = (g * g).sum(axis=1)[None, :]
        sq = qq + gg - 2.0 * (q @ g.T)
        np.maximum(sq, 0.0, out=sq)
        return np.sqrt(sq)
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1)[:, None]
        gn = np.linalg.norm(g, axis=1)[None, :]
        denom = np.maximum(qn * gn, _COSINE_EPS)
        return 1.0 - (q @ g.T) / denom
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def eligible_mask(query: ImageRecord, gallery: list[ImageRecord]) -> np.ndarray:
    """Boolean mask over the gallery: True where the candidate may compete.

    A gallery image is ineligible exactly when it shares both the identity
    and the cloth index of the query.  (Within one split this also removes
    the query itself.)
    """
    ids = np.fromiter((r.identity for r in gallery), dtype=np.int64, count=len(gallery))
    cloths = np.fromiter((r.cloth for r in gallery), dtype=np.int64, count=len(gallery))
    return ~((ids == query.identity) & (cloths == query.cloth))


def top_candidates(queries: list[ImageRecord], gallery: list[ImageRecord],
                   num_candidates: int, metric: str = "euclidean") -> list[CandidateList]:
    """Top-P eligible candidates per query, nearest first.

    Ties in distance break towards the lower gallery index.  Queries with
    fewer than P eligible gallery images get shorter lists.
    """
    if num_candidates < 1:
        raise ValueError(f"num_candidates must be >= 1, got {num_candidates}")
    if not gallery:
        raise ValueError("empty gallery")
    dist = distance_matrix(stack_features(queries), stack_features(gallery), metric)
    out: list[CandidateList] = []
    for qi, query in enumerate(queries):
        row = dist[qi].copy()
        mask = eligible_mask(query, gallery)
        row[~mask] = np.inf
        order = np.argsort(row, kind="stable")
        keep = min(num_candidates, int(mask.sum()))
        entries = [CandidateEntry(int(j), float(-row[j])) for j in order[:keep]]
        out.append(CandidateList(query_index=query.index, entries=entries))
    return out


def build_eval_pairs(bundle: DatasetBundle, query_role: str, gallery_role: str,
                     num_candidates: int = 20, metric: str = "euclidean") -> PairSet:
    """Labelled top-P candidate pairs for a query/gallery role combination."""
    queries = bundle.splits[query_role]
    gallery = bundle.splits[gallery_role]
    lists = top_candidates(queries, gallery, num_candidates, metric)
    pairs: list[Pair] = []
    for query, cand in zip(queries, lists):
        for rank, (gi, score) in enumerate(cand.entries, start=1):
            label = int(gallery[gi].identity == query.identity)
            pairs.append(Pair(query_role, query.index, rank,
                              gallery_role, gi, score, label))
    provenance = {"VQ": "valid", "Q": "test"}.get(query_role,
                                                  f"{query_role}-{gallery_role}")
    return PairSet(pairs, provenance)


def build_train_pairs(bundle: DatasetBundle, num_candidates: int = 20,
                      metric: str = "euclidean") -> tuple[PairSet, list[int]]:
    """Anchor/positive/negative pairs mined from the train split.

    Per anchor: the nearest ``num_candidates`` same-identity different-cloth
    images become positives (label 1), the nearest ``num_candidates``
    different-identity images become negatives (label 0).  Anchors without at
    least one positive and one negative are dropped; the second return value
    lists their indices.
    """
    train = bundle.splits["T"]
    feats = stack_features(train)
    dist = distance_matrix(feats, feats, metric)
    ids = np.fromiter((r.identity for r in train), dtype=np.int64, count=len(train))
    cloths = np.fromiter((r.cloth for r in train), dtype=np.int64, count=len(train))

    pairs: list[Pair] = []
    dropped: list[int] = []
    for ai, anchor in enumerate(train):
        pos_mask = (ids == anchor.identity) & (cloths != anchor.cloth)
        neg_mask = ids != anchor.identity
        if not pos_mask.any() or not neg_mask.any():
            dropped.append(anchor.index)
            continue
        row = dist[ai]
        for mask, label in ((pos_mask, 1), (neg_mask, 0)):
            masked = row.copy()
            masked[~mask] = np.inf
            order = np.argsort(masked, kind="stable")
            keep = min(num_candidates, int(mask.sum()))
            for rank, j in enumerate(order[:keep], start=1):
                pairs.append(Pair("T", anchor.index, rank, "T", int(j),
                                  float(-row[j]), label))
    return PairSet(pairs, "train"), dropped


def candidates_from_pairs(pair_set: PairSet) -> list[CandidateList]:
    """Recover per-query candidate lists (rank order) from an eval pair set."""
    out: list[CandidateList] = []
    for (_, qi), plist in pair_set.by_query().items():
        ordered = sorted(plist, key=lambda p: p.rank)
        out.append(CandidateList(qi, [CandidateEntry(p.cand_index, p.score)
                                      for p in ordered]))
    out.sort(key=lambda c: c.query_index)
    return out


# ---------------------------------------------------------------------------
# CSV serialisation


def write_pairs_csv(path: str | Path, pair_set: PairSet,
                    config_comment: str | None = None) -> None:
    """Write a pair set; float scores use repr so reads round-trip exactly."""
    with open(path, "w", newline="") as fh:
        if config_comment is not None:
            fh.write(f"# {config_comment}\n")
        fh.write(",".join(PAIR_HEADER) + "\n")
        for p in pair_set.pairs:
            fh.write(f"{p.query_role},{p.query_index},{p.rank},{p.cand_role},"
                     f"{p.cand_index},{p.score!r},{p.label}\n")


def read_pairs_csv(path: str | Path) -> PairSet:
    path = Path(path)
    pairs: list[Pair] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header_seen = False
        for lineno, raw in enumerate(reader, start=1):
            if not raw or raw[0].startswith("#"):
                continue
            if not header_seen:
                if tuple(raw) != PAIR_HEADER:
                    raise ValueError(
                        f"{path}: line {lineno}: expected header "
                        f"{','.join(PAIR_HEADER)!r}, got {','.join(raw)!r}"
                    )
                header_seen = True
                continue
            if len(raw) != 7:
                raise ValueError(f"{path}: line {lineno}: expected 7 fields, got {len(raw)}")
            qr, qi, rank, cr, ci, score, label = raw
            pairs.append(Pair(qr, int(qi), int(rank), cr, int(ci),
                              float(score), int(label)))
        if not header_seen:
            raise ValueError(f"{path}: missing header row")
    query_roles = {p.query_role for p in pairs}
    provenance = ""
    if len(query_roles) == 1:
        provenance = {"T": "train", "VQ": "valid", "Q": "test"}.get(
            query_roles.pop(), "")
    return PairSet(pairs, provenance)
