"""Ranking quality metrics for query/gallery evaluation.

All metrics honour the eligibility rule: gallery images sharing both
identity and cloth index with the query are removed from its ranking before
scoring, so trivial same-clothes matches never count.  Queries left without
a single positive are excluded from the averages and reported separately.

* CMC@k: fraction of queries whose first correct match sits at rank <= k.
* AP: mean, over a query's positives, of the precision at each positive's
  rank; mAP averages AP over the evaluated queries.
* AUC: mean of CMC@1..k_max, a single-number summary of the curve head.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datastore import DatasetBundle
from .reranker import RankedList, RankingConfig, rerank_pipeline, window_rerank
from .verifier import VerifierModel

SWEEP_HEADER = ("L", "rank1", "rank10")
PER_QUERY_HEADER = ("query_index", "first_hit_rank", "average_precision")


@dataclass(frozen=True)
class QueryMetric:
    """Per-query outcome; fields are None for excluded queries."""

    query_index: int
    first_hit_rank: int | None
    average_precision: float | None


@dataclass
class EvalReport:
    """Aggregate metrics plus per-query detail.

    ``cmc[i]`` is CMC@(i+1); ``excluded_queries`` lists queries with no
    eligible positive in the gallery.
    """

    cmc: list[float]
    map_score: float
    auc: float
    num_evaluated: int
    excluded_queries: list[int]
    per_query: list[QueryMetric] = field(default_factory=list)

    def to_json_dict(self, config: dict | None = None) -> dict:
        out = {
            "cmc": self.cmc,
            "map": self.map_score,
            "auc": self.auc,
            "num_evaluated": self.num_evaluated,
            "excluded_queries": self.excluded_queries,
        }
        if config is not None:
            out["config"] = config
        return out

    def write_json(self, path: str | Path, config: dict | None = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(config), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def write_per_query_csv(self, path: str | Path,
                            config_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if config_comment is not None:
                fh.write(f"# {config_comment}\n")
            fh.write(",".join(PER_QUERY_HEADER) + "\n")
            for qm in self.per_query:
                hit = "" if qm.first_hit_rank is None else qm.first_hit_rank
                ap = "" if qm.average_precision is None else repr(qm.average_precision)
                fh.write(f"{qm.query_index},{hit},{ap}\n")


def evaluate(bundle: DatasetBundle, ranked: list[RankedList], k_max: int = 10,
             query_role: str = "Q", gallery_role: str = "G") -> EvalReport:
    """Score ranked lists against identity labels.

    Each ranking must be a permutation of its query's eligible gallery
    (same-identity-same-cloth images already removed); anything else --
    ineligible entries, duplicates, omissions -- raises ValueError naming
    the query.
    """
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    gallery = bundle.splits[gallery_role]
    first_hits: list[int] = []
    aps: list[float] = []
    excluded: list[int] = []
    per_query: list[QueryMetric] = []
    for rl in sorted(ranked, key=lambda r: r.query_index):
        query = bundle.resolve(query_role, rl.query_index)
        eligible = {rec.index for rec in gallery
                    if not (rec.identity == query.identity
                            and rec.cloth == query.cloth)}
        if set(rl.order) != eligible or len(rl.order) != len(eligible):
            raise ValueError(
                f"ranking for query {rl.query_index} is not a permutation of "
                f"its {len(eligible)} eligible gallery images"
            )
        labels = [1 if gallery[gi].identity == query.identity else 0
                  for gi in rl.order]
        labels_arr = np.asarray(labels, dtype=np.int64)
        num_pos = int(labels_arr.sum())
        if num_pos == 0:
            excluded.append(rl.query_index)
            per_query.append(QueryMetric(rl.query_index, None, None))
            continue
        positions = np.flatnonzero(labels_arr) + 1
        first_hit = int(positions[0])
        precisions = np.arange(1, num_pos + 1) / positions
        ap = float(precisions.mean())
        first_hits.append(first_hit)
        aps.append(ap)
        per_query.append(QueryMetric(rl.query_index, first_hit, ap))

    n = len(first_hits)
    if n == 0:
        cmc = [0.0] * k_max
        map_score = 0.0
    else:
        hits = np.asarray(first_hits)
        cmc = [float((hits <= k).mean()) for k in range(1, k_max + 1)]
        map_score = float(np.mean(aps))
    auc = float(np.mean(cmc)) if cmc else 0.0
    return EvalReport(cmc=cmc, map_score=map_score, auc=auc, num_evaluated=n,
                      excluded_queries=excluded, per_query=per_query)


# ---------------------------------------------------------------------------
# window-size sweep


def sweep_L(bundle: DatasetBundle, scorer, config: RankingConfig,
            L_values: Sequence[int], candidates=None,
            include_kreciprocal: bool = False, metric: str = "euclidean",
            query_role: str = "Q", gallery_role: str = "G"
            ) -> list[tuple[int, float, float]]:
    """Rank-1/Rank-10 as a function of the window size L, at fixed Q.

    Verifier scores are computed once per query (the scored prefix depends
    only on Q) and reused across all L values.  ``candidates`` (optional
    previously retrieved lists) are cross-checked exactly as in
    :func:`rerank_pipeline`.  Returns (L, rank1, rank10) rows in the order
    given.
    """
    from .reranker import _model_prefix_scores  # shared scoring helper

    cfg = config.clamped()
    base = rerank_pipeline(bundle, None, cfg,
                           stages=("kreciprocal",) if include_kreciprocal else (),
                           candidates=candidates, metric=metric,
                           query_role=query_role, gallery_role=gallery_role)
    queries = bundle.splits[query_role]
    gallery = bundle.splits[gallery_role]
    score_maps: list[dict[int, float]] = []
    for query, rl in zip(queries, base):
        prefix = rl.order[: min(cfg.Q, len(rl.order))]
        if isinstance(scorer, VerifierModel):
            score_maps.append(_model_prefix_scores(scorer, bundle, query,
                                                   gallery, prefix))
        else:
            score_maps.append({gi: float(scorer(query, gallery[gi]))
                               for gi in prefix})

    rows: list[tuple[int, float, float]] = []
    for L in L_values:
        run_cfg = RankingConfig(P=cfg.P, L=int(L), Q=cfg.Q, margin=cfg.margin,
                                k1=cfg.k1, k2=cfg.k2, lam=cfg.lam).clamped()
        ranked = [window_rerank(rl.order, sm, run_cfg.L, run_cfg.Q, rl.query_index)
                  for rl, sm in zip(base, score_maps)]
        report = evaluate(bundle, ranked, k_max=10, query_role=query_role,
                          gallery_role=gallery_role)
        rows.append((int(L), report.cmc[0], report.cmc[9]))
    return rows


def write_sweep_csv(path: str | Path, rows: list[tuple[int, float, float]],
                    config_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_comment is not None:
            fh.write(f"# {config_comment}\n")
        fh.write(",".join(SWEEP_HEADER) + "\n")
        for L, r1, r10 in rows:
            fh.write(f"{L},{r1!r},{r10!r}\n")


def read_sweep_csv(path: str | Path) -> list[tuple[int, float, float]]:
    path = Path(path)
    rows: list[tuple[int, float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header_seen = False
        for lineno, raw in enumerate(reader, start=1):
            if not raw or raw[0].startswith("#"):
                continue
            if not header_seen:
                if tuple(raw) != SWEEP_HEADER:
                    raise ValueError(f"{path}: line {lineno}: bad header {raw}")
                header_seen = True
                continue
            rows.append((int(raw[0]), float(raw[1]), float(raw[2])))
    return rows
