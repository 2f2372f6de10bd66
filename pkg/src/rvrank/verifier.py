"""Learned pair verifier: decides whether two images show the same person.

A query/candidate pair is reduced to a symmetric fused representation
(elementwise absolute difference concatenated with elementwise product),
once for the global feature and once per part.  Two small heads score it:

* the global head is a one-hidden-layer network ``2D -> Hg -> 1`` with tanh
  activations producing ``sim_G`` in (-1, 1);
* the part head applies shared weights ``2Dp -> Hp`` (tanh) to every
  jointly-present part, mixes each to a scalar contribution, max-pools the
  contributions, and squashes through a positive-gain affine + tanh to get
  ``sim_S``.  The gain is parameterised as ``exp(log_gain)`` so raising the
  winning part's contribution always raises ``sim_S``.

Pairs where no part is present on both sides have no ``sim_S``; callers fall
back to ``sim_G`` (see :func:`pair_score`).

Training minimises a dual triplet hinge over anchor/positive/negative
triplets with plain mini-batch SGD, checkpointing the epoch with the best
validation Rank-1 (epoch 0, the untrained model, included).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .datastore import DatasetBundle, ImageRecord
from .retrieval import PairSet

MODEL_MAGIC = b"RVM1"

HISTORY_HEADER = ("epoch", "L", "L_g", "L_p", "valid_rank1")

#: Weight tensors in declared (serialisation and initialisation) order.
WEIGHT_FIELDS = (
    "global_hidden_w", "global_hidden_b", "global_out_w", "global_out_b",
    "part_hidden_w", "part_hidden_b", "part_mix_w", "part_mix_b",
    "out_log_gain", "out_bias",
)


class NoPresentPartsError(ValueError):
    """Raised when a part score is requested but no part is jointly present."""


class PartPair(NamedTuple):
    joint_present: bool
    vector: np.ndarray


@dataclass
class PairRepresentation:
    """Fused query/candidate representation: global (2D,) plus K part (2Dp,)."""

    global_pair: np.ndarray
    part_pairs: tuple[PartPair, ...]


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.3
    learning_rate: float = 3.5e-4
    epochs: int = 80
    batch_size: int = 16
    decay_factor: float = 0.1
    decay_epochs: tuple[int, ...] = (30, 60)


class EpochStats(NamedTuple):
    epoch: int
    loss: float
    loss_global: float
    loss_part: float
    valid_rank1: float


def make_pair_representation(query: ImageRecord, cand: ImageRecord) -> PairRepresentation:
    """Symmetric fusion of two records: [|a-b| ; a*b], globally and per part."""
    fq = np.asarray(query.global_feature, dtype=np.float64)
    fg = np.asarray(cand.global_feature, dtype=np.float64)
    if fq.shape != fg.shape:
        raise ValueError(f"global feature shapes differ: {fq.shape} vs {fg.shape}")
    if len(query.part_features) != len(cand.part_features):
        raise ValueError(
            f"part counts differ: {len(query.part_features)} vs {len(cand.part_features)}"
        )
    global_pair = np.concatenate([np.abs(fq - fg), fq * fg])
    parts = []
    for pq, pg in zip(query.part_features, cand.part_features):
        joint = pq.present and pg.present
        vq = np.asarray(pq.vector, dtype=np.float64)
        vg = np.asarray(pg.vector, dtype=np.float64)
        vec = np.concatenate([np.abs(vq - vg), vq * vg]) if joint \
            else np.zeros(2 * vq.shape[0])
        parts.append(PartPair(joint, vec))
    return PairRepresentation(global_pair, tuple(parts))


def pair_arrays(pairs: list[tuple[ImageRecord, ImageRecord]],
                dims: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack fused representations for many pairs.

    Returns ``(global_x, part_x, joint_present)`` with shapes (n, 2D),
    (n, K, 2Dp) and (n, K); absent part rows are zero.
    """
    d, dp, k = dims
    n = len(pairs)
    gx = np.zeros((n, 2 * d))
    px = np.zeros((n, k, 2 * dp))
    present = np.zeros((n, k), dtype=bool)
    for i, (q, g) in enumerate(pairs):
        rep = make_pair_representation(q, g)
        gx[i] = rep.global_pair
        for j, pp in enumerate(rep.part_pairs):
            present[i, j] = pp.joint_present
            if pp.joint_present:
                px[i, j] = pp.vector
    return gx, px, present


@dataclass(eq=False)
class VerifierModel:
    """Weights and shape/seed bookkeeping for the two scoring heads.

    All weights are float64 in memory; checkpoints store float32 (see
    :func:`save_model`).
    """

    dims: tuple[int, int, int]
    hidden_global: int
    hidden_part: int
    seed: int
    hyper: TrainConfig = field(default_factory=TrainConfig)
    global_hidden_w: np.ndarray = None
    global_hidden_b: np.ndarray = None
    global_out_w: np.ndarray = None
    global_out_b: np.ndarray = None
    part_hidden_w: np.ndarray = None
    part_hidden_b: np.ndarray = None
    part_mix_w: np.ndarray = None
    part_mix_b: np.ndarray = None
    out_log_gain: np.ndarray = None
    out_bias: np.ndarray = None

    @classmethod
    def initialize(cls, dims: tuple[int, int, int], hidden_global: int = 32,
                   hidden_part: int = 32, seed: int = 0,
                   hyper: TrainConfig | None = None) -> "VerifierModel":
        """Seeded uniform init: each tensor ~ U[-1/sqrt(fan_in), +1/sqrt(fan_in)].

        Tensors are drawn in ``WEIGHT_FIELDS`` order from one generator, so a
        (dims, seed) pair fully determines the weights.  The output affine
        scalars use fan-in 1.
        """
        d, dp, k = dims
        if d < 1 or dp < 0 or k < 1:
            raise ValueError(f"bad dims {dims}: need D >= 1, Dp >= 0, K >= 1")
        rng = np.random.default_rng(seed)

        def draw(shape, fan_in):
            bound = 1.0 / np.sqrt(max(1, fan_in))
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            dims=(d, dp, k),
            hidden_global=hidden_global,
            hidden_part=hidden_part,
            seed=seed,
            hyper=hyper or TrainConfig(),
            global_hidden_w=draw((hidden_global, 2 * d), 2 * d),
            global_hidden_b=draw((hidden_global,), 2 * d),
            global_out_w=draw((hidden_global,), hidden_global),
            global_out_b=draw((), hidden_global),
            part_hidden_w=draw((hidden_part, 2 * dp), 2 * dp),
            part_hidden_b=draw((hidden_part,), 2 * dp),
            part_mix_w=draw((k, hidden_part), hidden_part),
            part_mix_b=draw((k,), hidden_part),
            out_log_gain=draw((), 1),
            out_bias=draw((), 1),
        )

    def weights(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in WEIGHT_FIELDS]

    def weights_vector(self) -> np.ndarray:
        """All weights flattened in declared order (float64 copy)."""
        return np.concatenate([np.asarray(w, dtype=np.float64).ravel()
                               for _, w in self.weights()])

    def load_weights_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for name, w in self.weights():
            size = w.size
            chunk = vec[offset:offset + size]
            if chunk.size != size:
                raise ValueError(
                    f"weight vector too short: {vec.size} values, need "
                    f"{sum(w.size for _, w in self.weights())}"
                )
            setattr(self, name, chunk.reshape(w.shape).copy())
            offset += size
        if offset != vec.size:
            raise ValueError(f"weight vector too long: {vec.size} values, used {offset}")

    def copy(self) -> "VerifierModel":
        dup = replace(self)
        for name, w in self.weights():
            setattr(dup, name, np.array(w, dtype=np.float64))
        return dup


# ---------------------------------------------------------------------------
# forward / backward


def _forward_global(model: VerifierModel, gx: np.ndarray):
    z1 = gx @ model.global_hidden_w.T + model.global_hidden_b
    h = np.tanh(z1)
    z2 = h @ model.global_out_w + model.global_out_b
    s = np.tanh(z2)
    return s, (gx, h, s)


def _backward_global(model: VerifierModel, cache, ds: np.ndarray, grads: dict) -> None:
    gx, h, s = cache
    dz2 = ds * (1.0 - s * s)
    grads["global_out_b"] += dz2.sum()
    grads["global_out_w"] += h.T @ dz2
    dh = dz2[:, None] * model.global_out_w[None, :]
    dz1 = dh * (1.0 - h * h)
    grads["global_hidden_b"] += dz1.sum(axis=0)
    grads["global_hidden_w"] += dz1.T @ gx


def _forward_parts(model: VerifierModel, px: np.ndarray, present: np.ndarray):
    """Part-head forward for (n, K, 2Dp) inputs.

    Returns ``(s, contrib, valid, cache)``: ``s`` is NaN where ``valid`` is
    False (no jointly present part); ``contrib`` holds raw per-part
    contributions with NaN at absent slots.
    """
    zp = px @ model.part_hidden_w.T + model.part_hidden_b
    u = np.tanh(zp)
    c = (u * model.part_mix_w[None, :, :]).sum(axis=2) + model.part_mix_b[None, :]
    valid = present.any(axis=1)
    masked = np.where(present, c, -np.inf)
    pooled = np.full(c.shape[0], np.nan)
    kstar = np.zeros(c.shape[0], dtype=np.intp)
    if valid.any():
        pooled[valid] = masked[valid].max(axis=1)
        kstar[valid] = masked[valid].argmax(axis=1)
    gain = np.exp(model.out_log_gain)
    s = np.tanh(gain * pooled + model.out_bias)
    contrib = np.where(present, c, np.nan)
    return s, contrib, valid, (px, u, pooled, kstar, s, gain, valid)


def _backward_parts(model: VerifierModel, cache, ds: np.ndarray, grads: dict) -> None:
    """Backward for the part head; ``ds`` must be zero at invalid rows."""
    px, u, pooled, kstar, s, gain, valid = cache
    ds = np.where(valid, ds, 0.0)
    rows = np.flatnonzero(ds != 0.0)
    if rows.size == 0:
        return
    dzs = ds[rows] * (1.0 - s[rows] * s[rows])
    grads["out_bias"] += dzs.sum()
    grads["out_log_gain"] += (dzs * pooled[rows]).sum() * gain
    dpooled = dzs * gain
    ks = kstar[rows]
    np.add.at(grads["part_mix_b"], ks, dpooled)
    u_star = u[rows, ks]
    np.add.at(grads["part_mix_w"], ks, dpooled[:, None] * u_star)
    du = dpooled[:, None] * model.part_mix_w[ks]
    dzp = du * (1.0 - u_star * u_star)
    grads["part_hidden_b"] += dzp.sum(axis=0)
    grads["part_hidden_w"] += dzp.T @ px[rows, ks]


def zero_gradients(model: VerifierModel) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(np.asarray(w, dtype=np.float64))
            for name, w in model.weights()}


def gradients_vector(model: VerifierModel, grads: dict[str, np.ndarray]) -> np.ndarray:
    """Flatten a gradient dict in the same order as :meth:`weights_vector`."""
    return np.concatenate([np.asarray(grads[name]).ravel() for name in WEIGHT_FIELDS])


# ---------------------------------------------------------------------------
# scoring


def score_global(model: VerifierModel, rep: PairRepresentation) -> float:
    """Global-head similarity ``sim_G`` in (-1, 1)."""
    s, _ = _forward_global(model, rep.global_pair[None, :])
    return float(s[0])


def score_part(model: VerifierModel, rep: PairRepresentation) -> tuple[float, np.ndarray]:
    """Part-head similarity ``sim_S`` plus per-part contributions.

    The contributions array has one entry per part slot, NaN where the part
    is not jointly present.  Raises :class:`NoPresentPartsError` when every
    slot is NaN.
    """
    k = len(rep.part_pairs)
    present = np.array([pp.joint_present for pp in rep.part_pairs])
    if not present.any():
        raise NoPresentPartsError("no part is present in both images of the pair")
    px = np.zeros((1, k, rep.part_pairs[0].vector.shape[0]))
    for j, pp in enumerate(rep.part_pairs):
        if pp.joint_present:
            px[0, j] = pp.vector
    s, contrib, _, _ = _forward_parts(model, px, present[None, :])
    return float(s[0]), contrib[0]


def pair_score(model: VerifierModel, query: ImageRecord, cand: ImageRecord) -> float:
    """Verification score for a pair: ``sim_S``, or ``sim_G`` when no part
    is jointly present."""
    rep = make_pair_representation(query, cand)
    try:
        s, _ = score_part(model, rep)
        return s
    except NoPresentPartsError:
        return score_global(model, rep)


def batch_scores(model: VerifierModel, gx: np.ndarray, px: np.ndarray,
                 present: np.ndarray) -> np.ndarray:
    """Vectorised :func:`pair_score` over stacked pair arrays."""
    sg, _ = _forward_global(model, gx)
    sp, _, valid, _ = _forward_parts(model, px, present)
    return np.where(valid, sp, sg)


# ---------------------------------------------------------------------------
# triplet loss


def triplet_hinge(sim_pos: float, sim_neg: float, margin: float) -> float:
    """Hinge pushing the positive score above the negative by ``margin``:
    ``max(sim_neg - sim_pos + margin, 0)``."""
    return max(sim_neg - sim_pos + margin, 0.0)


@dataclass
class TripletBatch:
    """Triplets over a shared pair table.

    ``pair_refs`` lists (anchor_ref, cand_ref) role/index pairs;
    ``pos_index``/``neg_index`` select, per triplet, the positive and
    negative pair row.
    """

    pair_refs: list[tuple[tuple[str, int], tuple[str, int]]]
    pos_index: np.ndarray
    neg_index: np.ndarray


def build_triplet_batches(pair_set: PairSet, batch_size: int = 16,
                          anchor_order: list[tuple[str, int]] | None = None
                          ) -> list[TripletBatch]:
    """Group anchors into batches and enumerate every positive x negative
    triplet per anchor.

    Anchors appear in ``anchor_order`` (default: first appearance in the
    pair set).  Anchors lacking positives or negatives yield no triplets.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    grouped = pair_set.by_query()
    anchors = anchor_order if anchor_order is not None else list(grouped)
    batches: list[TripletBatch] = []
    for start in range(0, len(anchors), batch_size):
        chunk = anchors[start:start + batch_size]
        refs: list[tuple[tuple[str, int], tuple[str, int]]] = []
        pos_idx: list[int] = []
        neg_idx: list[int] = []
        for anchor in chunk:
            plist = grouped.get(anchor, [])
            pos_rows = []
            neg_rows = []
            for p in plist:
                refs.append((anchor, (p.cand_role, p.cand_index)))
                (pos_rows if p.label == 1 else neg_rows).append(len(refs) - 1)
            for pi in pos_rows:
                for ni in neg_rows:
                    pos_idx.append(pi)
                    neg_idx.append(ni)
        batches.append(TripletBatch(refs, np.asarray(pos_idx, dtype=np.intp),
                                    np.asarray(neg_idx, dtype=np.intp)))
    return batches


def _batch_arrays(bundle: DatasetBundle, batch: TripletBatch):
    recs = [(bundle.resolve(*a), bundle.resolve(*c)) for a, c in batch.pair_refs]
    return pair_arrays(recs, bundle.dims)


def _loss_forward(model: VerifierModel, gx, px, present, pos_index, neg_index,
                  margin: float):
    sg, cache_g = _forward_global(model, gx)
    sp, _, valid, cache_p = _forward_parts(model, px, present)
    zg = sg[neg_index] - sg[pos_index] + margin
    hg = np.maximum(zg, 0.0)
    part_ok = valid[pos_index] & valid[neg_index]
    zp = np.where(part_ok, sp[neg_index] - sp[pos_index] + margin, 0.0)
    hp = np.where(part_ok, np.maximum(zp, 0.0), 0.0)
    return (float(hg.sum()), float(hp.sum()), hg, hp, part_ok,
            sg, sp, cache_g, cache_p)


def batch_loss(model: VerifierModel, bundle: DatasetBundle, batch: TripletBatch,
               margin: float | None = None) -> tuple[float, float, float]:
    """Summed dual hinge loss ``(total, global_term, part_term)`` for a batch.

    The part term skips triplets where either pair has no jointly present
    part (those pairs have no ``sim_S``).
    """
    m = model.hyper.margin if margin is None else margin
    gx, px, present = _batch_arrays(bundle, batch)
    lg, lp, *_ = _loss_forward(model, gx, px, present,
                               batch.pos_index, batch.neg_index, m)
    return lg + lp, lg, lp


def loss_gradients(model: VerifierModel, bundle: DatasetBundle, batch: TripletBatch,
                   margin: float | None = None
                   ) -> tuple[tuple[float, float, float], dict[str, np.ndarray]]:
    """Loss and analytic weight gradients for one triplet batch.

    At a hinge kink (activation exactly 0) the subgradient 0 is used.
    """
    m = model.hyper.margin if margin is None else margin
    gx, px, present = _batch_arrays(bundle, batch)
    return _loss_gradients_arrays(model, gx, px, present,
                                  batch.pos_index, batch.neg_index, m)


def _loss_gradients_arrays(model, gx, px, present, pos_index, neg_index, margin):
    lg, lp, hg, hp, part_ok, sg, sp, cache_g, cache_p = _loss_forward(
        model, gx, px, present, pos_index, neg_index, margin)
    grads = zero_gradients(model)

    dsg = np.zeros_like(sg)
    active = hg > 0.0
    np.add.at(dsg, neg_index[active], 1.0)
    np.add.at(dsg, pos_index[active], -1.0)
    _backward_global(model, cache_g, dsg, grads)

    dsp = np.zeros_like(sg)
    active_p = (hp > 0.0) & part_ok
    np.add.at(dsp, neg_index[active_p], 1.0)
    np.add.at(dsp, pos_index[active_p], -1.0)
    _backward_parts(model, cache_p, dsp, grads)
    return (lg + lp, lg, lp), grads


# ---------------------------------------------------------------------------
# training


def _candidate_views(pair_set: PairSet):
    """Per-query candidate ids, labels and rank order from an eval pair set."""
    views = []
    for (qrole, qi), plist in pair_set.by_query().items():
        ordered = sorted(plist, key=lambda p: p.rank)
        views.append(((qrole, qi),
                      [p.cand_index for p in ordered],
                      [(p.cand_role, p.cand_index) for p in ordered],
                      [p.label for p in ordered]))
    views.sort(key=lambda v: v[0][1])
    return views


def validation_rank1(model: VerifierModel, bundle: DatasetBundle,
                     valid_pairs: PairSet, ranking_L: int, ranking_Q: int) -> float:
    """Rank-1 over validation queries after re-scoring their candidate lists
    with the verifier and applying the windowed ranking strategy.

    Queries whose candidate list contains no positive are excluded; returns
    0.0 if every query is excluded.
    """
    from .reranker import window_rerank

    views = _candidate_views(valid_pairs)
    hits = 0
    counted = 0
    for (qrole, qi), cand_ids, cand_refs, labels in views:
        if 1 not in labels:
            continue
        counted += 1
        query = bundle.resolve(qrole, qi)
        recs = [(query, bundle.resolve(*ref)) for ref in cand_refs]
        gx, px, present = pair_arrays(recs, bundle.dims)
        scores = batch_scores(model, gx, px, present)
        score_of = {cid: float(s) for cid, s in zip(cand_ids, scores)}
        ranked = window_rerank(cand_ids, score_of, ranking_L, ranking_Q,
                               query_index=qi)
        if labels[cand_ids.index(ranked.order[0])] == 1:
            hits += 1
    return hits / counted if counted else 0.0


def _learning_rate(config: TrainConfig, epoch: int) -> float:
    lr = config.learning_rate
    for milestone in config.decay_epochs:
        if epoch > milestone:
            lr *= config.decay_factor
    return lr


def train(model: VerifierModel, bundle: DatasetBundle, train_pairs: PairSet,
          valid_pairs: PairSet, ranking_L: int = 10, ranking_Q: int = 20,
          progress: Callable[[EpochStats], None] | None = None
          ) -> tuple[VerifierModel, list[EpochStats]]:
    """Mini-batch SGD on the dual triplet hinge loss.

    Anchors are shuffled every epoch with a generator derived from the model
    seed; batches hold ``hyper.batch_size`` anchors with the full positive x
    negative cross product per anchor.  The learning rate decays by
    ``decay_factor`` after each milestone in ``decay_epochs``.  After the
    last epoch the weights giving the best validation Rank-1 (ties: earliest
    epoch, including the untrained epoch 0) are restored into ``model``.

    Returns the model and one :class:`EpochStats` row per epoch (0..epochs).
    """
    config = model.hyper
    grouped = train_pairs.by_query()
    anchors = [a for a, plist in grouped.items()
               if any(p.label == 1 for p in plist) and any(p.label == 0 for p in plist)]
    if not anchors:
        raise ValueError("no usable anchors: every anchor lacks positives or negatives")

    # Pair table built once; per-epoch batches only re-index into it.
    refs: list[tuple[tuple[str, int], tuple[str, int]]] = []
    anchor_rows: dict[tuple[str, int], tuple[list[int], list[int]]] = {}
    for anchor in anchors:
        pos_rows: list[int] = []
        neg_rows: list[int] = []
        for p in grouped[anchor]:
            refs.append((anchor, (p.cand_role, p.cand_index)))
            (pos_rows if p.label == 1 else neg_rows).append(len(refs) - 1)
        anchor_rows[anchor] = (pos_rows, neg_rows)
    records = [(bundle.resolve(*a), bundle.resolve(*c)) for a, c in refs]
    gx_all, px_all, present_all = pair_arrays(records, bundle.dims)

    def epoch_loss() -> tuple[float, float, float]:
        pos_idx, neg_idx = _cross_indices(anchors, anchor_rows)
        lg, lp, *_ = _loss_forward(model, gx_all, px_all, present_all,
                                   pos_idx, neg_idx, config.margin)
        return lg + lp, lg, lp

    history: list[EpochStats] = []
    best_vec: np.ndarray | None = None
    best_key: tuple[float, int] | None = None

    def record(epoch: int, losses: tuple[float, float, float]) -> None:
        nonlocal best_vec, best_key
        rank1 = validation_rank1(model, bundle, valid_pairs, ranking_L, ranking_Q)
        stats = EpochStats(epoch, losses[0], losses[1], losses[2], rank1)
        history.append(stats)
        key = (-rank1, epoch)
        if best_key is None or key < best_key:
            best_key = key
            best_vec = model.weights_vector()
        if progress is not None:
            progress(stats)

    record(0, epoch_loss())
    rng = np.random.default_rng([model.seed, 1])
    for epoch in range(1, config.epochs + 1):
        lr = _learning_rate(config, epoch)
        order = [anchors[i] for i in rng.permutation(len(anchors))]
        total = np.zeros(3)
        for start in range(0, len(order), config.batch_size):
            chunk = order[start:start + config.batch_size]
            pos_idx, neg_idx = _cross_indices(chunk, anchor_rows)
            rows = np.unique(np.concatenate([pos_idx, neg_idx]))
            remap = np.zeros(len(refs), dtype=np.intp)
            remap[rows] = np.arange(rows.size)
            losses, grads = _loss_gradients_arrays(
                model, gx_all[rows], px_all[rows], present_all[rows],
                remap[pos_idx], remap[neg_idx], config.margin)
            if not np.isfinite(losses[0]):
                raise RuntimeError(f"non-finite loss at epoch {epoch}")
            total += losses
            for name, w in model.weights():
                g = grads[name]
                if not np.all(np.isfinite(g)):
                    raise RuntimeError(f"non-finite gradient for {name} at epoch {epoch}")
                w -= lr * g
        record(epoch, (float(total[0]), float(total[1]), float(total[2])))

    assert best_vec is not None
    model.load_weights_vector(best_vec)
    return model, history


def _cross_indices(anchors, anchor_rows) -> tuple[np.ndarray, np.ndarray]:
    pos_idx: list[np.ndarray] = []
    neg_idx: list[np.ndarray] = []
    for anchor in anchors:
        pos_rows, neg_rows = anchor_rows[anchor]
        p = np.asarray(pos_rows, dtype=np.intp)
        n = np.asarray(neg_rows, dtype=np.intp)
        pos_idx.append(np.repeat(p, n.size))
        neg_idx.append(np.tile(n, p.size))
    if not pos_idx:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    return np.concatenate(pos_idx), np.concatenate(neg_idx)


def write_history_csv(path: str | Path, history: list[EpochStats],
                      config_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if config_comment is not None:
            fh.write(f"# {config_comment}\n")
        fh.write(",".join(HISTORY_HEADER) + "\n")
        for row in history:
            fh.write(f"{row.epoch},{row.loss!r},{row.loss_global!r},"
                     f"{row.loss_part!r},{row.valid_rank1!r}\n")


# ---------------------------------------------------------------------------
# checkpoint format


def save_model(path: str | Path, model: VerifierModel) -> None:
    """Write an RVM1 checkpoint.

    Layout (little-endian): magic, u32 D/Dp/K/Hg/Hp, i64 seed, f64 margin,
    f64 learning rate, u32 epochs, u32 batch size, f64 decay factor, u32
    milestone count + u32 milestones, then every tensor in
    ``WEIGHT_FIELDS`` order as f32.
    """
    h = model.hyper
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<5I", *model.dims, model.hidden_global, model.hidden_part))
        fh.write(struct.pack("<q", model.seed))
        fh.write(struct.pack("<2d", h.margin, h.learning_rate))
        fh.write(struct.pack("<2I", h.epochs, h.batch_size))
        fh.write(struct.pack("<d", h.decay_factor))
        fh.write(struct.pack("<I", len(h.decay_epochs)))
        fh.write(struct.pack(f"<{len(h.decay_epochs)}I", *h.decay_epochs))
        for _, w in model.weights():
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_model(path: str | Path) -> VerifierModel:
    path = Path(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic at offset 0: expected {MODEL_MAGIC!r}, "
                         f"got {data[:4]!r}")
    offset = 4

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(data):
            raise ValueError(f"{path}: truncated header at offset {offset}")
        vals = struct.unpack_from(fmt, data, offset)
        offset += size
        return vals

    d, dp, k, hg, hp = take("<5I")
    (seed,) = take("<q")
    margin, lr = take("<2d")
    epochs, batch = take("<2I")
    (decay_factor,) = take("<d")
    (n_milestones,) = take("<I")
    milestones = take(f"<{n_milestones}I") if n_milestones else ()
    hyper = TrainConfig(margin=margin, learning_rate=lr, epochs=epochs,
                        batch_size=batch, decay_factor=decay_factor,
                        decay_epochs=tuple(milestones))
    model = VerifierModel.initialize((d, dp, k), hg, hp, seed=seed, hyper=hyper)
    expect = sum(w.size for _, w in model.weights())
    payload = np.frombuffer(data, dtype="<f4", offset=offset)
    if payload.size != expect:
        raise ValueError(f"{path}: weight payload holds {payload.size} f32 values, "
                         f"dims require {expect}")
    model.load_weights_vector(payload.astype(np.float64))
    return model
