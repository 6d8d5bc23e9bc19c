"""Metric suite: neighbor-vote AUC, human-relevancy count, activation-map
Jaccard — computed per trained regime and per neighborhood size.

Absolute values on the synthetic desk dataset are not comparable to any
published dermoscopy numbers; what the harness preserves is the metric
definitions and the qualitative orderings between supervision regimes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import data_io, evidence, model, retrieval
from .core import ParamSet
from .errors import ConfigError, InputError
from .retrieval import EmbeddingIndex, NeighborList, knn_query, melanoma_score
from .triplets import MELANOMA, HierLabel

DEFAULT_KS = (3, 5, 10, 20, 40)


def auc(scores) -> float:
    """Area under the ROC curve via the rank statistic, ties get half credit.

    scores: iterable of (score, is_positive). Equivalent to the
    probability that a random positive outscores a random negative.
    """
    pairs = [(float(s), bool(p)) for s, p in scores]
    n_pos = sum(1 for _, p in pairs if p)
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs at least one positive and one negative")
    order = sorted(range(len(pairs)), key=lambda i: pairs[i][0])
    ranks = [0.0] * len(pairs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and pairs[order[j + 1]][0] == pairs[order[i]][0]:
            j += 1
        mean_rank = (i + j) / 2 + 1  # 1-based, averaged over the tie run
        for t in range(i, j + 1):
            ranks[order[t]] = mean_rank
        i = j + 1
    rank_sum_pos = sum(r for r, (_, p) in zip(ranks, pairs) if p)
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def rel_at_k(query_label: HierLabel, neighbors: NeighborList, labels) -> int:
    """Count of neighbors sharing both the query's disease and group."""
    if query_label.disease is None or query_label.group is None:
        raise InputError("query lacks a (disease, group) annotation")
    hits = 0
    for sample_id, _ in neighbors:
        if sample_id not in labels:
            raise InputError(f"neighbor {sample_id!r} has no label")
        lab = labels[sample_id]
        if lab.group is None:
            raise InputError(f"neighbor {sample_id!r} lacks a group annotation")
        if lab.disease == query_label.disease and lab.group == query_label.group:
            hits += 1
    return hits


@dataclass
class EvalRow:
    regime: str
    k: int
    auc: float
    rel: float
    ja: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def value(self, regime: str, k: int, metric: str) -> float:
        for row in self.rows:
            if row.regime == regime and row.k == k:
                return getattr(row, metric)
        raise KeyError(f"no row for ({regime}, {k})")

    def to_csv(self) -> str:
        lines = ["regime,k,auc,rel,ja"]
        for r in self.rows:
            lines.append(f"{r.regime},{r.k},{r.auc:.6f},{r.rel:.6f},{r.ja:.6f}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        regimes = list(dict.fromkeys(r.regime for r in self.rows))
        ks = sorted({r.k for r in self.rows})
        width = max(12, *(len(r) + 2 for r in regimes))
        header = "metric".ljust(10) + "".join(r.rjust(width) for r in regimes)
        lines = [header, "-" * len(header)]
        for metric in ("auc", "rel"):
            for k in ks:
                cells = "".join(f"{self.value(r, k, metric):.3f}".rjust(width)
                                for r in regimes)
                lines.append(f"{metric} k{k:<4}".ljust(10) + cells)
        cells = "".join(f"{self.value(r, ks[0], 'ja'):.3f}".rjust(width)
                        for r in regimes)
        lines.append("ja".ljust(10) + cells)
        if self.metadata:
            lines.append("")
            for key in sorted(self.metadata):
                lines.append(f"# {key}: {self.metadata[key]}")
        return "\n".join(lines) + "\n"


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str)
                          .encode()).hexdigest()[:16]


def mean_qam_jaccard(manifest: data_io.DatasetManifest,
                     index: EmbeddingIndex,
                     test_outputs: dict[str, model.EmbeddingOutput],
                     train_outputs: dict[str, model.EmbeddingOutput],
                     tau: float = 0.5, rank: int = 1) -> float:
    """Mean Jaccard of each test query's binarized QAM against its mask.

    The QAM is computed against the rank-1 retrieved result, upsampled to
    image resolution, min-max binarized at tau.
    """
    by_id = manifest.by_id()
    scores = []
    for sample_id, out in test_outputs.items():
        rec = by_id[sample_id]
        mask_file = manifest.mask_file(rec)
        if mask_file is None:
            continue
        truth = data_io.load_mask(mask_file)
        neighbors = knn_query(index, out.embedding, rank)
        result = train_outputs[neighbors.ids[rank - 1]]
        pair = evidence.activation_pair(out, result)
        qam_full = evidence.upsample_map(pair.qam, (truth.height, truth.width))
        pred = evidence.binarize_map(qam_full, tau)
        scores.append(evidence.jaccard(pred, truth))
    if not scores:
        raise InputError("no test sample has a ground-truth mask")
    return float(np.mean(scores))


def evaluate(models: dict[str, ParamSet], mconfig: model.ModelConfig,
             manifest: data_io.DatasetManifest,
             ks=DEFAULT_KS, tau: float = 0.5,
             dtype=np.float32, metadata: dict | None = None) -> EvalReport:
    """Embed both splits under every regime and compute all metrics.

    The index is built from the training split only; test queries never
    enter it (shared ids raise).
    """
    train_recs = manifest.split("train")
    test_recs = manifest.split("test")
    if not train_recs or not test_recs:
        raise ConfigError("need both train and test splits")
    overlap = {r.sample_id for r in train_recs} & {r.sample_id for r in test_recs}
    if overlap:
        raise ConfigError(f"split leakage: ids in both splits: {sorted(overlap)[:5]}")
    if max(ks) > len(train_recs):
        raise ConfigError(f"k={max(ks)} exceeds index size {len(train_recs)}")

    labels = manifest.labels()
    images = data_io.load_split_images(manifest, dtype=dtype)

    report = EvalReport(metadata=dict(metadata or {}))
    report.metadata.setdefault("n_train", len(train_recs))
    report.metadata.setdefault("n_test", len(test_recs))
    report.metadata.setdefault("tau", tau)

    for regime, params in models.items():
        train_out = _embed_records(params, mconfig, train_recs, images)
        test_out = _embed_records(params, mconfig, test_recs, images)
        index = EmbeddingIndex.build(
            (rid, train_out[rid].embedding, labels[rid])
            for rid in sorted(train_out))
        ja = mean_qam_jaccard(manifest, index, test_out, train_out, tau=tau)
        for k in ks:
            votes = []
            rels = []
            for sample_id, out in test_out.items():
                neighbors = knn_query(index, out.embedding, k)
                votes.append((melanoma_score(neighbors, labels),
                              labels[sample_id].disease == MELANOMA))
                rels.append(rel_at_k(labels[sample_id], neighbors, labels))
            report.rows.append(EvalRow(regime=regime, k=k,
                                       auc=auc(votes),
                                       rel=float(np.mean(rels)),
                                       ja=ja))
    return report


def _embed_records(params, mconfig, records, images, batch: int = 128):
    out = {}
    ids = [r.sample_id for r in records]
    for start in range(0, len(ids), batch):
        chunk = ids[start:start + batch]
        x = np.stack([images[i] for i in chunk])
        emb, maps = model.embed_batch(params, mconfig, x)
        for j, sample_id in enumerate(chunk):
            out[sample_id] = model.EmbeddingOutput(
                embedding=emb[j], filter_maps=maps[j], sample_id=sample_id)
    return out


def sweep_tau(manifest, index, test_outputs, train_outputs,
              taus=tuple(t / 10 for t in range(1, 10))):
    """Mean JA for each binarization threshold; returns {tau: ja}."""
    return {tau: mean_qam_jaccard(manifest, index, test_outputs,
                                  train_outputs, tau=tau)
            for tau in taus}
