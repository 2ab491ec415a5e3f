"""mAP evaluation under the revisited Medium/Hard protocols, plus the
neighbor-count and exponent sweep grids.

Labels per query come in three disjoint buckets: easy, hard, unclear.
Medium scores easy+hard as positives and ignores unclear; Hard scores only
hard and ignores easy+unclear. Ignored ("junk") ids are deleted from the
ranking before precision is computed, so they neither help nor hurt.

AP uses the trapezoidal convention of the benchmark family: each positive
hit at post-removal rank r contributes the average of precision at r and
precision at r-1 (precision at rank 0 is defined as 1), divided by the
total number of positives. Positives missing from the ranking contribute
zero recall mass. Queries with no positives under a protocol are skipped
with a warning and excluded from the mean.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import storage
from .retrieval import Index, RankedList, RetrievalPipeline, run_pipeline
from .storage import DescriptorSet

LABEL_KEYS = ("easy", "hard", "unclear")


@dataclass
class QueryLabels:
    easy: frozenset
    hard: frozenset
    unclear: frozenset

    def __post_init__(self):
        self.easy = frozenset(self.easy)
        self.hard = frozenset(self.hard)
        self.unclear = frozenset(self.unclear)
        if self.easy & self.hard or self.easy & self.unclear or self.hard & self.unclear:
            raise ValueError("easy/hard/unclear sets must be disjoint")


@dataclass
class GroundTruth:
    queries: dict[str, QueryLabels]

    def validate_against(self, database_ids) -> None:
        known = set(database_ids)
        for qid, labels in self.queries.items():
            stray = (labels.easy | labels.hard | labels.unclear) - known
            if stray:
                raise ValueError(f"query {qid}: labels reference unknown "
                                 f"database ids {sorted(stray)[:5]}")


def load_ground_truth(path: str) -> GroundTruth:
    obj = storage.read_json(path)
    if not isinstance(obj, dict) or "queries" not in obj:
        raise storage.FormatError(f"{path}: expected top-level 'queries' mapping")
    queries = {}
    for qid, entry in obj["queries"].items():
        if not isinstance(entry, dict):
            raise storage.FormatError(f"{path}: query {qid} entry must be an object")
        sets = {}
        for key in LABEL_KEYS:
            val = entry.get(key, [])
            if not isinstance(val, list):
                raise storage.FormatError(f"{path}: query {qid} field {key} "
                                          "must be a list")
            sets[key] = frozenset(str(v) for v in val)
        queries[qid] = QueryLabels(**sets)
    return GroundTruth(queries)


def save_ground_truth(gt: GroundTruth, path: str) -> None:
    obj = {"queries": {qid: {k: sorted(getattr(labels, k)) for k in LABEL_KEYS}
                       for qid, labels in gt.queries.items()}}
    storage.write_json(path, obj)


@dataclass(frozen=True)
class ProtocolSpec:
    name: str

    def positives(self, labels: QueryLabels) -> frozenset:
        if self.name == "medium":
            return labels.easy | labels.hard
        return labels.hard

    def junk(self, labels: QueryLabels) -> frozenset:
        if self.name == "medium":
            return labels.unclear
        return labels.easy | labels.unclear


MEDIUM = ProtocolSpec("medium")
HARD = ProtocolSpec("hard")


def protocol_by_name(name: str) -> ProtocolSpec:
    key = name.lower()
    if key not in ("medium", "hard"):
        raise ValueError(f"unknown protocol {name!r}; expected medium or hard")
    return MEDIUM if key == "medium" else HARD


def average_precision(ranked: RankedList, positives, junk) -> float:
    """Trapezoidal AP over the junk-stripped ranking.

    Depends only on the order of ids, never on the attached scores.
    """
    positives = frozenset(positives)
    junk = frozenset(junk)
    if not positives:
        raise ValueError("average_precision needs a nonempty positive set")
    ap = 0.0
    hits = 0
    rank = 0
    for iid in ranked.ids():
        if iid in junk:
            continue
        rank += 1
        if iid in positives:
            hits += 1
            prec_here = hits / rank
            prec_prev = (hits - 1) / (rank - 1) if rank > 1 else 1.0
            ap += (prec_here + prec_prev) / 2.0
    return ap / len(positives)


@dataclass
class EvalResult:
    map: float
    per_query: dict[str, float]
    skipped: list[str]


def evaluate(index: Index, queries: DescriptorSet, gt: GroundTruth,
             protocol: ProtocolSpec,
             pipeline: RetrievalPipeline | None = None) -> EvalResult:
    """mAP of the configured pipeline; mean over non-skipped queries."""
    for qid in queries.ids:
        if qid not in gt.queries:
            raise KeyError(f"query {qid} has no ground-truth entry")
    rankings = run_pipeline(index, queries, pipeline or RetrievalPipeline())
    per_query: dict[str, float] = {}
    skipped: list[str] = []
    for qid in sorted(queries.ids):
        labels = gt.queries[qid]
        pos = protocol.positives(labels)
        if not pos:
            warnings.warn(f"query {qid}: no positives under {protocol.name}; skipped")
            skipped.append(qid)
            continue
        per_query[qid] = average_precision(rankings[qid], pos, protocol.junk(labels))
    if not per_query:
        raise ValueError(f"every query was skipped under {protocol.name}")
    return EvalResult(map=float(np.mean([per_query[q] for q in sorted(per_query)])),
                      per_query=per_query, skipped=skipped)


# ---------------------------------------------------------------------------
# sweep grids


def sweep_dba_qe(index: Index, queries: DescriptorSet, gt: GroundTruth,
                 dba_counts, qe_counts, protocol: ProtocolSpec,
                 dba_beta: float | None = None, qe_alpha: float = 0.0):
    """mAP over the (DBA neighbors) x (QE neighbors) grid.

    Every cell starts from the original index; DBA never cascades across
    cells. Rows come out in input order: (dba_n, qe_n, mAP).
    """
    rows = []
    for dn in dba_counts:
        for qn in qe_counts:
            pipe = RetrievalPipeline(dba_n=int(dn), dba_beta=dba_beta,
                                     qe_n=int(qn), qe_alpha=qe_alpha)
            res = evaluate(index, queries, gt, protocol, pipe)
            rows.append((int(dn), int(qn), res.map))
    return rows


def sweep_alpha_beta(index: Index, queries: DescriptorSet, gt: GroundTruth,
                     alphas, betas, n_dba: int, n_qe: int,
                     protocol: ProtocolSpec):
    """mAP over the (QE alpha) x (DBA beta) grid at fixed neighbor counts."""
    rows = []
    for a in alphas:
        for b in betas:
            pipe = RetrievalPipeline(dba_n=n_dba, dba_beta=float(b),
                                     qe_n=n_qe, qe_alpha=float(a))
            res = evaluate(index, queries, gt, protocol, pipe)
            rows.append((float(a), float(b), res.map))
    return rows


def _fmt(value) -> str:
    return f"{value:.6f}" if isinstance(value, float) else str(value)


def write_sweep_csv(path: str, columns, rows, seed: int | None = None) -> None:
    """CSV with a header row; floats carry 6 decimals; optional seed comment."""
    def emit(f):
        if seed is not None:
            f.write(f"# seed={seed}\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    storage.atomic_text_write(path, emit)
