"""Descriptor index, exact dot-product search, query expansion, database
augmentation, and graph-diffusion re-ranking.

Everything here is exact: search is a full dot-product scan (the descriptors
are unit vectors, so dot product IS cosine similarity), ties always break by
ascending id, and the diffusion system (I - alpha*S) f = y is solved with
plain conjugate gradient checked against dense solves in the tests.

Negative similarities are clamped to zero before any power weighting (alpha
QE, beta DBA, graph affinities); fractional powers of negatives are not a
thing and the weighting schemes are defined on similarities.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import storage
from .postprocess import l2n
from .storage import DescriptorSet
from .tensor import ShapeError

_NORM_TOL = 1e-6
_DEGREE_FLOOR = 1e-12


class ConvergenceWarning(UserWarning):
    """Diffusion solver returned without hitting its residual target."""


@dataclass
class Index:
    """Immutable id -> unit-descriptor table."""
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        self.vectors = np.array(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ShapeError(f"need one row per id, got {self.vectors.shape} "
                             f"for {len(self.ids)} ids")
        norms = np.linalg.norm(self.vectors, axis=1)
        bad = np.where(np.abs(norms - 1.0) > _NORM_TOL)[0]
        if bad.size:
            raise ValueError(f"index rows must be unit-norm; row {bad[0]} "
                             f"({self.ids[bad[0]]}) has norm {norms[bad[0]]:.8f}")
        self.vectors.flags.writeable = False
        self._pos = {iid: i for i, iid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, iid: str) -> np.ndarray:
        return self.vectors[self._pos[iid]]

    @classmethod
    def from_descriptor_set(cls, ds: DescriptorSet) -> "Index":
        return cls(list(ds.ids), ds.vectors)

    def to_descriptor_set(self) -> DescriptorSet:
        return DescriptorSet(list(self.ids), np.array(self.vectors))


@dataclass
class RankedList:
    query: str
    items: list[tuple[str, float]]

    def __post_init__(self):
        scores = [s for _, s in self.items]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("ranked scores must be non-increasing")

    def ids(self) -> list[str]:
        return [i for i, _ in self.items]


def _ranked_order(ids: list[str], scores: np.ndarray) -> np.ndarray:
    # primary: score descending; secondary: id ascending
    return np.lexsort((np.asarray(ids), -scores))


def search(index: Index, q: np.ndarray, k: int, query_id: str = "query") -> RankedList:
    """Exact top-k by dot product, descending, ties by ascending id."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ShapeError(f"query dim {q.shape[0]} != index dim {index.dim}")
    if not 0 <= k <= len(index):
        raise ValueError(f"k must lie in [0, {len(index)}], got {k}")
    scores = index.vectors @ q
    order = _ranked_order(index.ids, scores)[:k]
    return RankedList(query_id, [(index.ids[i], float(scores[i])) for i in order])


# ---------------------------------------------------------------------------
# query expansion


def _neighbor_rows(ranked: RankedList, index: Index, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    if n > len(ranked.items):
        raise ValueError(f"n={n} exceeds ranked list length {len(ranked.items)}")
    return np.stack([index.row(iid) for iid, _ in ranked.items[:n]]) if n else \
        np.zeros((0, index.dim))


def average_qe(q: np.ndarray, ranked: RankedList, index: Index, n: int) -> np.ndarray:
    """Mean of the query and its top-n neighbors, re-normalized."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if n == 0:
        return q.copy()
    rows = _neighbor_rows(ranked, index, n)
    return l2n((q + rows.sum(axis=0)) / (n + 1))


def alpha_qe(q: np.ndarray, ranked: RankedList, index: Index, n: int,
             alpha: float) -> np.ndarray:
    """Similarity-weighted expansion: neighbor i weighs clamp(q.F(i),0,1)^alpha.

    alpha=0 makes every weight 1 and reduces to average_qe over the same
    neighbors (0^0 counts as 1).
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if n == 0:
        return q.copy()
    rows = _neighbor_rows(ranked, index, n)
    w = np.clip(rows @ q, 0.0, 1.0) ** alpha
    return l2n(q + w @ rows)


# ---------------------------------------------------------------------------
# database-side augmentation


def dba(index: Index, n: int, beta: float | None = None) -> Index:
    """Replace every row by a combination of itself and its top-n neighbors.

    Plain DBA (beta=None) is the mean of the row and its neighbors; beta-DBA
    weighs neighbor j by clamp(sim,0,1)^beta and the row itself by 1. All
    neighbor lookups use the ORIGINAL rows, so augmentation never cascades.
    """
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    if n >= len(index) and n > 0:
        raise ValueError(f"n={n} needs at least {n + 1} index rows, have {len(index)}")
    if beta is not None and beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    if n == 0:
        return Index(list(index.ids), np.array(index.vectors))
    v = index.vectors
    sims = v @ v.T
    out = np.empty_like(v)
    for i in range(len(index)):
        row_scores = sims[i].copy()
        row_scores[i] = -np.inf  # self excluded from its own neighbor list
        order = _ranked_order(index.ids, row_scores)[:n]
        nbrs = v[order]
        if beta is None:
            combined = (v[i] + nbrs.sum(axis=0)) / (n + 1)
        else:
            w = np.clip(sims[i][order], 0.0, 1.0) ** beta
            combined = v[i] + w @ nbrs
        out[i] = l2n(combined)
    return Index(list(index.ids), out)


# ---------------------------------------------------------------------------
# diffusion


@dataclass
class DiffusionParams:
    k_nn: int = 50
    alpha: float = 0.99
    exponent: float = 3.0
    tol: float = 1e-6
    max_iter: int = 200
    truncation: int | None = None

    def __post_init__(self):
        if self.k_nn < 1:
            raise ValueError(f"k_nn must be >= 1, got {self.k_nn}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.exponent < 0:
            raise ValueError(f"exponent must be nonnegative, got {self.exponent}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")
        if self.truncation is not None and self.truncation < 1:
            raise ValueError(f"truncation must be >= 1 or None, got {self.truncation}")


@dataclass
class KnnGraph:
    ids: list[str]
    affinity: sp.csr_matrix     # A: symmetric, zero diagonal
    transition: sp.csr_matrix   # S = D^{-1/2} A D^{-1/2}
    k_nn: int
    exponent: float


def build_knn_graph(index: Index, params: DiffusionParams) -> KnnGraph:
    """Mutual-or-either kNN affinity with powered clamped similarities."""
    if len(index) == 0:
        raise ValueError("cannot build a graph over an empty index")
    n = len(index)
    k = min(params.k_nn, n - 1) if n > 1 else 0
    v = index.vectors
    sims = v @ v.T
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        row = sims[i].copy()
        row[i] = -np.inf
        order = _ranked_order(index.ids, row)[:k]
        mask[i, order] = True
    mask |= mask.T
    a = np.where(mask, np.clip(sims, 0.0, 1.0) ** params.exponent, 0.0)
    np.fill_diagonal(a, 0.0)
    deg = np.maximum(a.sum(axis=1), _DEGREE_FLOOR)
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    s = a * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]
    return KnnGraph(list(index.ids), sp.csr_matrix(a), sp.csr_matrix(s),
                    k_nn=params.k_nn, exponent=params.exponent)


def diffusion_seed(index: Index, q: np.ndarray, params: DiffusionParams) -> np.ndarray:
    """Clamped powered query similarities, zeroed outside the top k_nn."""
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.dim:
        raise ShapeError(f"query dim {q.shape[0]} != index dim {index.dim}")
    sims = index.vectors @ q
    k = min(params.k_nn, len(index))
    keep = _ranked_order(index.ids, sims)[:k]
    y = np.zeros(len(index))
    y[keep] = np.clip(sims[keep], 0.0, 1.0) ** params.exponent
    return y


@dataclass
class DiffusionResult:
    scores: np.ndarray
    converged: bool
    iterations: int
    residual: float


def diffuse(graph: KnnGraph, y: np.ndarray, params: DiffusionParams) -> DiffusionResult:
    """Solve (I - alpha*S) f = y by conjugate gradient.

    The system is symmetric positive definite for alpha < 1 (S has spectral
    radius <= 1). Convergence target is residual norm <= tol * max(1, |y|).
    On non-convergence the best iterate seen is returned, flagged, with a
    warning carrying the residual.
    """
    s = graph.transition
    n = s.shape[0]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"seed length {y.shape[0]} != graph size {n}")
    if params.alpha == 0.0:
        return DiffusionResult(y.copy(), True, 0, 0.0)

    def apply(x):
        return x - params.alpha * (s @ x)

    target = params.tol * max(1.0, float(np.linalg.norm(y)))
    x = np.zeros(n)
    r = y - apply(x)
    p = r.copy()
    rs = float(r @ r)
    best_x, best_res = x.copy(), float(np.sqrt(rs))
    if best_res <= target:
        return DiffusionResult(best_x, True, 0, best_res)
    for it in range(1, params.max_iter + 1):
        ap = apply(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            break
        step = rs / denom
        x = x + step * p
        r = r - step * ap
        res = float(np.linalg.norm(r))
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= target:
            return DiffusionResult(x, True, it, res)
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    warnings.warn(f"diffusion CG stopped after {params.max_iter} iterations "
                  f"with residual {best_res:.3e} (target {target:.3e})",
                  ConvergenceWarning)
    return DiffusionResult(best_x, False, params.max_iter, best_res)


def _rank_by_scores(ids: list[str], scores: np.ndarray, query_id: str) -> RankedList:
    order = _ranked_order(ids, scores)
    return RankedList(query_id, [(ids[i], float(scores[i])) for i in order])


def rerank_with_diffusion(index: Index, q: np.ndarray, params: DiffusionParams,
                          graph: KnnGraph | None = None,
                          query_id: str = "query") -> RankedList:
    """Full ranking of the index by diffusion scores.

    With truncation set, only the top-T items by dot product are re-ranked
    on their subgraph; the tail keeps its dot-product order, scored strictly
    below the re-ranked head.
    """
    t = params.truncation
    if t is not None and t < len(index):
        base = search(index, q, len(index), query_id)
        head_ids = [iid for iid, _ in base.items[:t]]
        sub = Index(head_ids, np.stack([index.row(i) for i in head_ids]))
        sub_graph = build_knn_graph(sub, params)
        result = diffuse(sub_graph, diffusion_seed(sub, q, params), params)
        head = _rank_by_scores(sub.ids, result.scores, query_id)
        floor = min(s for _, s in head.items) if head.items else 0.0
        gap = 1e-9 * max(1.0, abs(floor))
        tail = [(iid, floor - (j + 1) * gap)
                for j, (iid, _) in enumerate(base.items[t:])]
        return RankedList(query_id, head.items + tail)
    graph = graph or build_knn_graph(index, params)
    result = diffuse(graph, diffusion_seed(index, q, params), params)
    return _rank_by_scores(graph.ids, result.scores, query_id)


# ---------------------------------------------------------------------------
# combined pipeline


@dataclass
class RetrievalPipeline:
    """Augmentation stack applied in a fixed order: DBA reshapes the index
    once, QE expands each query, diffusion re-ranks on the final index."""
    dba_n: int = 0
    dba_beta: float | None = None
    qe_n: int = 0
    qe_alpha: float = 0.0
    diffusion: DiffusionParams | None = None


def run_pipeline(index: Index, queries: DescriptorSet,
                 pipeline: RetrievalPipeline) -> dict[str, RankedList]:
    """Full-length rankings for every query under the configured stack."""
    work = dba(index, pipeline.dba_n, pipeline.dba_beta) if pipeline.dba_n \
        else index
    graph = None
    if pipeline.diffusion is not None and pipeline.diffusion.truncation is None:
        graph = build_knn_graph(work, pipeline.diffusion)
    out: dict[str, RankedList] = {}
    for qid in queries.ids:
        q = queries.row(qid)
        if pipeline.qe_n:
            ranked = search(work, q, len(work), qid)
            q = alpha_qe(q, ranked, work, pipeline.qe_n, pipeline.qe_alpha)
        if pipeline.diffusion is not None:
            out[qid] = rerank_with_diffusion(work, q, pipeline.diffusion,
                                             graph, qid)
        else:
            out[qid] = search(work, q, len(work), qid)
    return out


# ---------------------------------------------------------------------------
# persistence


def save_index(index: Index, path: str) -> None:
    storage.save_descriptor_set(index.to_descriptor_set(), path,
                                extra={"kind": "index"})


def load_index(path: str) -> Index:
    return Index.from_descriptor_set(storage.load_descriptor_set(path))


def save_knn_graph(graph: KnnGraph, path: str) -> None:
    """Triplet cache: COO rows/cols/values of A plus a JSON header."""
    coo = graph.affinity.tocoo()
    triplets = np.stack([coo.row.astype(np.float64),
                         coo.col.astype(np.float64), coo.data])
    tensor_file = path[:-5] + ".agtf" if path.endswith(".json") else path + ".agtf"
    storage.write_tensor(tensor_file, triplets)
    storage.write_json(path, {"kind": "knn_graph", "nodes": len(graph.ids),
                              "k": graph.k_nn, "exponent": graph.exponent,
                              "nnz": int(coo.nnz), "ids": graph.ids,
                              "tensor": tensor_file.rsplit("/", 1)[-1]})


def load_knn_graph(path: str) -> KnnGraph:
    import os
    header = storage.read_json(path)
    if header.get("kind") != "knn_graph":
        raise storage.FormatError(f"{path}: not a kNN graph cache")
    trip = storage.read_tensor(os.path.join(os.path.dirname(path) or ".",
                                            header["tensor"]))
    if trip.ndim != 2 or trip.shape[0] != 3 or trip.shape[1] != header["nnz"]:
        raise storage.FormatError("graph triplet tensor shape mismatch")
    n = int(header["nodes"])
    a = sp.csr_matrix((trip[2], (trip[0].astype(int), trip[1].astype(int))),
                      shape=(n, n))
    deg = np.maximum(np.asarray(a.sum(axis=1)).reshape(-1), _DEGREE_FLOOR)
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    s = d_inv_sqrt @ a @ d_inv_sqrt
    return KnnGraph(list(header["ids"]), a, sp.csr_matrix(s),
                    k_nn=int(header["k"]), exponent=float(header["exponent"]))
