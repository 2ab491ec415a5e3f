"""The retrieval augmentation stack on a clustered toy database:
plain search, database-side augmentation, query expansion, and
diffusion re-ranking, each scored by mean average precision.
"""
import numpy as np

from agem import (MEDIUM, DescriptorSet, DiffusionParams, GroundTruth, Index,
                  QueryLabels, RetrievalPipeline, evaluate, search,
                  sweep_dba_qe)

rng = np.random.default_rng(41)
n_clusters, per_cluster, d = 10, 20, 16

centers = rng.normal(size=(n_clusters, d))
centers /= np.linalg.norm(centers, axis=1, keepdims=True)

ids, vecs, gt = [], [], {}
for c in range(n_clusters):
    members = []
    for j in range(per_cluster):
        v = centers[c] + 0.3 * rng.normal(size=d)
        iid = f"db_{c:02d}_{j:02d}"
        ids.append(iid)
        vecs.append(v / np.linalg.norm(v))
        members.append(iid)
    # noisier probes of the same cluster act as queries
    for j in range(2):
        qv = centers[c] + 0.55 * rng.normal(size=d)
        gt[f"q_{c:02d}_{j}"] = (qv / np.linalg.norm(qv),
                                QueryLabels(easy=set(members[:10]),
                                            hard=set(members[10:]),
                                            unclear=set()))

index = Index(ids, np.stack(vecs))
queries = DescriptorSet(sorted(gt), np.stack([gt[q][0] for q in sorted(gt)]))
truth = GroundTruth({q: labels for q, (_, labels) in gt.items()})

# one query up close: its own cluster should dominate the top ranks
first = queries.ids[0]
top = search(index, queries.row(first), 5, first)
print("top 5 for", first)
for iid, score in top.items:
    print(f"  {iid}  {score:.4f}")

stages = [
    ("baseline", RetrievalPipeline()),
    ("+ dba(2)", RetrievalPipeline(dba_n=2)),
    ("+ alpha-qe", RetrievalPipeline(dba_n=2, qe_n=5, qe_alpha=3.0)),
    ("diffusion", RetrievalPipeline(
        diffusion=DiffusionParams(k_nn=10, alpha=0.9))),
]
print("\nstage        mAP (medium)")
for name, pipe in stages:
    res = evaluate(index, queries, truth, MEDIUM, pipe)
    print(f"{name:<12} {res.map:.4f}")

# neighbor counts are worth sweeping; more is not always better
print("\n dba  qe   mAP")
for dn, qn, m in sweep_dba_qe(index, queries, truth, [0, 2, 5], [0, 5], MEDIUM):
    print(f"{dn:4d}{qn:4d}   {m:.4f}")
