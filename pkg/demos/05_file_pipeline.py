"""The same pipeline driven purely through files and the command line:
feature-map manifest in, descriptors, whitening, index, rankings, and an
evaluation report out. Everything an external producer needs to
interoperate is shown here.
"""
import json
import os
import tempfile

import numpy as np

from agem import storage
from agem.cli import main

work = tempfile.mkdtemp()
rng = np.random.default_rng(7)

# fake backbone exports: one tap tensor per image, float32 on disk
entries = []
gt = {"queries": {}}
for c in range(3):
    center = rng.normal(size=(6, 5, 5)) * 2
    members = [f"scene{c}_{j}" for j in range(4)]
    for iid in members:
        fmap = np.abs(center + 0.3 * rng.normal(size=(6, 5, 5))) + 0.05
        storage.write_tensor(os.path.join(work, f"{iid}.agtf"),
                             fmap.astype(np.float32))
        entries.append({"id": iid,
                        "scales": [{"scale": 1.0,
                                    "taps": {"B5_3": f"{iid}.agtf"}}]})
    gt["queries"][members[0]] = {"easy": members[1:3],
                                 "hard": [members[3]], "unclear": []}

with open(os.path.join(work, "maps.json"), "w") as f:
    json.dump({"kind": "feature_maps", "backbone": "demo",
               "longer_side": 64, "images": entries}, f)
with open(os.path.join(work, "gt.json"), "w") as f:
    json.dump(gt, f)

run = lambda *args: print(" $ agem", " ".join(args)) or main(list(args))

rc = run("extract", "--maps", os.path.join(work, "maps.json"),
         "--descriptor", "gem", "--p", "3.0", "--output-dir", work)
assert rc == 0

# queries are the first image of each cluster; subset the descriptor file
ds = storage.load_descriptor_set(os.path.join(work, "descriptors.json"))
qids = sorted(gt["queries"])
queries = storage.DescriptorSet(qids, np.stack([ds.row(q) for q in qids]))
storage.save_descriptor_set(queries, os.path.join(work, "queries.json"))

rc = run("index", "--descriptors", os.path.join(work, "descriptors.json"),
         "--output-dir", work)
assert rc == 0

rc = run("search", "--index", os.path.join(work, "index.json"),
         "--queries", os.path.join(work, "queries.json"), "--k", "3",
         "--output-dir", work)
assert rc == 0
print("\nrankings.csv head:")
for line in open(os.path.join(work, "rankings.csv")).readlines()[:6]:
    print(" ", line.rstrip())

rc = run("evaluate", "--index", os.path.join(work, "index.json"),
         "--queries", os.path.join(work, "queries.json"),
         "--gt", os.path.join(work, "gt.json"), "--protocol", "medium",
         "--output-dir", work)
assert rc == 0

report = json.load(open(os.path.join(work, "evaluate_medium.json")))
print("\nreport:", json.dumps(report, indent=2)[:240], "...")
print("\nall outputs under", work)
