"""Benchmark ground truth to the engine's GroundTruth JSON.

The revisited landmark benchmarks ship a pickle with three parallel
structures: imlist (database image names), qimlist (query image names) and
gnd, one record per query with easy / hard / junk database indices plus a
query crop box. The engine wants per-query easy / hard / unclear id lists;
junk maps to unclear. Crop boxes ride along in the same JSON under a key
the engine ignores, so the file both evaluates and documents the export.
"""

from __future__ import annotations

import json
import os
import pickle
import tempfile

_SET_KEYS = ("easy", "hard", "junk")


def _load_source(source) -> dict:
    if isinstance(source, dict):
        return source
    with open(source, "rb") as fh:
        obj = pickle.load(fh)
    if not isinstance(obj, dict):
        raise ValueError(f"{source}: expected a dict at top level")
    return obj


def _names(imlist, indices, qid, key):
    out = []
    for idx in indices:
        if not isinstance(idx, int) or not 0 <= idx < len(imlist):
            raise ValueError(f"query {qid!r}: {key} index {idx!r} outside "
                             f"the database list of {len(imlist)}")
        out.append(str(imlist[idx]))
    return out


def convert_ground_truth(source, output_path=None) -> dict:
    """Pickle path or loaded dict in, engine GroundTruth JSON dict out."""
    obj = _load_source(source)
    for key in ("imlist", "qimlist", "gnd"):
        if key not in obj or not isinstance(obj[key], list):
            raise ValueError(f"ground truth needs a {key!r} list")
    imlist, qimlist, gnd = obj["imlist"], obj["qimlist"], obj["gnd"]
    if len(gnd) != len(qimlist):
        raise ValueError(f"{len(gnd)} gnd records for {len(qimlist)} queries")

    queries = {}
    boxes = {}
    for qid, record in zip(map(str, qimlist), gnd):
        if not isinstance(record, dict):
            raise ValueError(f"query {qid!r}: gnd record must be a dict")
        sets = {key: _names(imlist, record.get(key, []), qid, key)
                for key in _SET_KEYS}
        flat = sets["easy"] + sets["hard"] + sets["junk"]
        if len(set(flat)) != len(flat):
            raise ValueError(f"query {qid!r}: easy/hard/junk sets overlap")
        queries[qid] = {"easy": sorted(sets["easy"]),
                        "hard": sorted(sets["hard"]),
                        "unclear": sorted(sets["junk"])}
        if "bbx" in record:
            bbx = [float(v) for v in record["bbx"]]
            if len(bbx) != 4:
                raise ValueError(f"query {qid!r}: crop box needs 4 values, "
                                 f"got {len(bbx)}")
            boxes[qid] = bbx

    out = {"queries": queries, "crop_boxes": boxes}
    if output_path is not None:
        d = os.path.dirname(os.path.abspath(output_path))
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-gt-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(out, fh, indent=2, sort_keys=True)
                fh.write("\n")
            os.replace(tmp, output_path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    return out
