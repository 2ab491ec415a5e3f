"""Benchmark ground-truth conversion into the engine's JSON."""

import os
import pickle

import pytest

import agem.evaluation as engine_eval
from agem_bridge import convert_ground_truth


def fixture_gnd():
    imlist = [f"img{i:02d}" for i in range(12)]
    qimlist = ["q_a", "q_b", "q_c"]
    gnd = [
        {"easy": [0, 1], "hard": [2], "junk": [3], "bbx": [10.0, 4.0, 200.5, 150.0]},
        {"easy": [4], "hard": [5, 6], "junk": [], "bbx": [0.0, 0.0, 64.0, 64.0]},
        {"easy": [], "hard": [7, 8], "junk": [9, 10]},
    ]
    return {"imlist": imlist, "qimlist": qimlist, "gnd": gnd}


def test_convert_maps_junk_to_unclear():
    out = convert_ground_truth(fixture_gnd())
    assert sorted(out["queries"]) == ["q_a", "q_b", "q_c"]
    qa = out["queries"]["q_a"]
    assert qa == {"easy": ["img00", "img01"], "hard": ["img02"],
                  "unclear": ["img03"]}
    assert out["queries"]["q_c"]["unclear"] == ["img09", "img10"]
    assert out["crop_boxes"]["q_a"] == [10.0, 4.0, 200.5, 150.0]
    assert "q_c" not in out["crop_boxes"]


def test_engine_round_trip(tmp_path):
    path = os.path.join(tmp_path, "gt.json")
    out = convert_ground_truth(fixture_gnd(), output_path=path)
    gt = engine_eval.load_ground_truth(path)
    for qid, sets in out["queries"].items():
        labels = gt.queries[qid]
        assert labels.easy == frozenset(sets["easy"])
        assert labels.hard == frozenset(sets["hard"])
        assert labels.unclear == frozenset(sets["unclear"])
    medium = engine_eval.protocol_by_name("medium")
    assert medium.positives(gt.queries["q_a"]) == frozenset(["img00", "img01",
                                                             "img02"])


def test_pickle_source_and_idempotence(tmp_path):
    src = os.path.join(tmp_path, "gnd.pkl")
    with open(src, "wb") as fh:
        pickle.dump(fixture_gnd(), fh)
    assert convert_ground_truth(src) == convert_ground_truth(fixture_gnd())


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d.pop("imlist"), "imlist"),
    (lambda d: d["gnd"].pop(), "gnd records for"),
    (lambda d: d["gnd"][0]["easy"].append(2), "overlap"),
    (lambda d: d["gnd"][1]["hard"].append(99), "outside"),
    (lambda d: d["gnd"][0].update(bbx=[1.0, 2.0]), "4 values"),
    (lambda d: d["gnd"].__setitem__(0, "oops"), "must be a dict"),
])
def test_malformed_sources_rejected(mutate, msg):
    src = fixture_gnd()
    mutate(src)
    with pytest.raises(ValueError, match=msg):
        convert_ground_truth(src)


def test_non_dict_pickle_rejected(tmp_path):
    src = os.path.join(tmp_path, "bad.pkl")
    with open(src, "wb") as fh:
        pickle.dump([1, 2, 3], fh)
    with pytest.raises(ValueError, match="dict at top level"):
        convert_ground_truth(src)
