"""Protocol evaluation tests.

Average precision is checked against hand-derived values, an independent
recall-precision oracle, and invariance properties (scores never matter,
junk never matters, moving a positive up never hurts).
"""

import numpy as np
import pytest

from agem.evaluation import (HARD, LABEL_KEYS, MEDIUM, GroundTruth,
                             QueryLabels, average_precision, evaluate,
                             load_ground_truth, protocol_by_name,
                             save_ground_truth, sweep_alpha_beta,
                             sweep_dba_qe, write_sweep_csv)
from agem.retrieval import Index, RankedList, RetrievalPipeline
from agem.storage import DescriptorSet, FormatError


def ranked_from_ids(ids):
    n = len(ids)
    return RankedList("q", [(iid, float(n - i)) for i, iid in enumerate(ids)])


def oracle_ap(ids, positives, junk):
    """Independent oracle: trapezoidal area under the recall-precision
    steps, with precision 1 extrapolated before the first hit."""
    kept = [i for i in ids if i not in junk]
    ap = 0.0
    hits = 0
    prev_prec = 1.0
    for rank, iid in enumerate(kept, start=1):
        if iid in positives:
            hits += 1
            prec = hits / rank
            ap += (prec + prev_prec) / 2.0 / len(positives)
            prev_prec = prec
        else:
            prev_prec = hits / rank
    return ap


class TestAveragePrecision:
    def test_perfect_ranking(self):
        r = ranked_from_ids(["p1", "p2", "n1", "n2"])
        assert average_precision(r, {"p1", "p2"}, set()) == 1.0

    def test_hand_derived_two_hits(self):
        # hits at ranks 1 and 3: ((1+1)/2 + (2/3+1/2)/2) / 2 = 0.7916667
        r = ranked_from_ids(["p1", "n1", "p2", "n2"])
        got = average_precision(r, {"p1", "p2"}, set())
        assert abs(got - 0.7916666666666667) < 1e-12

    def test_single_positive_at_rank_k(self):
        for k in range(1, 6):
            ids = [f"n{i}" for i in range(k - 1)] + ["p"]
            got = average_precision(ranked_from_ids(ids), {"p"}, set())
            prev = 0.0 if k > 1 else 1.0
            assert abs(got - (1.0 / k + prev) / 2.0) < 1e-12

    def test_scores_are_ignored(self):
        ids = ["a", "p", "b", "q"]
        r1 = RankedList("x", [(i, float(9 - j)) for j, i in enumerate(ids)])
        r2 = RankedList("x", [(i, 0.0) for i in ids])
        assert average_precision(r1, {"p", "q"}, set()) == \
            average_precision(r2, {"p", "q"}, set())

    def test_junk_removed_before_ranking(self):
        clean = ranked_from_ids(["p1", "n1", "p2"])
        dirty = ranked_from_ids(["j1", "p1", "j2", "n1", "j3", "p2"])
        junk = {"j1", "j2", "j3"}
        assert average_precision(dirty, {"p1", "p2"}, junk) == \
            average_precision(clean, {"p1", "p2"}, set())

    def test_junk_insertion_fuzz(self):
        rng = np.random.default_rng(0)
        base = [f"i{k}" for k in range(12)]
        positives = set(rng.choice(base, size=4, replace=False).tolist())
        reference = average_precision(ranked_from_ids(base), positives, set())
        for trial in range(30):
            ids = list(base)
            junk = set()
            for j in range(rng.integers(1, 6)):
                jid = f"junk{trial}_{j}"
                ids.insert(int(rng.integers(0, len(ids) + 1)), jid)
                junk.add(jid)
            assert average_precision(ranked_from_ids(ids), positives, junk) \
                == reference

    def test_matches_independent_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(3, 25))
            ids = [f"i{k}" for k in range(n)]
            rng.shuffle(ids)
            pos = set(rng.choice(ids, size=int(rng.integers(1, n)),
                                 replace=False).tolist())
            junk = set(i for i in ids
                       if i not in pos and rng.random() < 0.2)
            got = average_precision(ranked_from_ids(ids), pos, junk)
            want = oracle_ap(ids, pos, junk)
            assert abs(got - want) < 1e-12

    def test_moving_positive_up_never_hurts(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            ids = [f"i{k}" for k in range(10)]
            pos = set(rng.choice(ids, size=3, replace=False).tolist())
            before = average_precision(ranked_from_ids(ids), pos, set())
            # swap a positive one slot up past a negative
            for r in range(1, 10):
                if ids[r] in pos and ids[r - 1] not in pos:
                    ids[r], ids[r - 1] = ids[r - 1], ids[r]
                    break
            after = average_precision(ranked_from_ids(ids), pos, set())
            assert after >= before - 1e-15

    def test_empty_positives_rejected(self):
        with pytest.raises(ValueError):
            average_precision(ranked_from_ids(["a"]), set(), set())


class TestProtocols:
    def test_set_algebra(self):
        labels = QueryLabels(easy={"e1", "e2"}, hard={"h1"}, unclear={"u1"})
        assert MEDIUM.positives(labels) == {"e1", "e2", "h1"}
        assert MEDIUM.junk(labels) == {"u1"}
        assert HARD.positives(labels) == {"h1"}
        assert HARD.junk(labels) == {"e1", "e2", "u1"}

    def test_lookup_by_name(self):
        assert protocol_by_name("medium") is MEDIUM
        assert protocol_by_name("HARD") is HARD
        with pytest.raises(ValueError):
            protocol_by_name("easy")

    def test_disjointness_enforced(self):
        with pytest.raises(ValueError):
            QueryLabels(easy={"x"}, hard={"x"}, unclear=set())


class TestGroundTruthIO:
    def _gt(self):
        return GroundTruth({
            "q0": QueryLabels(easy={"a", "b"}, hard={"c"}, unclear={"d"}),
            "q1": QueryLabels(easy=set(), hard={"a"}, unclear=set()),
        })

    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "gt.json")
        save_ground_truth(self._gt(), path)
        back = load_ground_truth(path)
        for qid, labels in self._gt().queries.items():
            for key in LABEL_KEYS:
                assert getattr(back.queries[qid], key) == getattr(labels, key)

    def test_validate_against_database(self):
        gt = self._gt()
        gt.validate_against(["a", "b", "c", "d"])
        with pytest.raises(ValueError, match="unknown"):
            gt.validate_against(["a", "b"])

    def test_malformed_files_rejected(self, tmp_path):
        import json
        cases = [
            {"not_queries": {}},
            {"queries": {"q": "not an object"}},
            {"queries": {"q": {"easy": "not a list"}}},
        ]
        for i, obj in enumerate(cases):
            path = tmp_path / f"bad{i}.json"
            path.write_text(json.dumps(obj))
            with pytest.raises(FormatError):
                load_ground_truth(str(path))

    def test_overlapping_labels_rejected_on_load(self, tmp_path):
        import json
        path = tmp_path / "overlap.json"
        path.write_text(json.dumps(
            {"queries": {"q": {"easy": ["x"], "hard": ["x"], "unclear": []}}}))
        with pytest.raises(ValueError):
            load_ground_truth(str(path))


def make_eval_setup(seed=3, n_db=18, n_q=3, d=6):
    """Database plus queries where each query's true cluster is known."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_q, d)) * 3
    ids, vecs, gt_queries = [], [], {}
    for c in range(n_q):
        members = []
        for j in range(n_db // n_q):
            v = centers[c] + rng.normal(size=d) * 0.3
            iid = f"db{c}_{j}"
            ids.append(iid)
            vecs.append(v / np.linalg.norm(v))
            members.append(iid)
        gt_queries[f"q{c}"] = QueryLabels(easy=set(members[:3]),
                                          hard=set(members[3:]),
                                          unclear=set())
    index = Index(ids, np.stack(vecs))
    qv = np.stack([c / np.linalg.norm(c) for c in centers])
    queries = DescriptorSet([f"q{c}" for c in range(n_q)], qv)
    return index, queries, GroundTruth(gt_queries)


class TestEvaluate:
    def test_separable_clusters_score_high(self):
        index, queries, gt = make_eval_setup()
        res = evaluate(index, queries, gt, MEDIUM)
        assert res.map > 0.9
        assert sorted(res.per_query) == ["q0", "q1", "q2"]
        assert res.skipped == []

    def test_missing_ground_truth_is_an_error(self):
        index, queries, gt = make_eval_setup()
        del gt.queries["q1"]
        with pytest.raises(KeyError, match="q1"):
            evaluate(index, queries, gt, MEDIUM)

    def test_queries_without_positives_skip_with_warning(self):
        index, queries, gt = make_eval_setup()
        old = gt.queries["q2"]
        gt.queries["q2"] = QueryLabels(easy=old.easy | old.hard, hard=set(),
                                       unclear=old.unclear)
        with pytest.warns(UserWarning, match="q2"):
            res = evaluate(index, queries, gt, HARD)
        assert res.skipped == ["q2"]
        assert "q2" not in res.per_query

    def test_all_skipped_is_an_error(self):
        index, queries, gt = make_eval_setup()
        for qid in list(gt.queries):
            old = gt.queries[qid]
            gt.queries[qid] = QueryLabels(easy=old.easy | old.hard,
                                          hard=set(), unclear=old.unclear)
        with pytest.warns(UserWarning):
            with pytest.raises(ValueError, match="skipped"):
                evaluate(index, queries, gt, HARD)

    def test_map_is_mean_of_per_query(self):
        index, queries, gt = make_eval_setup(seed=4)
        res = evaluate(index, queries, gt, MEDIUM)
        assert abs(res.map - np.mean(sorted(res.per_query.values()))) < 1e-15


class TestSweeps:
    def test_grid_shape_and_order(self):
        index, queries, gt = make_eval_setup(seed=5)
        rows = sweep_dba_qe(index, queries, gt, [0, 1], [0, 2], MEDIUM)
        assert [(r[0], r[1]) for r in rows] == [(0, 0), (0, 2), (1, 0), (1, 2)]
        for _, _, m in rows:
            assert 0.0 <= m <= 1.0

    def test_degenerate_cell_matches_evaluate(self):
        index, queries, gt = make_eval_setup(seed=6)
        rows = sweep_dba_qe(index, queries, gt, [0], [0], MEDIUM)
        base = evaluate(index, queries, gt, MEDIUM)
        assert rows[0] == (0, 0, base.map)

    def test_alpha_beta_grid(self):
        index, queries, gt = make_eval_setup(seed=7)
        rows = sweep_alpha_beta(index, queries, gt, alphas=[0.0, 2.0],
                                betas=[0.0], n_dba=1, n_qe=2, protocol=MEDIUM)
        assert [(r[0], r[1]) for r in rows] == [(0.0, 0.0), (2.0, 0.0)]

    def test_csv_format(self, tmp_path):
        path = str(tmp_path / "sweep.csv")
        write_sweep_csv(path, ["n_dba", "n_qe", "map"],
                        [(0, 1, 0.5), (2, 3, 0.123456789)], seed=7)
        lines = open(path).read().splitlines()
        assert lines[0] == "# seed=7"
        assert lines[1] == "n_dba,n_qe,map"
        assert lines[2] == "0,1,0.500000"
        assert lines[3] == "2,3,0.123457"
