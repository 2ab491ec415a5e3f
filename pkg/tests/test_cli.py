"""Command-line round trips: every subcommand through main(), file-level
outputs compared against in-process oracles, exit codes for bad inputs."""

import json
import os
import struct

import numpy as np
import pytest

from agem import storage
from agem.cli import main
from agem.evaluation import (MEDIUM, GroundTruth, QueryLabels, evaluate,
                             load_ground_truth, save_ground_truth)
from agem.retrieval import Index, load_index


def write_manifest(directory, images, all_taps=False):
    """Feature-map manifest plus one AGTF file per tap.

    images: list of (image_id, {scale: {tap: array}}) tuples.
    """
    entries = []
    for iid, scales in images:
        scale_entries = []
        for scale, taps in sorted(scales.items(), reverse=True):
            tap_entry = {}
            for tap, arr in taps.items():
                fname = f"{iid}_{scale}_{tap}.agtf".replace(".", "_", 1)
                storage.write_tensor(os.path.join(directory, fname),
                                     np.asarray(arr, dtype=np.float32))
                tap_entry[tap] = fname
            scale_entries.append({"scale": scale, "taps": tap_entry})
        entries.append({"id": iid, "scales": scale_entries})
    path = os.path.join(directory, "maps.json")
    storage.write_json(path, {"kind": "feature_maps", "backbone": "toy",
                              "longer_side": 32, "images": entries})
    return path


def single_tap_images(rng, n, c=5, h=4, w=4, prefix="img"):
    out = []
    for i in range(n):
        fmap = np.abs(rng.normal(size=(c, h, w))) + 0.05
        out.append((f"{prefix}{i:02d}", {1.0: {"B5_3": fmap}}))
    return out


def four_tap_images(rng, n, c4=6, c5=10, h=8, w=8, prefix="img"):
    out = []
    for i in range(n):
        taps = {"B4_23": np.abs(rng.normal(size=(c4, h, w))) + 0.05}
        for tap in ("B5_1", "B5_2", "B5_3"):
            taps[tap] = np.abs(rng.normal(size=(c5, h // 2, w // 2))) + 0.05
        out.append((f"{prefix}{i:02d}", {1.0: taps}))
    return out


class TestExtract:
    def test_spoc_matches_spatial_mean(self, tmp_path):
        rng = np.random.default_rng(0)
        fmap = np.abs(rng.normal(size=(3, 4, 4))) + 0.1
        manifest = write_manifest(str(tmp_path), [("one", {1.0: {"B5_3": fmap}})])
        rc = main(["extract", "--maps", manifest, "--descriptor", "spoc",
                   "--output-dir", str(tmp_path)])
        assert rc == 0
        ds = storage.load_descriptor_set(str(tmp_path / "descriptors.json"))
        expected = fmap.astype(np.float32).astype(np.float64).mean(axis=(1, 2))
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(ds.row("one"), expected, atol=1e-12)

    def test_zero_init_attention_equals_plain_gem(self, tmp_path):
        rng = np.random.default_rng(1)
        images = four_tap_images(rng, 3)
        manifest = write_manifest(str(tmp_path), images)
        for mode, out in (("agem", "a.json"), ("gem", "g.json")):
            rc = main(["extract", "--maps", manifest, "--descriptor", mode,
                       "--p", "2.92", "--out", out,
                       "--output-dir", str(tmp_path)])
            assert rc == 0
        a = storage.load_descriptor_set(str(tmp_path / "a.json"))
        g = storage.load_descriptor_set(str(tmp_path / "g.json"))
        assert a.ids == g.ids
        np.testing.assert_allclose(a.vectors, g.vectors, atol=1e-12)

    def test_three_scale_unit_exponent_matches_average(self, tmp_path):
        rng = np.random.default_rng(2)
        scales = {}
        for s, hw in ((1.0, 8), (0.7, 6), (0.5, 4)):
            scales[s] = {"B5_3": np.abs(rng.normal(size=(4, hw, hw))) + 0.1}
        manifest = write_manifest(str(tmp_path), [("ms", scales)])
        rc = main(["extract", "--maps", manifest, "--descriptor", "gem",
                   "--p", "1.0", "--output-dir", str(tmp_path)])
        assert rc == 0
        ds = storage.load_descriptor_set(str(tmp_path / "descriptors.json"))
        per_scale = []
        for s in (1.0, 0.7, 0.5):
            v = scales[s]["B5_3"].astype(np.float32).astype(np.float64)
            d = v.mean(axis=(1, 2))
            per_scale.append(d / np.linalg.norm(d))
        expected = np.mean(per_scale, axis=0)
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(ds.row("ms"), expected, atol=1e-12)

    def test_missing_tap_for_attention_mode(self, tmp_path):
        rng = np.random.default_rng(3)
        manifest = write_manifest(str(tmp_path), single_tap_images(rng, 1))
        rc = main(["extract", "--maps", manifest, "--descriptor", "agem",
                   "--output-dir", str(tmp_path)])
        assert rc == 2

    def test_config_file_with_flag_override(self, tmp_path):
        rng = np.random.default_rng(4)
        manifest = write_manifest(str(tmp_path), single_tap_images(rng, 2))
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"descriptor": "spoc", "seed": 11,
                                   "output_dir": str(tmp_path)}))
        rc = main(["extract", "--maps", manifest, "--config", str(cfg)])
        assert rc == 0
        meta = json.loads((tmp_path / "descriptors.json").read_text())
        assert meta["descriptor"] == "spoc" and meta["seed"] == 11
        rc = main(["extract", "--maps", manifest, "--config", str(cfg),
                   "--descriptor", "mac", "--out", "d2.json"])
        assert rc == 0
        meta2 = json.loads((tmp_path / "d2.json").read_text())
        assert meta2["descriptor"] == "mac"  # flag beats config

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(5)
        manifest = write_manifest(str(tmp_path), four_tap_images(rng, 2))
        for sub in ("r1", "r2"):
            os.makedirs(tmp_path / sub)
            rc = main(["extract", "--maps", manifest, "--descriptor", "agem",
                       "--output-dir", str(tmp_path / sub)])
            assert rc == 0
        b1 = (tmp_path / "r1" / "descriptors.json").read_bytes()
        b2 = (tmp_path / "r2" / "descriptors.json").read_bytes()
        assert b1 == b2


@pytest.fixture
def corpus(tmp_path):
    """Extracted db + query descriptors with ground truth, ready to index.

    Three clusters of four images each; queries are cluster members, so the
    remaining three cluster mates are the easy positives.
    """
    rng = np.random.default_rng(7)
    images, gt_queries = [], {}
    centers = [rng.normal(size=(5, 4, 4)) * 2 for _ in range(3)]
    for c, center in enumerate(centers):
        members = [f"db{c}_{j}" for j in range(4)]
        for j, iid in enumerate(members):
            fmap = np.abs(center + rng.normal(size=(5, 4, 4)) * 0.25) + 0.05
            images.append((iid, {1.0: {"B5_3": fmap}}))
        gt_queries[members[0]] = QueryLabels(
            easy=set(members[1:3]), hard={members[3]}, unclear=set())
    manifest = write_manifest(str(tmp_path), images)
    rc = main(["extract", "--maps", manifest, "--descriptor", "gem",
               "--output-dir", str(tmp_path)])
    assert rc == 0
    ds = storage.load_descriptor_set(str(tmp_path / "descriptors.json"))
    qids = sorted(gt_queries)
    queries = storage.DescriptorSet(qids, np.stack([ds.row(q) for q in qids]))
    storage.save_descriptor_set(queries, str(tmp_path / "queries.json"))
    save_ground_truth(GroundTruth(gt_queries), str(tmp_path / "gt.json"))
    return tmp_path


class TestPipelineCommands:
    def test_index_search_self_retrieval(self, corpus):
        rc = main(["index", "--descriptors", str(corpus / "descriptors.json"),
                   "--output-dir", str(corpus)])
        assert rc == 0
        rc = main(["search", "--index", str(corpus / "index.json"),
                   "--queries", str(corpus / "queries.json"), "--k", "1",
                   "--output-dir", str(corpus)])
        assert rc == 0
        lines = (corpus / "rankings.csv").read_text().splitlines()
        assert lines[0].startswith("# seed=")
        assert lines[1] == "query_id,rank,item_id,score"
        for row in lines[2:]:
            qid, rank, iid, score = row.split(",")
            assert qid == iid and rank == "1"
            assert abs(float(score) - 1.0) < 1e-6

    def test_evaluate_matches_in_process(self, corpus):
        main(["index", "--descriptors", str(corpus / "descriptors.json"),
              "--output-dir", str(corpus)])
        rc = main(["evaluate", "--index", str(corpus / "index.json"),
                   "--queries", str(corpus / "queries.json"),
                   "--gt", str(corpus / "gt.json"), "--protocol", "medium",
                   "--output-dir", str(corpus)])
        assert rc == 0
        report = json.loads((corpus / "evaluate_medium.json").read_text())
        index = load_index(str(corpus / "index.json"))
        queries = storage.load_descriptor_set(str(corpus / "queries.json"))
        gt = load_ground_truth(str(corpus / "gt.json"))
        want = evaluate(index, queries, gt, MEDIUM)
        assert abs(report["map"] - want.map) < 1e-12
        assert report["protocol"] == "medium"

    def test_whiten_then_reindex(self, corpus):
        pairs = [["db0_1", "db0_2"], ["db1_1", "db1_2"], ["db2_1", "db2_2"],
                 ["db0_1", "db0_3"], ["db1_1", "db1_3"], ["db2_1", "db2_3"],
                 ["db0_2", "db0_3"], ["db1_2", "db1_3"], ["db2_2", "db2_3"]]
        (corpus / "pairs.json").write_text(json.dumps(pairs))
        rc = main(["whiten", "--descriptors", str(corpus / "descriptors.json"),
                   "--pairs", str(corpus / "pairs.json"),
                   "--apply-to", str(corpus / "descriptors.json"),
                   str(corpus / "queries.json"),
                   "--output-dir", str(corpus)])
        assert rc == 0
        assert (corpus / "whitening" / "manifest.json").exists()
        white = storage.load_descriptor_set(str(corpus / "descriptors.whitened.json"))
        np.testing.assert_allclose(np.linalg.norm(white.vectors, axis=1), 1.0,
                                   atol=1e-10)
        rc = main(["index", "--descriptors",
                   str(corpus / "descriptors.whitened.json"),
                   "--out", "windex.json", "--output-dir", str(corpus)])
        assert rc == 0

    def test_sweep_single_cell_matches_evaluate(self, corpus):
        main(["index", "--descriptors", str(corpus / "descriptors.json"),
              "--output-dir", str(corpus)])
        main(["evaluate", "--index", str(corpus / "index.json"),
              "--queries", str(corpus / "queries.json"),
              "--gt", str(corpus / "gt.json"), "--output-dir", str(corpus)])
        rc = main(["sweep-dba-qe", "--index", str(corpus / "index.json"),
                   "--queries", str(corpus / "queries.json"),
                   "--gt", str(corpus / "gt.json"),
                   "--dba-counts", "0", "--qe-counts", "0",
                   "--output-dir", str(corpus)])
        assert rc == 0
        report = json.loads((corpus / "evaluate_medium.json").read_text())
        lines = (corpus / "sweep_dba_qe.csv").read_text().splitlines()
        assert lines[1] == "dba_n,qe_n,map"
        dn, qn, m = lines[2].split(",")
        assert (dn, qn) == ("0", "0")
        assert abs(float(m) - report["map"]) < 1e-6

    def test_sweep_alpha_beta_grid(self, corpus):
        main(["index", "--descriptors", str(corpus / "descriptors.json"),
              "--output-dir", str(corpus)])
        rc = main(["sweep-alpha-beta", "--index", str(corpus / "index.json"),
                   "--queries", str(corpus / "queries.json"),
                   "--gt", str(corpus / "gt.json"),
                   "--alphas", "0,2", "--betas", "0",
                   "--n-dba", "1", "--n-qe", "2",
                   "--output-dir", str(corpus)])
        assert rc == 0
        lines = (corpus / "sweep_alpha_beta.csv").read_text().splitlines()
        assert lines[1] == "alpha,beta,map"
        assert len(lines) == 4  # header comment + columns + 2 cells

    def test_search_with_diffusion_flag(self, corpus):
        main(["index", "--descriptors", str(corpus / "descriptors.json"),
              "--output-dir", str(corpus)])
        cfg = corpus / "diff.json"
        cfg.write_text(json.dumps({"retrieval": {"diffusion": {
            "enabled": True, "k_nn": 4, "alpha": 0.8}}}))
        rc = main(["search", "--index", str(corpus / "index.json"),
                   "--queries", str(corpus / "queries.json"),
                   "--config", str(cfg), "--output-dir", str(corpus)])
        assert rc == 0
        lines = (corpus / "rankings.csv").read_text().splitlines()
        assert len(lines) == 2 + 3 * 12  # full ranking per query


class TestTrainToy:
    def test_zero_steps_writes_initial_checkpoint(self, tmp_path):
        rc = main(["train-toy", "--steps", "0",
                   "--output-dir", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "checkpoint" / "manifest.json").exists()
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["steps"] == 0

    def test_fixed_seed_reproduces_stats(self, tmp_path):
        for sub in ("s1", "s2"):
            rc = main(["train-toy", "--steps", "10", "--seed", "4",
                       "--per-cluster", "8", "--output-dir",
                       str(tmp_path / sub)])
            assert rc == 0
        b1 = (tmp_path / "s1" / "stats.csv").read_bytes()
        b2 = (tmp_path / "s2" / "stats.csv").read_bytes()
        assert b1 == b2
        assert b"# seed=4" in b1


class TestExitCodes:
    def test_missing_input_file(self, tmp_path):
        rc = main(["extract", "--maps", str(tmp_path / "nope.json"),
                   "--output-dir", str(tmp_path)])
        assert rc == 2

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{ this is not json")
        rc = main(["index", "--descriptors", str(bad),
                   "--output-dir", str(tmp_path)])
        assert rc == 2

    def test_wrong_manifest_kind(self, tmp_path):
        wrong = tmp_path / "wrong.json"
        wrong.write_text(json.dumps({"kind": "index"}))
        rc = main(["extract", "--maps", str(wrong),
                   "--output-dir", str(tmp_path)])
        assert rc == 2

    def test_non_finite_payload(self, tmp_path):
        # hand-build a tap tensor whose payload holds a NaN
        payload = np.array([1.0, np.nan, 2.0, 3.0], dtype="<f8").tobytes()
        blob = b"AGTF" + struct.pack("<III", 1, 2, 3) + \
            struct.pack("<QQQ", 1, 2, 2) + payload
        (tmp_path / "evil.agtf").write_bytes(blob)
        manifest = {"kind": "feature_maps", "images": [
            {"id": "x", "scales": [{"scale": 1.0,
                                    "taps": {"B5_3": "evil.agtf"}}]}]}
        path = tmp_path / "maps.json"
        path.write_text(json.dumps(manifest))
        rc = main(["extract", "--maps", str(path), "--descriptor", "gem",
                   "--output-dir", str(tmp_path)])
        assert rc == 3

    def test_no_subcommand_prints_help(self, capsys):
        assert main([]) == 2
        assert "usage" in capsys.readouterr().out.lower()
