"""Command-line surface for the retrieval engine.

Subcommands: train-toy, extract, whiten, index, search, evaluate,
sweep-dba-qe, sweep-alpha-beta. A JSON config file (--config) supplies
defaults; explicit flags always win. Every command runs off one seeded
generator and records the seed in its output headers, so reruns are
bit-identical.

Exit codes: 0 success, 2 input or format error, 3 numerical failure
(non-finite values, diffusion solver divergence).
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings

import numpy as np

from . import storage
from .attention import (AttentionConfig, AttentionNet, StageMaps,
                        descriptor_from_maps, load_attention_net)
from .evaluation import (GroundTruth, evaluate, load_ground_truth,
                         protocol_by_name, sweep_alpha_beta, sweep_dba_qe,
                         write_sweep_csv)
from .pooling import PoolingSpec
from .postprocess import (MultiScaleSpec, aggregate_descriptors,
                          apply_whitening, learn_whitening, save_whitening)
from .retrieval import (ConvergenceWarning, DiffusionParams, Index,
                        RetrievalPipeline, load_index, run_pipeline,
                        save_index)
from .storage import DescriptorSet, FormatError
from .tensor import NumericalError, Tensor
from .training import toy_config, train_toy

TAP_NAMES = ("B4_23", "B5_1", "B5_2", "B5_3")
DESCRIPTOR_MODES = ("agem", "gem", "spoc", "mac")


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    cfg = storage.read_json(path)
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return cfg


def _cfg(cfg: dict, *path, default=None):
    node = cfg
    for key in path:
        if not isinstance(node, dict) or key not in node:
            return default
        node = node[key]
    return node


def _pick(flag, cfg_value, default):
    if flag is not None:
        return flag
    return cfg_value if cfg_value is not None else default


def _pipeline_from(cfg: dict, args) -> RetrievalPipeline:
    r = _cfg(cfg, "retrieval", default={}) or {}
    diffusion = None
    d = r.get("diffusion") or {}
    enabled = _pick(getattr(args, "diffusion", None),
                    d.get("enabled"), False)
    if enabled:
        diffusion = DiffusionParams(
            k_nn=int(d.get("k_nn", 50)), alpha=float(d.get("alpha", 0.99)),
            exponent=float(d.get("exponent", 3.0)), tol=float(d.get("tol", 1e-6)),
            max_iter=int(d.get("max_iter", 200)),
            truncation=d.get("truncation"))
    beta = _pick(getattr(args, "dba_beta", None), r.get("dba_beta"), None)
    return RetrievalPipeline(
        dba_n=int(_pick(getattr(args, "dba_n", None), r.get("dba_n"), 0)),
        dba_beta=None if beta is None else float(beta),
        qe_n=int(_pick(getattr(args, "qe_n", None), r.get("qe_n"), 0)),
        qe_alpha=float(_pick(getattr(args, "qe_alpha", None), r.get("qe_alpha"), 0.0)),
        diffusion=diffusion)


def _out_dir(args, cfg: dict) -> str:
    out = _pick(args.output_dir, _cfg(cfg, "output_dir"), ".")
    os.makedirs(out, exist_ok=True)
    return out


def _seed(args, cfg: dict) -> int:
    return int(_pick(args.seed, _cfg(cfg, "seed"), 0))


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip() != ""]


# ---------------------------------------------------------------------------
# feature-map manifests (the bridge's export format)


def load_feature_manifest(path: str) -> dict:
    obj = storage.read_json(path)
    if not isinstance(obj, dict) or obj.get("kind") != "feature_maps":
        raise FormatError(f"{path}: expected a feature_maps manifest")
    if "images" not in obj or not isinstance(obj["images"], list):
        raise FormatError(f"{path}: manifest needs an 'images' list")
    return obj


def _load_tap(base: str, relpath: str) -> Tensor:
    arr = storage.read_tensor(os.path.join(base, relpath))
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise FormatError(f"{relpath}: tap tensor must be CHW or 1xCHW, "
                          f"got shape {arr.shape}")
    return Tensor(np.asarray(arr, dtype=np.float64))


def _maps_for_scale(base: str, taps: dict, mode: str):
    if mode == "agem":
        missing = [t for t in TAP_NAMES if t not in taps]
        if missing:
            raise FormatError(f"attention descriptor needs tap points {missing}; "
                              f"manifest provides {sorted(taps)}")
        loaded = {t: _load_tap(base, taps[t]) for t in TAP_NAMES}
        return StageMaps(loaded["B4_23"], loaded["B5_1"], loaded["B5_2"],
                         loaded["B5_3"])
    if "B5_3" not in taps:
        raise FormatError(f"pooling descriptor needs tap point B5_3; "
                          f"manifest provides {sorted(taps)}")
    x = _load_tap(base, taps["B5_3"])
    return StageMaps(x, x, x, x)


def _net_for_maps(maps: StageMaps, checkpoint: str | None, p: float):
    if checkpoint is not None:
        net, spec, _ = load_attention_net(checkpoint)
        return net, spec
    c_early = maps.x_4_23.data.shape[1]
    c_late = maps.x_5_3.data.shape[1]
    mid = max(c_early // 2, 1)
    config = AttentionConfig(in_channels=c_early,
                             att1_channels=(c_early, mid, mid, c_late))
    return AttentionNet(config, zero_init=True, p_init=p), \
        PoolingSpec(kind="gem", p=p)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_toy(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    tc = toy_config()
    for key, val in (_cfg(cfg, "train", default={}) or {}).items():
        if not hasattr(tc, key):
            raise FormatError(f"unknown train config field {key!r}")
        setattr(tc, key, type(getattr(tc, key))(val))
    steps = int(_pick(args.steps, _cfg(cfg, "train", "steps"), 200))
    clusters = int(_pick(args.clusters, _cfg(cfg, "train", "clusters"), 2))
    per_cluster = int(_pick(args.per_cluster,
                            _cfg(cfg, "train", "per_cluster"), 20))
    summary = train_toy(out, seed=seed, steps=steps, cfg=tc,
                        clusters=clusters, per_cluster=per_cluster)
    summary["seed"] = seed
    storage.write_json(os.path.join(out, "summary.json"), summary)
    print(f"trained {summary['steps']} steps over {summary['epochs']} epochs: "
          f"loss {summary['initial_loss']:.6f} -> {summary['final_loss']:.6f}, "
          f"p={summary['p']:.4f}")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    mode = _pick(args.descriptor, _cfg(cfg, "descriptor"), "agem")
    if mode not in DESCRIPTOR_MODES:
        raise FormatError(f"unknown descriptor mode {mode!r}")
    p = float(_pick(args.p, _cfg(cfg, "pooling", "p"), 2.92))
    manifest = load_feature_manifest(args.maps)
    base = os.path.dirname(os.path.abspath(args.maps))
    agg_default = "gem" if mode in ("agem", "gem") else "average"
    aggregator = _pick(None, _cfg(cfg, "multiscale", "aggregator"), agg_default)

    ids, rows = [], []
    net = spec = None
    for entry in manifest["images"]:
        per_scale, scales = [], []
        for item in entry["scales"]:
            maps = _maps_for_scale(base, item["taps"], mode)
            if mode == "agem":
                if net is None:
                    net, spec = _net_for_maps(maps, args.checkpoint, p)
                d = descriptor_from_maps(net, maps, spec, mode="eval")
            else:
                pool_spec = PoolingSpec(kind="gem" if mode == "gem" else mode, p=p)
                d = descriptor_from_maps(None, maps, pool_spec, mode="eval",
                                         attention=False)
            per_scale.append(d.data.copy())
            scales.append(float(item["scale"]))
        if len(per_scale) == 1:
            vec = per_scale[0]
        else:
            ms_p = float(net.p.data) if (mode == "agem" and net is not None) else p
            ms = MultiScaleSpec(scales=tuple(scales), aggregator=aggregator,
                                p=ms_p if aggregator == "gem" else 3.0)
            vec = aggregate_descriptors(np.stack(per_scale), ms)
        ids.append(str(entry["id"]))
        rows.append(vec)
    ds = DescriptorSet(ids, np.stack(rows))
    path = os.path.join(out, args.out)
    storage.save_descriptor_set(ds, path, extra={"seed": seed, "descriptor": mode})
    print(f"extracted {len(ds)} descriptors ({mode}, dim {ds.dim}) -> {path}")
    return 0


def cmd_whiten(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    ds = storage.load_descriptor_set(args.descriptors)
    pairs_obj = storage.read_json(args.pairs)
    if not isinstance(pairs_obj, list) or \
            any(not isinstance(p, list) or len(p) != 2 for p in pairs_obj):
        raise FormatError(f"{args.pairs}: expected a JSON list of [id, id] pairs")
    pairs = [(str(a), str(b)) for a, b in pairs_obj]
    t = learn_whitening(ds, pairs, d_prime=args.dim)
    tdir = os.path.join(out, "whitening")
    save_whitening(t, tdir, extra={"seed": seed, "pairs": len(pairs)})
    print(f"learned whitening {t.dim} -> {t.out_dim} from {len(pairs)} pairs "
          f"-> {tdir}")
    for target in args.apply_to or []:
        src = storage.load_descriptor_set(target)
        white = np.stack([apply_whitening(t, src.row(i)) for i in src.ids])
        stem = os.path.basename(target)
        stem = stem[:-5] if stem.endswith(".json") else stem
        path = os.path.join(out, f"{stem}.whitened.json")
        storage.save_descriptor_set(DescriptorSet(list(src.ids), white), path,
                                    extra={"seed": seed, "whitened": True})
        print(f"whitened {len(src)} descriptors -> {path}")
    return 0


def cmd_index(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    ds = storage.load_descriptor_set(args.descriptors)
    index = Index.from_descriptor_set(ds)
    path = os.path.join(out, args.out)
    storage.save_descriptor_set(index.to_descriptor_set(), path,
                                extra={"kind": "index", "seed": seed})
    print(f"indexed {len(index)} descriptors (dim {index.dim}) -> {path}")
    return 0


def cmd_search(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    index = load_index(args.index)
    queries = storage.load_descriptor_set(args.queries)
    k = args.k if args.k is not None else len(index)
    if not 0 <= k <= len(index):
        raise ValueError(f"k must lie in [0, {len(index)}], got {k}")
    pipeline = _pipeline_from(cfg, args)
    rankings = run_pipeline(index, queries, pipeline)
    path = os.path.join(out, "rankings.csv")

    def emit(f):
        f.write(f"# seed={seed}\n")
        f.write("query_id,rank,item_id,score\n")
        for qid in queries.ids:
            for r, (iid, s) in enumerate(rankings[qid].items[:k], start=1):
                f.write(f"{qid},{r},{iid},{s:.6f}\n")
    storage.atomic_text_write(path, emit)
    print(f"searched {len(queries)} queries over {len(index)} items -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    protocol = protocol_by_name(_pick(args.protocol, _cfg(cfg, "protocol"),
                                      "medium"))
    index = load_index(args.index)
    queries = storage.load_descriptor_set(args.queries)
    gt = load_ground_truth(args.gt)
    gt.validate_against(index.ids)
    pipeline = _pipeline_from(cfg, args)
    result = evaluate(index, queries, gt, protocol, pipeline)
    print("protocol  queries  skipped  mAP")
    print(f"{protocol.name:<8}  {len(result.per_query):>7}  "
          f"{len(result.skipped):>7}  {result.map:.6f}")
    report = {"seed": seed, "protocol": protocol.name, "map": result.map,
              "per_query": {q: round(a, 6) for q, a in result.per_query.items()},
              "skipped": result.skipped}
    storage.write_json(os.path.join(out, f"evaluate_{protocol.name}.json"), report)
    return 0


def cmd_sweep_dba_qe(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    protocol = protocol_by_name(_pick(args.protocol, _cfg(cfg, "protocol"),
                                      "medium"))
    index = load_index(args.index)
    queries = storage.load_descriptor_set(args.queries)
    gt = load_ground_truth(args.gt)
    dba_counts = _int_list(_pick(args.dba_counts,
                                 _cfg(cfg, "sweep", "dba_counts"), "0,1,2"))
    qe_counts = _int_list(_pick(args.qe_counts,
                                _cfg(cfg, "sweep", "qe_counts"), "0,1,2"))
    beta = _pick(args.dba_beta, _cfg(cfg, "retrieval", "dba_beta"), None)
    alpha = float(_pick(args.qe_alpha, _cfg(cfg, "retrieval", "qe_alpha"), 0.0))
    rows = sweep_dba_qe(index, queries, gt, dba_counts, qe_counts, protocol,
                        dba_beta=None if beta is None else float(beta),
                        qe_alpha=alpha)
    path = os.path.join(out, "sweep_dba_qe.csv")
    write_sweep_csv(path, ("dba_n", "qe_n", "map"), rows, seed=seed)
    print(f"swept {len(rows)} cells -> {path}")
    return 0


def cmd_sweep_alpha_beta(args) -> int:
    cfg = _load_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    protocol = protocol_by_name(_pick(args.protocol, _cfg(cfg, "protocol"),
                                      "medium"))
    index = load_index(args.index)
    queries = storage.load_descriptor_set(args.queries)
    gt = load_ground_truth(args.gt)
    alphas = _float_list(_pick(args.alphas, _cfg(cfg, "sweep", "alphas"),
                               "0,1,2,3"))
    betas = _float_list(_pick(args.betas, _cfg(cfg, "sweep", "betas"), "0,1"))
    n_dba = int(_pick(args.n_dba, _cfg(cfg, "sweep", "n_dba"), 2))
    n_qe = int(_pick(args.n_qe, _cfg(cfg, "sweep", "n_qe"), 2))
    rows = sweep_alpha_beta(index, queries, gt, alphas, betas, n_dba, n_qe,
                            protocol)
    path = os.path.join(out, "sweep_alpha_beta.csv")
    write_sweep_csv(path, ("alpha", "beta", "map"), rows, seed=seed)
    print(f"swept {len(rows)} cells -> {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--output-dir", help="where outputs land (default .)")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--qe-n", type=int, help="query-expansion neighbor count")
    p.add_argument("--qe-alpha", type=float, help="QE similarity exponent")
    p.add_argument("--dba-n", type=int, help="database-augmentation neighbors")
    p.add_argument("--dba-beta", type=float, help="DBA similarity exponent")
    p.add_argument("--diffusion", action="store_true", default=None,
                   help="re-rank with graph diffusion")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agem", description="attention-weighted descriptor retrieval engine")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train-toy", help="train the toy model on synthetic data")
    _add_common(p)
    p.add_argument("--steps", type=int, help="optimizer steps (default 200)")
    p.add_argument("--clusters", type=int, help="synthetic cluster count")
    p.add_argument("--per-cluster", type=int, help="images per cluster")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("extract", help="pool feature maps into descriptors")
    _add_common(p)
    p.add_argument("--maps", required=True, help="feature-map manifest JSON")
    p.add_argument("--descriptor", choices=DESCRIPTOR_MODES,
                   help="descriptor flavor (default agem)")
    p.add_argument("--checkpoint", help="trained attention checkpoint directory")
    p.add_argument("--p", type=float, help="pooling exponent (default 2.92)")
    p.add_argument("--out", default="descriptors.json",
                   help="output descriptor-set filename")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("whiten", help="learn whitening from matched pairs")
    _add_common(p)
    p.add_argument("--descriptors", required=True, help="training descriptor set")
    p.add_argument("--pairs", required=True, help="JSON list of [id, id] pairs")
    p.add_argument("--dim", type=int, help="output dimensionality (default: keep)")
    p.add_argument("--apply-to", nargs="*",
                   help="descriptor sets to transform with the learned whitening")
    p.set_defaults(func=cmd_whiten)

    p = sub.add_parser("index", help="build a search index from descriptors")
    _add_common(p)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--out", default="index.json", help="output index filename")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="rank the index for each query")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, help="ranks to keep (default: all)")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="mAP under a protocol")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", required=True, help="ground-truth JSON")
    p.add_argument("--protocol", choices=("medium", "hard"))
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-dba-qe", help="mAP grid over neighbor counts")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", choices=("medium", "hard"))
    p.add_argument("--dba-counts", help="comma list, e.g. 0,1,2,5")
    p.add_argument("--qe-counts", help="comma list, e.g. 0,1,2,5")
    p.add_argument("--dba-beta", type=float)
    p.add_argument("--qe-alpha", type=float)
    p.set_defaults(func=cmd_sweep_dba_qe)

    p = sub.add_parser("sweep-alpha-beta", help="mAP grid over exponents")
    _add_common(p)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", choices=("medium", "hard"))
    p.add_argument("--alphas", help="comma list of QE exponents")
    p.add_argument("--betas", help="comma list of DBA exponents")
    p.add_argument("--n-dba", type=int, help="DBA neighbors for this sweep")
    p.add_argument("--n-qe", type=int, help="QE neighbors for this sweep")
    p.set_defaults(func=cmd_sweep_alpha_beta)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", ConvergenceWarning)
            return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except ConvergenceWarning as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
