"""Contrastive fine-tuning loop.

Tuples of (query, positive, 5 negatives) are scored with the two-stream
contrastive loss: matching pairs pay half squared distance, non-matching
pairs pay half squared hinge below the margin (default 0.85). Negatives are
mined as the hardest non-matching pool items, at most one per cluster, with
the pool refreshed at the start of every epoch from the current model.

Optimization is Adam with bias correction and a decoupled weight-decay term
lr*wd*theta (the pooling exponent and batch-norm parameters are exempt).
Learning rates come in three groups (backbone, pooling exponent, attention)
and all decay as lr*exp(-0.01*k) over epoch k.

TrainConfig defaults are sized for fine-tuning a pretrained deep backbone;
toy_config() is a desk-scale preset that trains the two-block backbone on
synthetic cluster data in a few hundred steps.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import storage
from .attention import (AttentionNet, StageMaps, ToyBackbone, ToyBackboneConfig,
                        descriptor_from_maps, load_attention_net,
                        save_attention_net)
from .pooling import PoolingSpec
from .storage import DescriptorSet
from .tensor import (NumericalError, Tensor, add, affine, backward, dot,
                     hadamard, relu, scale, sqrt, sub)

LR_GROUPS = ("base", "p", "attention")


@dataclass
class TrainConfig:
    margin: float = 0.85
    base_lr: float = 1e-6
    p_lr: float = 1e-5
    attention_lr: float = 1e-3
    decay_rate: float = 0.01
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 60
    tuples_per_epoch: int = 2000
    batch_size: int = 10
    negatives_per_tuple: int = 5
    pool_size: int = 20000

    def __post_init__(self):
        if not 0.0 < self.margin <= 2.0:
            raise ValueError(f"margin must lie in (0, 2], got {self.margin}")
        for name in ("base_lr", "p_lr", "attention_lr", "decay_rate",
                     "weight_decay", "beta1", "beta2", "adam_eps", "epochs",
                     "tuples_per_epoch", "batch_size", "negatives_per_tuple",
                     "pool_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class TrainingTuple:
    query: str
    positive: str
    negatives: list[str]

    def __post_init__(self):
        ids = [self.query, self.positive, *self.negatives]
        if len(set(ids)) != len(ids):
            raise ValueError(f"tuple ids must be distinct: {ids}")


def contrastive_loss(f_i: Tensor, f_j: Tensor, y: int, tau: float = 0.85) -> Tensor:
    """Half squared distance for matches, half squared hinge for non-matches.

    Descriptors are expected unit-norm so distances live in [0, 2]. The
    hinge contributes exactly zero value and gradient once the pair is
    separated by tau or more.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if y not in (0, 1):
        raise ValueError(f"y must be 0 or 1, got {y}")
    d = sub(f_i, f_j)
    dist_sq = dot(d, d)
    if y == 1:
        return scale(dist_sq, 0.5)
    hinge = relu(affine(sqrt(dist_sq), mul=-1.0, shift=tau))
    return scale(hadamard(hinge, hinge), 0.5)


def pair_distance(f_i: Tensor, f_j: Tensor) -> float:
    return float(np.linalg.norm(f_i.data - f_j.data))


def lr_at_epoch(cfg: TrainConfig, group: str, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    base = {"base": cfg.base_lr, "p": cfg.p_lr, "attention": cfg.attention_lr}
    if group not in base:
        raise ValueError(f"unknown lr group {group!r}, expected one of {LR_GROUPS}")
    return base[group] * float(np.exp(-cfg.decay_rate * epoch))


# ---------------------------------------------------------------------------
# hard-negative mining


def _ranked_nonmatching(query_desc: np.ndarray, query_cluster,
                        pool: DescriptorSet, cluster_labels: dict,
                        k: int, per_cluster_cap: int | None):
    sims = pool.vectors @ np.asarray(query_desc, dtype=np.float64)
    # descending similarity, ascending id on ties
    order = sorted(range(len(pool.ids)), key=lambda i: (-sims[i], pool.ids[i]))
    chosen, used = [], {}
    for i in order:
        pid = pool.ids[i]
        cluster = cluster_labels[pid]
        if cluster == query_cluster:
            continue
        if per_cluster_cap is not None and used.get(cluster, 0) >= per_cluster_cap:
            continue
        chosen.append(pid)
        used[cluster] = used.get(cluster, 0) + 1
        if len(chosen) == k:
            return chosen
    raise ValueError(f"pool yields only {len(chosen)} usable negatives, need {k}")


def mine_hard_negatives(model, query_desc: np.ndarray, query_cluster,
                        pool: DescriptorSet, cluster_labels: dict,
                        k: int) -> list[str]:
    """Top-k most similar pool items from clusters other than the query's.

    At most one item per cluster; similarity ties break by ascending id.
    `model` is only a marker that the pool was extracted with the current
    weights; mining itself works on the stored descriptors. Raises when the
    pool cannot supply k items under the constraints.
    """
    if k == 0:
        return []
    return _ranked_nonmatching(query_desc, query_cluster, pool,
                               cluster_labels, k, per_cluster_cap=1)


def build_tuples(pool: DescriptorSet, cluster_labels: dict, cfg: TrainConfig,
                 rng, count: int) -> list[TrainingTuple]:
    """Sample training tuples from a mined descriptor pool.

    Queries and positives are drawn uniformly from clusters with at least
    two members. When the dataset has fewer distinct clusters than
    negatives per tuple (the synthetic sets do) the one-per-cluster rule is
    relaxed and negatives are just the hardest distinct non-matching items.
    """
    by_cluster: dict = {}
    for pid in pool.ids:
        by_cluster.setdefault(cluster_labels[pid], []).append(pid)
    eligible = [pid for pid in pool.ids if len(by_cluster[cluster_labels[pid]]) > 1]
    if not eligible:
        raise ValueError("no cluster has two members; cannot form matching pairs")
    n_other = len(by_cluster) - 1
    cap = 1 if n_other >= cfg.negatives_per_tuple else None
    tuples = []
    for _ in range(count):
        qid = eligible[rng.integers(len(eligible))]
        mates = [p for p in by_cluster[cluster_labels[qid]] if p != qid]
        pos = mates[rng.integers(len(mates))]
        negs = _ranked_nonmatching(pool.row(qid), cluster_labels[qid], pool,
                                   cluster_labels, cfg.negatives_per_tuple, cap)
        tuples.append(TrainingTuple(qid, pos, negs))
    return tuples


# ---------------------------------------------------------------------------
# optimizer


def _decays(name: str) -> bool:
    # pooling exponent and batch-norm affine terms are exempt from decay
    if name == "p" or name.endswith(".p"):
        return False
    return not any(part.startswith("bn") for part in name.split("."))


class Adam:
    """Adam with bias correction and decoupled weight decay, in lr groups.

    A group whose learning rate is zero is skipped outright, so its
    parameters (and moments) stay bitwise identical. The pooling exponent is
    clamped to [1, 10] after every step.
    """

    def __init__(self, groups: dict[str, list[tuple[str, Tensor]]],
                 cfg: TrainConfig):
        for g in groups:
            if g not in LR_GROUPS:
                raise ValueError(f"unknown group {g!r}")
        self.groups = {g: list(params) for g, params in groups.items()}
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(np.asarray(t.data))
                  for params in groups.values() for name, t in params}
        self.v = {name: np.zeros_like(np.asarray(t.data))
                  for params in groups.values() for name, t in params}

    def parameters(self) -> list[Tensor]:
        return [t for params in self.groups.values() for _, t in params]

    def step(self, grads: dict[Tensor, np.ndarray], epoch: int) -> None:
        cfg = self.cfg
        for gname, params in self.groups.items():
            for name, tensor in params:
                g = grads.get(tensor)
                if g is not None and not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient for {name}")
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for gname, params in self.groups.items():
            lr = lr_at_epoch(cfg, gname, epoch)
            if lr == 0.0:
                continue
            for name, tensor in params:
                g = grads.get(tensor)
                if g is None:
                    g = np.zeros_like(self.m[name])
                g = np.asarray(g, dtype=self.m[name].dtype).reshape(self.m[name].shape)
                self.m[name] = cfg.beta1 * self.m[name] + (1 - cfg.beta1) * g
                self.v[name] = cfg.beta2 * self.v[name] + (1 - cfg.beta2) * g * g
                update = lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2)
                                                      + cfg.adam_eps)
                if cfg.weight_decay > 0 and _decays(name):
                    update = update + lr * cfg.weight_decay * np.asarray(tensor.data)
                tensor.data = np.asarray(tensor.data) - update
                if name == "p" or name.endswith(".p"):
                    tensor.data = np.clip(tensor.data, 1.0, 10.0)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in sorted(self.m):
            out.append((f"adam.m.{name}", self.m[name]))
            out.append((f"adam.v.{name}", self.v[name]))
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(t)
        for name in self.m:
            key_m, key_v = f"adam.m.{name}", f"adam.v.{name}"
            if key_m in arrays:
                self.m[name] = np.asarray(arrays[key_m]).reshape(self.m[name].shape)
            if key_v in arrays:
                self.v[name] = np.asarray(arrays[key_v]).reshape(self.v[name].shape)


# ---------------------------------------------------------------------------
# toy model and synthetic data


class ToyModel:
    """Two-block backbone plus attention branch plus pooled descriptor."""

    def __init__(self, backbone: ToyBackbone, net: AttentionNet,
                 spec: PoolingSpec):
        self.backbone = backbone
        self.net = net
        self.spec = spec

    @classmethod
    def fresh(cls, seed: int = 0, backbone_config: ToyBackboneConfig | None = None,
              p_init: float = 2.92) -> "ToyModel":
        rng = np.random.default_rng(seed)
        backbone = ToyBackbone(backbone_config or ToyBackboneConfig(), rng)
        net = AttentionNet(backbone.attention_config(), rng, p_init=p_init)
        return cls(backbone, net, PoolingSpec(kind="gem", p=p_init))

    def descriptor(self, image: np.ndarray, mode: str = "eval") -> Tensor:
        maps = self.backbone.forward(image, mode)
        return descriptor_from_maps(self.net, maps, self.spec, mode)

    def lr_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        att = [(n, t) for n, t in self.net.named_parameters() if n != "p"]
        return {"base": self.backbone.named_parameters(),
                "p": [("p", self.net.p)],
                "attention": att}


@dataclass
class SyntheticDataset:
    images: dict[str, np.ndarray]
    cluster_labels: dict[str, int]

    @property
    def ids(self) -> list[str]:
        return sorted(self.images)


def make_synthetic_dataset(rng, clusters: int = 2, per_cluster: int = 20,
                           shape: tuple[int, int, int] = (4, 8, 8),
                           spread: float = 2.0, noise: float = 0.25) -> SyntheticDataset:
    """Gaussian instance clusters rendered as input maps for the toy backbone."""
    images, labels = {}, {}
    for c in range(clusters):
        center = rng.normal(0.0, spread, size=shape)
        for j in range(per_cluster):
            iid = f"img_{c:02d}_{j:03d}"
            images[iid] = center + rng.normal(0.0, noise, size=shape)
            labels[iid] = c
    return SyntheticDataset(images, labels)


def extract_pool(model: ToyModel, data: SyntheticDataset) -> DescriptorSet:
    """Eval-mode descriptors for every image, used for mining."""
    ids = data.ids
    vecs = np.stack([model.descriptor(data.images[i], mode="eval").data
                     for i in ids])
    return DescriptorSet(ids, vecs)


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_pos_dist: float
    mean_neg_dist: float
    p: float


def _batch_loss(model: ToyModel, batch: list[TrainingTuple],
                data: SyntheticDataset, cfg: TrainConfig):
    """Summed pair terms per tuple, averaged over the batch.

    Each unique image is forwarded once; shared descriptor nodes accumulate
    gradient over every pair they appear in.
    """
    cache: dict[str, Tensor] = {}

    def desc(iid: str) -> Tensor:
        if iid not in cache:
            if iid not in data.images:
                raise KeyError(f"no image record for id {iid!r}")
            cache[iid] = model.descriptor(data.images[iid], mode="train")
        return cache[iid]

    terms, pos_d, neg_d = [], [], []
    for tup in batch:
        q = desc(tup.query)
        pos = desc(tup.positive)
        terms.append(contrastive_loss(q, pos, 1, cfg.margin))
        pos_d.append(pair_distance(q, pos))
        for nid in tup.negatives:
            neg = desc(nid)
            terms.append(contrastive_loss(q, neg, 0, cfg.margin))
            neg_d.append(pair_distance(q, neg))
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(batch)), pos_d, neg_d


def train_epoch(model: ToyModel, tuples: list[TrainingTuple],
                data: SyntheticDataset, cfg: TrainConfig, optimizer: Adam,
                epoch: int, max_steps: int | None = None) -> EpochStats:
    params = optimizer.parameters()
    losses, pos_d, neg_d = [], [], []
    steps = 0
    for start in range(0, len(tuples), cfg.batch_size):
        if max_steps is not None and steps >= max_steps:
            break
        batch = tuples[start:start + cfg.batch_size]
        loss, bp, bn = _batch_loss(model, batch, data, cfg)
        grads = backward(loss, params)
        optimizer.step(grads, epoch)
        losses.append(float(loss.data))
        pos_d += bp
        neg_d += bn
        steps += 1
    return EpochStats(epoch=epoch,
                      mean_loss=float(np.mean(losses)) if losses else 0.0,
                      mean_pos_dist=float(np.mean(pos_d)) if pos_d else 0.0,
                      mean_neg_dist=float(np.mean(neg_d)) if neg_d else 0.0,
                      p=float(model.net.p.data))


# ---------------------------------------------------------------------------
# desk-scale driver


def toy_config() -> TrainConfig:
    """Preset that converges on the synthetic clusters in ~200 steps.

    The TrainConfig default learning rates are sized for a pretrained deep
    backbone and barely move the toy model, so every group is run hotter
    here; the relative ordering (attention hottest, backbone coolest) is
    kept.
    """
    return TrainConfig(base_lr=3e-4, p_lr=3e-3, attention_lr=3e-3,
                       epochs=60, tuples_per_epoch=100, batch_size=10,
                       pool_size=10_000)


def write_stats_csv(path: str, stats: list[EpochStats], seed: int | None = None) -> None:
    def emit(f):
        w = csv.writer(f)
        if seed is not None:
            f.write(f"# seed={seed}\n")
        w.writerow(["epoch", "mean_loss", "mean_pos_dist", "mean_neg_dist", "p"])
        for s in stats:
            w.writerow([s.epoch, f"{s.mean_loss:.6f}", f"{s.mean_pos_dist:.6f}",
                        f"{s.mean_neg_dist:.6f}", f"{s.p:.6f}"])
    storage.atomic_text_write(path, emit)


def save_checkpoint(directory: str, model: ToyModel, cfg: TrainConfig,
                    epoch: int, optimizer: Adam | None = None) -> None:
    extra = list(model.backbone.named_parameters())
    if optimizer is not None:
        for name, arr in optimizer.state_arrays():
            extra.append((name, Tensor(arr)))
    meta = {"epoch": epoch, "config": asdict(cfg),
            "backbone_config": asdict(model.backbone.config),
            "adam_step": optimizer.t if optimizer is not None else 0}
    save_attention_net(model.net, model.spec, directory, extra_params=extra,
                       extra_meta=meta,
                       extra_buffers=model.backbone.named_buffers())


def load_checkpoint(directory: str):
    """Returns (model, config, epoch, adam state arrays, adam step)."""
    net, spec, manifest = load_attention_net(directory)
    cfg = TrainConfig(**manifest["config"])
    backbone = ToyBackbone(ToyBackboneConfig(**manifest["backbone_config"]))
    by_name = dict(backbone.named_parameters())
    adam_arrays: dict[str, np.ndarray] = {}
    for entry in manifest["parameters"]:
        name = entry["name"]
        if name.startswith("adam."):
            adam_arrays[name] = storage.read_tensor(
                os.path.join(directory, entry["file"]))
        elif name in by_name:
            arr = storage.read_tensor(os.path.join(directory, entry["file"]))
            target = by_name[name]
            target.data = np.asarray(arr).reshape(np.shape(target.data))
    for entry in manifest["buffers"]:
        if entry["name"].startswith("backbone."):
            arr = storage.read_tensor(os.path.join(directory, entry["file"]))
            backbone.set_buffer(entry["name"], arr)
    model = ToyModel(backbone, net, spec)
    return model, cfg, int(manifest["epoch"]), adam_arrays, int(manifest["adam_step"])


def train_toy(output_dir: str, seed: int = 0, steps: int = 200,
              cfg: TrainConfig | None = None, clusters: int = 2,
              per_cluster: int = 20) -> dict:
    """End-to-end synthetic training run; writes checkpoint and stats CSV.

    Runs exactly `steps` optimizer steps, refreshing the mining pool at each
    epoch boundary. Returns a summary with first/last epoch losses and final
    pair distances.
    """
    cfg = cfg or toy_config()
    rng = np.random.default_rng(seed)
    data = make_synthetic_dataset(rng, clusters=clusters, per_cluster=per_cluster)
    model = ToyModel.fresh(seed=seed)
    optimizer = Adam(model.lr_groups(), cfg)
    steps_per_epoch = max(1, cfg.tuples_per_epoch // cfg.batch_size)
    stats: list[EpochStats] = []
    done = 0
    epoch = 0
    while done < steps and epoch < cfg.epochs:
        pool = extract_pool(model, data)
        tuples = build_tuples(pool, data.cluster_labels, cfg, rng,
                              cfg.tuples_per_epoch)
        budget = min(steps_per_epoch, steps - done)
        s = train_epoch(model, tuples, data, cfg, optimizer, epoch,
                        max_steps=budget)
        stats.append(s)
        done += budget
        epoch += 1
    os.makedirs(output_dir, exist_ok=True)
    save_checkpoint(os.path.join(output_dir, "checkpoint"), model, cfg,
                    epoch, optimizer)
    write_stats_csv(os.path.join(output_dir, "stats.csv"), stats, seed=seed)
    if not stats:  # steps=0: checkpoint is the untouched initialization
        return {"initial_loss": 0.0, "final_loss": 0.0, "mean_pos_dist": 0.0,
                "mean_neg_dist": 0.0, "p": float(model.net.p.data),
                "steps": 0, "epochs": 0}
    return {"initial_loss": stats[0].mean_loss, "final_loss": stats[-1].mean_loss,
            "mean_pos_dist": stats[-1].mean_pos_dist,
            "mean_neg_dist": stats[-1].mean_neg_dist,
            "p": stats[-1].p, "steps": done, "epochs": epoch}
