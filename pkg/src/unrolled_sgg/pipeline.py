"""Training, evaluation and ablation of the unrolled scene-graph model.

A mini-batch of scenes is run as one block-diagonal graph: attention is
masked to pairs inside the same scene, so batching never mixes scenes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .diversity import (
    GROUPINGS,
    FrequencyBias,
    FusionParams,
    cross_entropy_sum,
    diversity_loss,
    partition_groups,
    relationship_logits,
    total_loss,
)
from .graph_denoise import ParameterError
from .synth_scene import Dataset, SceneGraphSample, SynthConfig, generate
from .unrolled_mp import UmpConfig, UmpParams, node_logits, run_ump

log = logging.getLogger(__name__)

PARAM_NAMES = ("W_in", "w_a", "W_t", "W_x", "W_y", "W_r", "f")
PROTOCOLS = ("predcls", "sgcls")
K_LIST = (20, 50, 100)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, last_finite: float | None):
        super().__init__(f"loss became non-finite at step {step} (last finite loss {last_finite})")
        self.step = step
        self.last_finite = last_finite


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 6
    epochs: int = 10
    tau: float = 0.1
    grouping: str = "batch_pruned"
    min_group_size: int = 3
    bg_ratio: float = 3.0
    clip_norm: float = 5.0
    seed: int = 0
    ump: UmpConfig = field(default_factory=UmpConfig)

    def __post_init__(self):
        if isinstance(self.ump, dict):
            self.ump = UmpConfig(**self.ump)
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ParameterError("need learning_rate >= 0 and 0 <= momentum < 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size must be >= 1 and epochs >= 0")
        if self.tau < 0 or self.bg_ratio < 0 or self.clip_norm <= 0:
            raise ParameterError("tau, bg_ratio must be >= 0 and clip_norm > 0")
        if self.grouping not in GROUPINGS:
            raise ParameterError(f"unknown grouping {self.grouping!r}")


@dataclass
class ModelParams:
    arrays: dict

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_raw: int, num_obj: int, num_rel: int, freq: FrequencyBias | None = None):
        def uniform(rows, cols):
            bound = 1.0 / math.sqrt(cols)
            return rng.uniform(-bound, bound, size=(rows, cols))

        arrays = {
            "W_in": uniform(d, d_raw),
            # w_a acts on the 3d-long concatenation [y_i; y_j; u_ij]
            "w_a": rng.uniform(-1 / math.sqrt(3 * d), 1 / math.sqrt(3 * d), size=(3 * d, 1)),
            "W_t": uniform(num_obj, d),
            "W_x": uniform(d, d),
            "W_y": uniform(d, d),
            "W_r": uniform(num_rel, d),
            "f": (freq or FrequencyBias.zeros(num_obj, num_rel)).flat().copy(),
        }
        return cls(arrays)

    @property
    def num_object_cats(self) -> int:
        return self.arrays["W_t"].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def leaves(self, tape: ad.Tape) -> dict:
        return {k: tape.leaf(self.arrays[k]) for k in PARAM_NAMES}


# ---------------------------------------------------------------------------
# batching and forward pass


@dataclass
class Batch:
    X: np.ndarray
    U: np.ndarray
    scene_of: np.ndarray
    labels: np.ndarray
    offsets: list


def make_batch(scenes: Sequence[SceneGraphSample]) -> Batch:
    sizes = [s.num_nodes for s in scenes]
    total = sum(sizes)
    d = scenes[0].U.shape[2]
    U = np.zeros((total, total, d))
    offsets = []
    start = 0
    for s, n in zip(scenes, sizes):
        U[start : start + n, start : start + n] = s.U
        offsets.append(start)
        start += n
    X = np.concatenate([s.X_raw for s in scenes], axis=0)
    scene_of = np.repeat(np.arange(len(scenes)), sizes)
    labels = np.concatenate([s.object_labels for s in scenes])
    return Batch(X, U, scene_of, labels, offsets)


def node_forward(leaves: dict, batch: Batch, ump: UmpConfig, omegas=None):
    params = UmpParams(leaves["w_a"], leaves["W_t"], leaves["W_in"])
    Y_hat = run_ump(batch.X, batch.U, params, ump, scene_of=batch.scene_of, omegas=omegas)
    return Y_hat, node_logits(Y_hat, leaves["W_t"])


def pair_logits(leaves: dict, Y_hat, batch: Batch, subj, obj, cat_labels):
    O = leaves["W_t"].shape[0]
    keys = np.asarray(cat_labels)[subj] * O + np.asarray(cat_labels)[obj]
    bias_rows = ad.gather_rows(leaves["f"], keys)
    fusion = FusionParams(leaves["W_x"], leaves["W_y"], leaves["W_r"])
    return relationship_logits(Y_hat, batch.U[subj, obj], subj, obj, bias_rows, fusion)


def sample_pairs(scene: SceneGraphSample, rng: np.random.Generator, bg_ratio: float):
    """All annotated pairs plus ``bg_ratio`` times as many unannotated ones."""
    n = scene.num_nodes
    fg, bg = [], []
    for i in range(n):
        for j in range(n):
            if i != j:
                (fg if scene.rel_labels[i, j] > 0 else bg).append((i, j))
    want = int(round(bg_ratio * max(len(fg), 1)))
    if want < len(bg):
        pick = np.sort(rng.choice(len(bg), size=want, replace=False))
        bg = [bg[k] for k in pick]
    return fg + bg


def batch_loss(params: ModelParams, scenes, pairs_per_scene, config: TrainConfig, omegas=None):
    """Build the full training loss on a fresh tape; returns (tape, leaves, loss).

    ``omegas`` pins the per-layer reweighting (see :func:`layer_omegas`).
    """
    tape = ad.Tape()
    leaves = params.leaves(tape)
    batch = make_batch(scenes)
    Y_hat, t_logits = node_forward(leaves, batch, config.ump, omegas)
    subj, obj, targets, image_of = [], [], [], []
    for k, (scene, pairs, off) in enumerate(zip(scenes, pairs_per_scene, batch.offsets)):
        for i, j in pairs:
            subj.append(off + i)
            obj.append(off + j)
            targets.append(int(scene.rel_labels[i, j]))
            image_of.append(k)
    subj, obj = np.array(subj, dtype=np.int64), np.array(obj, dtype=np.int64)
    r_logits = pair_logits(leaves, Y_hat, batch, subj, obj, batch.labels)
    keys = list(zip(batch.labels[subj].tolist(), batch.labels[obj].tolist()))
    partition = partition_groups(keys, image_of, config.grouping, config.min_group_size)
    rel = diversity_loss(r_logits, partition, config.tau, targets)
    loss = total_loss(t_logits, batch.labels, rel, len(batch.labels))
    return tape, leaves, loss


def layer_omegas(params: ModelParams, scenes, config: TrainConfig) -> list:
    """Reweighting matrices of every layer in the forward pass of ``scenes``."""
    tape = ad.Tape()
    leaves = {k: tape.const(v) for k, v in params.arrays.items()}
    batch = make_batch(scenes)
    ump = UmpParams(leaves["w_a"], leaves["W_t"], leaves["W_in"])
    _, states = run_ump(batch.X, batch.U, ump, config.ump, scene_of=batch.scene_of, return_states=True)
    return [s.Omega for s in states]


# ---------------------------------------------------------------------------
# optimizer


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place to global l2 norm ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def sgd_momentum_step(arrays: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    """``v <- mu v - lr g``; ``theta <- theta + v`` (in place)."""
    for k in PARAM_NAMES:
        velocity[k] = momentum * velocity[k] - lr * grads[k]
        arrays[k] = arrays[k] + velocity[k]


@dataclass
class TrainResult:
    params: ModelParams
    velocity: dict
    loss_trace: list
    epochs_done: int
    clipped_steps: int = 0


def frequency_bias(dataset: Dataset) -> FrequencyBias:
    cfg = dataset.config
    s_c, o_c, r = [], [], []
    for s in dataset.train:
        n = s.num_nodes
        ii, jj = np.nonzero(~np.eye(n, dtype=bool))
        s_c.append(s.object_labels[ii])
        o_c.append(s.object_labels[jj])
        r.append(s.rel_labels[ii, jj])
    if not s_c:
        return FrequencyBias.zeros(cfg.num_object_cats, cfg.num_rel_cats)
    return FrequencyBias.from_triplets(
        np.concatenate(s_c), np.concatenate(o_c), np.concatenate(r), cfg.num_object_cats, cfg.num_rel_cats
    )


def init_params(dataset: Dataset, config: TrainConfig) -> ModelParams:
    cfg = dataset.config
    if config.ump.feature_dim != cfg.feature_dim:
        raise ParameterError(
            f"model feature_dim {config.ump.feature_dim} must equal the data's union feature dim {cfg.feature_dim}"
        )
    rng = np.random.default_rng([config.seed, 7919])
    return ModelParams.init(rng, cfg.feature_dim, cfg.raw_dim, cfg.num_object_cats, cfg.num_rel_cats, frequency_bias(dataset))


def train(
    dataset: Dataset,
    config: TrainConfig,
    checkpoint_dir=None,
    resume: TrainResult | None = None,
) -> TrainResult:
    """Mini-batch SGD with momentum; one RNG stream per (seed, epoch).

    Passing ``resume`` continues from its parameters, velocity and epoch
    counter, giving the same result as an uninterrupted run.
    """
    scenes = dataset.train
    if not scenes:
        raise ValueError("training split is empty")
    if resume is None:
        params = init_params(dataset, config)
        velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        trace: list = []
        start_epoch = 0
        clipped = 0
    else:
        params = resume.params.copy()
        velocity = {k: v.copy() for k, v in resume.velocity.items()}
        trace = list(resume.loss_trace)
        start_epoch = resume.epochs_done
        clipped = resume.clipped_steps
    last_finite = trace[-1] if trace else None
    for epoch in range(start_epoch, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(scenes))
        for start in range(0, len(order), config.batch_size):
            chunk = [scenes[k] for k in order[start : start + config.batch_size]]
            pairs = [sample_pairs(s, rng, config.bg_ratio) for s in chunk]
            tape, leaves, loss = batch_loss(params, chunk, pairs, config)
            value = float(loss.value[0, 0])
            if not math.isfinite(value):
                raise TrainingDivergedError(len(trace), last_finite)
            tape.backward(loss)
            grads = {k: leaves[k].grad for k in PARAM_NAMES}
            norm = clip_gradients(grads, config.clip_norm)
            if norm > config.clip_norm:
                clipped += 1
                log.debug("step %d: clipped gradient norm %.3g", len(trace), norm)
            sgd_momentum_step(params.arrays, grads, velocity, config.learning_rate, config.momentum)
            trace.append(value)
            last_finite = value
        result = TrainResult(params.copy(), {k: v.copy() for k, v in velocity.items()}, list(trace), epoch + 1, clipped)
        if checkpoint_dir is not None:
            save_checkpoint(result, config, Path(checkpoint_dir) / f"epoch_{epoch + 1:03d}.json")
    if clipped:
        log.info("gradient clipping active on %d of %d steps", clipped, len(trace))
    return TrainResult(params, velocity, trace, max(config.epochs, start_epoch), clipped)


# ---------------------------------------------------------------------------
# checkpoints


def _config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def save_checkpoint(result: TrainResult, config: TrainConfig, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "format": "unrolled-sgg-checkpoint",
        "version": 1,
        "config": _config_dict(config),
        "epochs_done": result.epochs_done,
        "clipped_steps": result.clipped_steps,
        "loss_trace": result.loss_trace,
        "params": {k: v.tolist() for k, v in result.params.arrays.items()},
        "velocity": {k: v.tolist() for k, v in result.velocity.items()},
    }
    if extra:
        record["extra"] = extra
    path.write_text(json.dumps(record) + "\n")


def load_checkpoint(path) -> tuple[TrainResult, TrainConfig, dict]:
    record = json.loads(Path(path).read_text())
    if record.get("format") != "unrolled-sgg-checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    config = TrainConfig(**record["config"])
    params = ModelParams({k: np.array(v, dtype=np.float64) for k, v in record["params"].items()})
    velocity = {k: np.array(v, dtype=np.float64) for k, v in record["velocity"].items()}
    result = TrainResult(params, velocity, record["loss_trace"], record["epochs_done"], record.get("clipped_steps", 0))
    return result, config, record.get("extra", {})


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    protocol: str
    recall_at: dict
    mean_recall_at: dict
    per_class_recall: dict  # K -> list over relationship classes (index 0 unused, None if absent)
    column_mass_entropy: float
    object_accuracy: float
    num_scenes: int

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "mean_recall_at": {str(k): v for k, v in self.mean_recall_at.items()},
            "per_class_recall": {str(k): v for k, v in self.per_class_recall.items()},
            "column_mass_entropy": self.column_mass_entropy,
            "object_accuracy": self.object_accuracy,
            "num_scenes": self.num_scenes,
        }


@dataclass
class ScenePrediction:
    """Scored predictions for one scene, pairs in row-major order."""

    pairs: list
    rel_probs: np.ndarray  # num_pairs x R
    node_probs: np.ndarray  # n x O
    pred_labels: np.ndarray


def predict(params: ModelParams, scenes, ump: UmpConfig, protocol: str, batch_size: int = 16) -> list:
    if protocol not in PROTOCOLS:
        raise ad.ContractError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    out = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start : start + batch_size]
        tape = ad.Tape()
        leaves = {k: tape.const(v) for k, v in params.arrays.items()}
        batch = make_batch(chunk)
        Y_hat, t_logits = node_forward(leaves, batch, ump)
        T = ad.row_softmax(t_logits).value
        pred = np.argmax(T, axis=1)
        cats = batch.labels if protocol == "predcls" else pred
        subj, obj, spans = [], [], []
        for s, off in zip(chunk, batch.offsets):
            n = s.num_nodes
            ii, jj = np.nonzero(~np.eye(n, dtype=bool))
            spans.append((len(subj), len(subj) + len(ii), list(zip(ii.tolist(), jj.tolist()))))
            subj.extend((off + ii).tolist())
            obj.extend((off + jj).tolist())
        if subj:
            P = ad.row_softmax(pair_logits(leaves, Y_hat, batch, np.array(subj), np.array(obj), cats)).value
        else:
            P = np.zeros((0, params.arrays["W_r"].shape[0]))
        for s, off, (a, b, pairs) in zip(chunk, batch.offsets, spans):
            n = s.num_nodes
            out.append(ScenePrediction(pairs, P[a:b], T[off : off + n], pred[off : off + n]))
    return out


def rank_triplets(pred: ScenePrediction, protocol: str):
    """Per-pair best foreground relation, sorted by (score desc, pair index asc)."""
    rows = []
    for k, (i, j) in enumerate(pred.pairs):
        probs = pred.rel_probs[k]
        r = 1 + int(np.argmax(probs[1:]))
        score = float(probs[r])
        if protocol == "sgcls":
            ei, ej = pred.pred_labels[i], pred.pred_labels[j]
            score *= float(pred.node_probs[i, ei] * pred.node_probs[j, ej])
        rows.append((score, k, i, j, r))
    rows.sort(key=lambda t: (-t[0], t[1]))
    return rows


def scene_hits(scene: SceneGraphSample, pred: ScenePrediction, protocol: str, K: int) -> set:
    """Ground-truth triplets ``(i, j, r)`` recovered in the top ``K``."""
    labels_ok = np.ones(scene.num_nodes, dtype=bool)
    if protocol == "sgcls":
        labels_ok = pred.pred_labels == scene.object_labels
    hits = set()
    for _, _, i, j, r in rank_triplets(pred, protocol)[:K]:
        if scene.rel_labels_full[i, j] == r and labels_ok[i] and labels_ok[j]:
            hits.add((i, j, r))
    return hits


def recall_metrics(scenes, preds, protocol: str, k_list=K_LIST, num_rel: int | None = None):
    """Recall@K averaged over scenes and per-class recall (mean over scenes containing the class)."""
    if num_rel is None:
        num_rel = preds[0].rel_probs.shape[1] if preds else 1
    recall, mean_recall, per_class = {}, {}, {}
    for K in k_list:
        scene_recalls = []
        class_recalls = [[] for _ in range(num_rel)]
        for scene, pred in zip(scenes, preds):
            gt = scene.triplets(full=True)
            if not gt:
                continue
            hits = scene_hits(scene, pred, protocol, K)
            scene_recalls.append(len(hits) / len(gt))
            for r in sorted({t[2] for t in gt}):
                n_r = sum(1 for t in gt if t[2] == r)
                class_recalls[r].append(sum(1 for t in hits if t[2] == r) / n_r)
        recall[K] = float(np.mean(scene_recalls)) if scene_recalls else 0.0
        pc = [float(np.mean(v)) if v else None for v in class_recalls]
        pc[0] = None
        per_class[K] = pc
        present = [v for v in pc if v is not None]
        mean_recall[K] = float(np.mean(present)) if present else 0.0
    return recall, mean_recall, per_class


def column_mass_entropy(P: np.ndarray) -> float:
    if P.size == 0:
        return 0.0
    mass = P.sum(axis=0)
    mass = mass / mass.sum()
    nz = mass[mass > 0]
    return float(-(nz * np.log(nz)).sum())


def evaluate(params: ModelParams, scenes, ump: UmpConfig, protocol: str = "predcls", k_list=K_LIST) -> EvalReport:
    if not scenes:
        raise ad.ContractError("evaluation split is empty")
    if params.arrays["W_in"].shape[1] != scenes[0].X_raw.shape[1]:
        raise ad.ContractError("checkpoint input width does not match the dataset")
    preds = predict(params, scenes, ump, protocol)
    num_rel = params.arrays["W_r"].shape[0]
    recall, mean_recall, per_class = recall_metrics(scenes, preds, protocol, k_list, num_rel)
    P_all = np.concatenate([p.rel_probs for p in preds], axis=0)
    correct = sum(int((p.pred_labels == s.object_labels).sum()) for s, p in zip(scenes, preds))
    nodes = sum(s.num_nodes for s in scenes)
    return EvalReport(
        protocol,
        recall,
        mean_recall,
        per_class,
        column_mass_entropy(P_all),
        correct / nodes,
        len(scenes),
    )


# ---------------------------------------------------------------------------
# ablation

ABLATION_AXES = ("p", "K", "tau", "grouping", "variant", "module")
MODULE_SETTINGS = {
    # (U-MP on, GDE on)
    "none": ("gmp_baseline", 0.0),
    "ump": ("unrolled_reweighted", 0.0),
    "gde": ("gmp_baseline", None),
    "both": ("unrolled_reweighted", None),
}


def configure(base: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "p":
        return replace(base, ump=replace(base.ump, p=float(value)))
    if axis == "K":
        return replace(base, ump=replace(base.ump, num_layers=int(value)))
    if axis == "tau":
        return replace(base, tau=float(value))
    if axis == "grouping":
        return replace(base, grouping=str(value))
    if axis == "variant":
        return replace(base, ump=replace(base.ump, variant=str(value)))
    if axis == "module":
        variant, tau = MODULE_SETTINGS[str(value)]
        return replace(base, tau=base.tau if tau is None else tau, ump=replace(base.ump, variant=variant))
    raise ParameterError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def run_setting(data, config: TrainConfig, seed: int, protocols=PROTOCOLS, k_list=K_LIST, split: str = "test") -> dict:
    """Train and evaluate one configuration for one seed.

    ``data`` is either a fixed :class:`Dataset` or a :class:`SynthConfig`
    regenerated with ``seed``.
    """
    dataset = generate(replace(data, seed=seed)) if isinstance(data, SynthConfig) else data
    cfg = replace(config, seed=seed)
    result = train(dataset, cfg)
    reports = {proto: evaluate(result.params, dataset[split], cfg.ump, proto, k_list) for proto in protocols}
    return {"seed": seed, "final_loss": result.loss_trace[-1] if result.loss_trace else None, "reports": reports}


def ablate(data, base: TrainConfig, axis: str, values, seeds=(0,), protocols=PROTOCOLS, k_list=K_LIST) -> list:
    """One row per (value, seed, protocol) with flattened metrics."""
    rows = []
    seeds = [int(s) for s in seeds]
    for value in values:
        cfg = configure(base, axis, value)
        for seed in seeds:
            out = run_setting(data, cfg, seed, protocols, k_list)
            for proto, rep in out["reports"].items():
                row = {"axis": axis, "value": value, "seed": seed, "seeds": seeds, "protocol": proto}
                for K in k_list:
                    row[f"R@{K}"] = rep.recall_at[K]
                    row[f"mR@{K}"] = rep.mean_recall_at[K]
                row["object_accuracy"] = rep.object_accuracy
                row["column_mass_entropy"] = rep.column_mass_entropy
                rows.append(row)
    return rows
