"""Synthetic scene graphs with spurious pair similarity and long-tailed relations.

Each scene draws a handful of object categories and several instances of
each. Node inputs concatenate an appearance vector (category mean plus
isotropic noise), a noisy category-probability vector and a 4-number box
proxy. The union feature of an ordered pair ``(i, j)`` is

    u_ij = sim_strength * (same_ij + spurious_ij) * v_sim
           + rel_signal * rho[r_ij] + union_noise * N(0, I)

so a spurious cross-category pair is indistinguishable from a
same-category pair by its union feature alone.

Relationship classes follow a Zipf law over class index, modulated per
(subject, object) category pair; a seeded subset of true relations is
hidden from ``rel_labels`` (``rel_labels_full`` keeps them for evaluation).

Files are JSON lines: a header record with the format version and the
generating config, then one scene per line.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .graph_denoise import ParameterError

FORMAT_NAME = "unrolled-sgg-scenes"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class SynthConfig:
    num_object_cats: int = 8
    num_rel_cats: int = 10
    min_nodes: int = 6
    max_nodes: int = 10
    cats_per_scene: int = 3
    feature_dim: int = 64
    cluster_separation: float = 4.0
    appearance_noise: float = 1.0
    category_prob_signal: float = 1.0
    spurious_pair_rate: float = 0.3
    sim_strength: float = 2.0
    rel_signal: float = 1.0
    union_noise: float = 1.0
    relation_rate: float = 0.25
    tail_exponent: float = 1.5
    pair_modulation: float = 0.5
    annotation_drop_rate: float = 0.3
    num_train: int = 200
    num_val: int = 50
    num_test: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("spurious_pair_rate", "annotation_drop_rate", "relation_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if self.num_object_cats < 2 or self.num_rel_cats < 2:
            raise ParameterError("need at least 2 object and 2 relationship categories")
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ParameterError("need 1 <= min_nodes <= max_nodes")
        if self.cats_per_scene < 1:
            raise ParameterError("cats_per_scene must be >= 1")
        if self.num_object_cats > self.feature_dim:
            raise ParameterError("feature_dim must be >= num_object_cats")
        for name in ("cluster_separation", "appearance_noise", "union_noise", "tail_exponent"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative")

    @property
    def raw_dim(self) -> int:
        return self.feature_dim + self.num_object_cats + 4


@dataclass
class SceneGraphSample:
    scene_id: int
    X_raw: np.ndarray  # n x raw_dim
    U: np.ndarray  # n x n x feature_dim
    object_labels: np.ndarray  # n
    rel_labels: np.ndarray  # n x n, 0 = none, after annotation drop
    rel_labels_full: np.ndarray  # n x n, before the drop
    spurious: np.ndarray = field(default=None)  # n x n bool, generator bookkeeping

    @property
    def num_nodes(self) -> int:
        return len(self.object_labels)

    def triplets(self, full: bool = True):
        """Ground-truth ``(subject, object, relation)`` triplets, row-major order."""
        rel = self.rel_labels_full if full else self.rel_labels
        s, o = np.nonzero(rel)
        return [(int(a), int(b), int(rel[a, b])) for a, b in zip(s, o)]


@dataclass
class Dataset:
    config: SynthConfig
    splits: dict

    def __getitem__(self, split: str) -> list:
        return self.splits[split]

    @property
    def train(self):
        return self.splits["train"]

    @property
    def val(self):
        return self.splits["val"]

    @property
    def test(self):
        return self.splits["test"]


@dataclass
class _Latent:
    means: np.ndarray  # O x feature_dim
    v_sim: np.ndarray
    rho: np.ndarray  # R x feature_dim, row 0 unused
    rel_probs: np.ndarray  # O x O x (R - 1)


def _latent(config: SynthConfig, rng: np.random.Generator) -> _Latent:
    d, O, R = config.feature_dim, config.num_object_cats, config.num_rel_cats
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    # pairwise mean distance equals cluster_separation (in noise units)
    means = basis[:, :O].T * (config.cluster_separation * config.appearance_noise / np.sqrt(2))
    v_sim = basis[:, O] if O < d else basis[:, 0]
    rho = rng.standard_normal((R, d))
    rho /= np.linalg.norm(rho, axis=1, keepdims=True)
    rho[0] = 0.0
    zipf = np.arange(1, R, dtype=np.float64) ** (-config.tail_exponent)
    mod = np.exp(config.pair_modulation * rng.standard_normal((O, O, R - 1)))
    probs = zipf * mod
    probs /= probs.sum(axis=2, keepdims=True)
    return _Latent(means, v_sim, rho, probs)


def category_means(config: SynthConfig) -> np.ndarray:
    """Appearance means of the generating distribution (for sanity checks)."""
    return _latent(config, np.random.default_rng(config.seed)).means


def _scene(config: SynthConfig, lat: _Latent, rng: np.random.Generator, scene_id: int) -> SceneGraphSample:
    O, R, d = config.num_object_cats, config.num_rel_cats, config.feature_dim
    n = int(rng.integers(config.min_nodes, config.max_nodes + 1))
    k = min(config.cats_per_scene, O)
    cats = rng.choice(O, size=k, replace=False)
    labels = cats[rng.integers(0, k, size=n)]

    appearance = lat.means[labels] + config.appearance_noise * rng.standard_normal((n, d))
    logits = config.category_prob_signal * np.eye(O)[labels] + rng.standard_normal((n, O))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    boxes = rng.uniform(0.0, 1.0, size=(n, 4))
    X_raw = np.concatenate([appearance, probs, boxes], axis=1)

    rel_full = np.zeros((n, n), dtype=np.int64)
    has_rel = rng.uniform(size=(n, n)) < config.relation_rate
    for i in range(n):
        for j in range(n):
            if i != j and has_rel[i, j]:
                rel_full[i, j] = 1 + rng.choice(R - 1, p=lat.rel_probs[labels[i], labels[j]])

    same = labels[:, None] == labels[None, :]
    flag = rng.uniform(size=(n, n)) < config.spurious_pair_rate
    spurious = np.triu(flag, 1)
    spurious = (spurious | spurious.T) & ~same
    sim = (same | spurious).astype(np.float64)
    np.fill_diagonal(sim, 0.0)
    U = (
        config.sim_strength * sim[:, :, None] * lat.v_sim
        + config.rel_signal * lat.rho[rel_full]
        + config.union_noise * rng.standard_normal((n, n, d))
    )
    U[np.arange(n), np.arange(n)] = 0.0

    hidden = (rel_full > 0) & (rng.uniform(size=(n, n)) < config.annotation_drop_rate)
    rel = np.where(hidden, 0, rel_full)
    return SceneGraphSample(scene_id, X_raw, U, labels.astype(np.int64), rel, rel_full, spurious)


def generate(config: SynthConfig) -> Dataset:
    """Deterministic train/val/test splits from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    lat = _latent(config, rng)
    sizes = {"train": config.num_train, "val": config.num_val, "test": config.num_test}
    splits = {}
    scene_id = 0
    for split in SPLITS:
        scenes = []
        for _ in range(sizes[split]):
            scenes.append(_scene(config, lat, rng, scene_id))
            scene_id += 1
        splits[split] = scenes
    return Dataset(config, splits)


def bayes_node_accuracy(dataset: Dataset, split: str = "test") -> float:
    """Object accuracy of the per-node Bayes rule of the generating model.

    Uses both the appearance block (isotropic Gaussian around the category
    mean) and the category-probability block, whose log-probabilities equal
    ``signal * onehot + noise`` up to a per-node shift. Scene context is
    ignored, so this is a lower bound on the full Bayes accuracy.
    """
    cfg = dataset.config
    means = category_means(cfg)
    d, O = cfg.feature_dim, cfg.num_object_cats
    hits = total = 0
    for s in dataset[split]:
        app = s.X_raw[:, :d]
        logp = np.log(s.X_raw[:, d : d + O])
        score = -((app[:, None, :] - means[None]) ** 2).sum(-1) / (2 * cfg.appearance_noise**2)
        score = score + cfg.category_prob_signal * logp
        hits += int((score.argmax(axis=1) == s.object_labels).sum())
        total += s.num_nodes
    return hits / max(total, 1)


def nearest_mean_accuracy(dataset: Dataset, split: str = "test") -> float:
    """Object accuracy of the generative-model nearest-mean rule on appearance."""
    means = category_means(dataset.config)
    d = dataset.config.feature_dim
    hits = total = 0
    for s in dataset[split]:
        app = s.X_raw[:, :d]
        dist = ((app[:, None, :] - means[None]) ** 2).sum(-1)
        hits += int((dist.argmin(axis=1) == s.object_labels).sum())
        total += s.num_nodes
    return hits / max(total, 1)


# ---------------------------------------------------------------------------
# serialization


def _scene_record(split: str, s: SceneGraphSample) -> dict:
    return {
        "split": split,
        "scene_id": s.scene_id,
        "X_raw": s.X_raw.tolist(),
        "U": s.U.tolist(),
        "object_labels": s.object_labels.tolist(),
        "rel_labels": s.rel_labels.tolist(),
        "rel_labels_full": s.rel_labels_full.tolist(),
        "spurious": s.spurious.astype(int).tolist() if s.spurious is not None else None,
    }


def _matrix(value, ncols: int, n: int, dtype=np.float64):
    arr = np.array(value, dtype=dtype)
    if n == 0:
        return arr.reshape(0, ncols)
    return arr


def _scene_from_record(rec: dict, config: SynthConfig) -> SceneGraphSample:
    labels = np.array(rec["object_labels"], dtype=np.int64)
    n = len(labels)
    X = _matrix(rec["X_raw"], config.raw_dim, n)
    U = np.array(rec["U"], dtype=np.float64).reshape(n, n, config.feature_dim)
    rel = _matrix(rec["rel_labels"], n, n, np.int64)
    rel_full = _matrix(rec["rel_labels_full"], n, n, np.int64)
    spur = rec.get("spurious")
    spur = None if spur is None else _matrix(spur, n, n, np.int64).astype(bool)
    if X.shape != (n, config.raw_dim) or rel.shape != (n, n) or rel_full.shape != (n, n):
        raise ValueError("array shapes disagree with node count")
    return SceneGraphSample(int(rec["scene_id"]), X, U, labels, rel, rel_full, spur)


def save(dataset: Dataset, path, meta: dict | None = None) -> None:
    """Write ``dataset`` as JSON lines; ``meta`` is stored verbatim in the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "config": asdict(dataset.config)}
        if meta:
            header["meta"] = meta
        fh.write(json.dumps(header) + "\n")
        for split in SPLITS:
            for s in dataset.splits.get(split, []):
                fh.write(json.dumps(_scene_record(split, s)) + "\n")


def load(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(1, "empty file, expected a header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(1, f"bad header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(1, f"not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(1, f"unsupported format version {header.get('version')!r}")
    known = {f.name for f in fields(SynthConfig)}
    cfg = header.get("config", {})
    unknown = set(cfg) - known
    if unknown:
        raise DatasetFormatError(1, f"unknown config keys {sorted(unknown)}")
    config = SynthConfig(**cfg)
    splits = {name: [] for name in SPLITS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            split = rec["split"]
            if split not in splits:
                raise ValueError(f"unknown split {split!r}")
            splits[split].append(_scene_from_record(rec, config))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(lineno, f"invalid JSON: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(lineno, f"bad scene record: {exc}") from None
    return Dataset(config, splits)
