"""Multiclass gradient-boosted trees, bootstrap ensembles and uncertainty.

Trees use exact greedy split search: every sorted unique value of a feature
is a candidate threshold and rows with ``x <= threshold`` go left. Because
only the ordering of values matters, rescaling a feature column by a
positive constant leaves every partition unchanged.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ArgumentError, DataError, FormatError, IoError, TruncationError

FEATURE_COLUMNS = ("omega_p", "pitch", "asym", "slope")
MAGIC = b"BHGB"
VERSION = 1
_NODE = struct.Struct("<iddiid")  # feature, threshold, gain, left, right, value


@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 1000
    max_depth: int = 6
    learning_rate: float = 0.05
    subsample: float = 0.8
    colsample: float = 0.8
    min_child_weight: float = 1.0
    gamma: float = 0.0
    l2_reg: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "subsample", "colsample"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ArgumentError(f"{name} must lie in (0, 1], got {v}")
        if self.max_depth < 1 or self.n_rounds < 0:
            raise ArgumentError("max_depth must be >= 1 and n_rounds >= 0")
        if self.l2_reg < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ArgumentError("l2_reg, gamma and min_child_weight must be >= 0")


# ---------------------------------------------------------------------------
# trees


@dataclass
class Tree:
    """Flattened binary tree; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    gain: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X):
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            r, n = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])


def _best_split(X, g, h, cols, cfg):
    """Best ``(gain, feature, threshold)`` over ``cols`` or None.

    Ties keep the lowest feature index, then the lowest threshold.
    """
    G, H = g.sum(), h.sum()
    parent = G * G / (H + cfg.l2_reg)
    best = None
    for f in cols:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        gl = np.cumsum(g[order])[:-1]
        hl = np.cumsum(h[order])[:-1]
        # only cut between distinct values
        valid = xs[:-1] < xs[1:]
        valid &= (hl >= cfg.min_child_weight) & (H - hl >= cfg.min_child_weight)
        if not valid.any():
            continue
        gr, hr = G - gl, H - hl
        gain = 0.5 * (gl * gl / (hl + cfg.l2_reg) + gr * gr / (hr + cfg.l2_reg) - parent) - cfg.gamma
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))  # first maximum: lowest threshold
        if gain[i] > 0 and (best is None or gain[i] > best[0]):
            best = (float(gain[i]), int(f), float(xs[i]))
    return best


def build_tree(X, g, h, cols, cfg: BoostConfig) -> Tree:
    feat, thr, gains, left, right, value = [], [], [], [], [], []

    def new_node():
        for lst, v in ((feat, -1), (thr, 0.0), (gains, 0.0), (left, -1), (right, -1), (value, 0.0)):
            lst.append(v)
        return len(feat) - 1

    root = new_node()
    stack = [(root, np.arange(X.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop()
        gs, hs = g[idx], h[idx]
        split = _best_split(X[idx], gs, hs, cols, cfg) if depth < cfg.max_depth and idx.size >= 2 else None
        if split is None:
            value[node] = float(-gs.sum() / (hs.sum() + cfg.l2_reg))
            continue
        gain, f, t = split
        mask = X[idx, f] <= t
        l, r = new_node(), new_node()
        feat[node], thr[node], gains[node], left[node], right[node] = f, t, gain, l, r
        # push right first so the left subtree is numbered first
        stack.append((r, idx[~mask], depth + 1))
        stack.append((l, idx[mask], depth + 1))
    return Tree(
        np.array(feat, np.int64), np.array(thr), np.array(gains),
        np.array(left, np.int64), np.array(right, np.int64), np.array(value),
    )


# ---------------------------------------------------------------------------
# boosters


def softmax(margins):
    z = margins - margins.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_loss(probs, y):
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))


@dataclass
class Booster:
    config: BoostConfig
    n_classes: int
    n_features: int
    trees: list = field(default_factory=list)  # trees[round][class]

    def margins(self, X, n_rounds=None):
        X = np.asarray(X, dtype=np.float64)
        out = np.zeros((X.shape[0], self.n_classes))
        for rnd in self.trees[:n_rounds]:
            for k, tree in enumerate(rnd):
                out[:, k] += self.config.learning_rate * tree.predict(X)
        return out

    def predict_proba(self, X, n_rounds=None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return softmax(self.margins(X, n_rounds))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def importance(self):
        """Total split gain per input column, normalised to sum to 1."""
        tot = np.zeros(self.n_features)
        for rnd in self.trees:
            for tree in rnd:
                inner = tree.feature >= 0
                np.add.at(tot, tree.feature[inner], tree.gain[inner])
        s = tot.sum()
        return tot / s if s > 0 else np.full(self.n_features, 1.0 / self.n_features)


def fit(X, y, cfg: BoostConfig = BoostConfig(), n_classes=None, history=None) -> Booster:
    """Fit a softmax booster. ``y`` holds integer class ids.

    When ``history`` is a list, the full-training-set log loss after every
    round is appended to it (index 0 is the untrained loss).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ArgumentError(f"feature table shape {X.shape} does not match {y.shape[0]} labels")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values; impute them first")
    k = int(n_classes or (y.max() + 1))
    if np.unique(y).size < 2:
        raise DataError("need at least two classes present")
    n, d = X.shape
    booster = Booster(cfg, k, d)
    rng = np.random.default_rng(cfg.seed)
    onehot = np.eye(k)[y]
    margins = np.zeros((n, k))
    if history is not None:
        history.append(log_loss(softmax(margins), y))
    n_rows = max(1, int(round(cfg.subsample * n)))
    n_cols = max(1, int(round(cfg.colsample * d)))
    for _ in range(cfg.n_rounds):
        p = softmax(margins)
        grad = p - onehot
        hess = np.maximum(p * (1.0 - p), 1e-16)
        rows = np.sort(rng.choice(n, n_rows, replace=False)) if n_rows < n else np.arange(n)
        trees = []
        for c in range(k):
            cols = np.sort(rng.choice(d, n_cols, replace=False)) if n_cols < d else np.arange(d)
            tree = build_tree(X[rows], grad[rows, c], hess[rows, c], cols, cfg)
            trees.append(tree)
        for c, tree in enumerate(trees):
            margins[:, c] += cfg.learning_rate * tree.predict(X)
        booster.trees.append(trees)
        if history is not None:
            history.append(log_loss(softmax(margins), y))
    return booster


# ---------------------------------------------------------------------------
# imputation


@dataclass
class Imputer:
    """Replace flagged-invalid features with training medians and append a
    was-imputed indicator column per feature."""

    medians: np.ndarray

    @classmethod
    def fit(cls, X, valid):
        X = np.asarray(X, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool) & np.isfinite(X)
        med = np.array([np.median(X[valid[:, j], j]) if valid[:, j].any() else 0.0 for j in range(X.shape[1])])
        return cls(med)

    def transform(self, X, valid):
        X = np.array(X, dtype=np.float64)
        valid = np.asarray(valid, dtype=bool) & np.isfinite(X)
        X[~valid] = np.broadcast_to(self.medians, X.shape)[~valid]
        return np.hstack([X, (~valid).astype(np.float64)])


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class BoostedEnsemble:
    models: list
    class_names: list
    imputer: Imputer
    task: str = ""
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        if not self.models:
            raise ArgumentError("ensemble needs at least one model")

    def member_proba(self, X, valid=None):
        """Probabilities of every member, shape ``(n_models, n, n_classes)``."""
        Z = self.prepare(X, valid)
        return np.stack([m.predict_proba(Z) for m in self.models])

    def prepare(self, X, valid=None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if valid is None:
            valid = np.isfinite(X)
        return self.imputer.transform(X, valid)

    def predict_proba(self, X, valid=None):
        return self.member_proba(X, valid).mean(axis=0)

    def importance(self):
        """Mean normalised gain per feature; indicator columns count toward
        their feature."""
        imp = np.mean([m.importance() for m in self.models], axis=0)
        d = len(self.imputer.medians)
        out = imp[:d] + imp[d : 2 * d]
        return out / out.sum()


def _derived_seed(master, i):
    return int(np.random.default_rng([int(master), int(i)]).integers(2**31 - 1))


def train_ensemble(X, valid, y, class_names, cfg: BoostConfig = BoostConfig(), n_models=1, frac=1.0, task=""):
    """Bootstrap ensemble: each member fits a seeded ``frac`` share of rows
    drawn without replacement. ``n_models=1, frac=1`` is a plain fit."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n_models < 1 or not 0 < frac <= 1:
        raise ArgumentError("n_models must be >= 1 and frac in (0, 1]")
    imputer = Imputer.fit(X, valid)
    Z = imputer.transform(X, valid)
    models, seeds = [], []
    for i in range(n_models):
        if n_models == 1 and frac == 1.0:
            seed, rows = cfg.seed, np.arange(n)
        else:
            seed = _derived_seed(cfg.seed, i)
            rng = np.random.default_rng(seed)
            rows = np.sort(rng.choice(n, max(2, int(round(frac * n))), replace=False))
        models.append(fit(Z[rows], y[rows], replace(cfg, seed=seed), n_classes=len(class_names)))
        seeds.append(seed)
    return BoostedEnsemble(models, list(class_names), imputer, task, seeds)


def bootstrap_ensemble(X, valid, y, class_names, cfg: BoostConfig = BoostConfig(), n_models=100, frac=0.8, task=""):
    if np.asarray(X).shape[0] < 10:
        raise DataError("bootstrap needs at least 10 rows")
    return train_ensemble(X, valid, y, class_names, cfg, n_models, frac, task)


# ---------------------------------------------------------------------------
# uncertainty


@dataclass
class UncertaintyReport:
    accuracy: float
    aleatoric: float
    epistemic: float
    mean_confidence: float
    std_confidence: float
    n_samples: int

    def to_dict(self):
        return asdict(self)


def uncertainty_from_probs(member_probs, labels=None) -> UncertaintyReport:
    """``member_probs`` has shape ``(n_models, n, n_classes)``."""
    P = np.asarray(member_probs, dtype=np.float64)
    mean = P.mean(axis=0)
    ent = -np.sum(np.where(mean > 0, mean * np.log(np.where(mean > 0, mean, 1.0)), 0.0), axis=1)
    # variance about the first member: identical members give exactly zero
    d = P - P[0]
    var = np.maximum(np.mean(d * d, axis=0) - np.mean(d, axis=0) ** 2, 0.0)
    conf = mean.max(axis=1)
    acc = float("nan")
    if labels is not None:
        acc = float(np.mean(np.argmax(mean, axis=1) == np.asarray(labels)))
    return UncertaintyReport(acc, float(ent.mean()), float(var.mean()), float(conf.mean()), float(conf.std()), int(mean.shape[0]))


def uncertainty(ensemble: BoostedEnsemble, X, labels=None, valid=None) -> UncertaintyReport:
    return uncertainty_from_probs(ensemble.member_proba(X, valid), labels)


# ---------------------------------------------------------------------------
# BHGB files


def save_ensembles(ensembles, path):
    """Write one or more ensembles. Layout: magic, u32 version, u32 JSON
    header length, JSON header, then per member model per round per class a
    u32 node count followed by ``<iddiid`` node records."""
    header = {"ensembles": []}
    body = []
    for ens in ensembles:
        m0 = ens.models[0]
        header["ensembles"].append(
            {
                "task": ens.task,
                "class_names": ens.class_names,
                "medians": [float(v) for v in ens.imputer.medians],
                "seeds": [int(s) for s in ens.seeds],
                "config": asdict(m0.config),
                "n_features": m0.n_features,
                "rounds": [len(m.trees) for m in ens.models],
            }
        )
        for m in ens.models:
            for rnd in m.trees:
                for t in rnd:
                    body.append(struct.pack("<I", t.feature.size))
                    for i in range(t.feature.size):
                        body.append(_NODE.pack(int(t.feature[i]), float(t.threshold[i]), float(t.gain[i]), int(t.left[i]), int(t.right[i]), float(t.value[i])))
    js = json.dumps(header, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", VERSION, len(js)) + js + b"".join(body))
    except OSError as exc:
        raise IoError(f"cannot write model {path}: {exc}") from exc


def load_ensembles(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read model {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise TruncationError(f"{path}: header truncated")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 12 + hlen
    if pos > len(raw):
        raise TruncationError(f"{path}: header truncated")
    header = json.loads(raw[12:pos].decode())
    out = []
    for meta in header["ensembles"]:
        cfg = BoostConfig(**meta["config"])
        k = len(meta["class_names"])
        models = []
        for i, n_rounds in enumerate(meta["rounds"]):
            seed = meta["seeds"][i] if i < len(meta["seeds"]) else cfg.seed
            b = Booster(replace(cfg, seed=seed), k, meta["n_features"])
            for _ in range(n_rounds):
                rnd = []
                for _ in range(k):
                    if pos + 4 > len(raw):
                        raise TruncationError(f"{path}: model data truncated")
                    (n_nodes,) = struct.unpack_from("<I", raw, pos)
                    pos += 4
                    end = pos + n_nodes * _NODE.size
                    if end > len(raw):
                        raise TruncationError(f"{path}: model data truncated")
                    recs = np.array(list(_NODE.iter_unpack(raw[pos:end])), dtype=object).reshape(n_nodes, 6)
                    pos = end
                    rnd.append(
                        Tree(
                            recs[:, 0].astype(np.int64), recs[:, 1].astype(np.float64), recs[:, 2].astype(np.float64),
                            recs[:, 3].astype(np.int64), recs[:, 4].astype(np.int64), recs[:, 5].astype(np.float64),
                        )
                    )
                b.trees.append(rnd)
            models.append(b)
        out.append(BoostedEnsemble(models, meta["class_names"], Imputer(np.array(meta["medians"])), meta["task"], meta["seeds"]))
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
