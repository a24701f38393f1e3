"""Tabular binary classifiers: CART tree, gradient-boosted trees, logistic
regression and a linear max-margin classifier, plus feature importance.

Tree models share one histogram split finder. Candidate thresholds are
midpoints between adjacent distinct training values (at most ``max_bins``
bins per feature); rows go left when ``x < threshold`` and missing values
follow a per-split default direction learned from the gain.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .data_model import FeatureVector

MODEL_FORMAT_VERSION = 1

DEFAULTS: dict[str, dict[str, float | int]] = {
    "decision_tree": {"max_depth": 6, "min_samples_leaf": 1, "max_bins": 256},
    "gbt": {
        "n_rounds": 100, "max_depth": 6, "learning_rate": 0.3, "reg_lambda": 1.0,
        "min_child_weight": 1.0, "gamma": 0.0, "max_bins": 256, "base_score": 0.0,
    },
    "logistic_regression": {"l2": 1.0, "tol": 1e-8, "max_iter": 100},
    "max_margin": {"C": 1.0, "max_iter": 1000},
}
KINDS = tuple(DEFAULTS)


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hyperparameters: Mapping[str, float | int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFAULTS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        unknown = sorted(set(self.hyperparameters) - set(DEFAULTS[self.kind]))
        if unknown:
            raise ValueError(f"unknown hyperparameter(s) for {self.kind}: {', '.join(unknown)}")

    @property
    def params(self) -> dict:
        return {**DEFAULTS[self.kind], **self.hyperparameters}


# -- design matrices --------------------------------------------------------------

def feature_union(vectors: Sequence[FeatureVector]) -> list[str]:
    """Names present in any vector: registry order first, then the rest sorted."""
    from .features import FEATURE_NAMES

    seen = set()
    for fv in vectors:
        seen.update(fv.features)
    ordered = [n for n in FEATURE_NAMES if n in seen]
    return ordered + sorted(seen - set(ordered))


def design_matrix(vectors: Sequence[FeatureVector], names: Sequence[str]) -> np.ndarray:
    """Rows of named features; absent features become NaN."""
    col = {n: j for j, n in enumerate(names)}
    x = np.full((len(vectors), len(names)), np.nan)
    for i, fv in enumerate(vectors):
        for n, v in fv.features.items():
            j = col.get(n)
            if j is not None:
                x[i, j] = v
    return x


def _as_matrix(X, names):
    if isinstance(X, np.ndarray):
        x = np.asarray(X, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("X must be 2-D")
        if names is None:
            names = [f"f{j}" for j in range(x.shape[1])]
        if len(names) != x.shape[1]:
            raise ValueError("names do not match X columns")
        return x, list(names)
    X = list(X)
    names = feature_union(X) if names is None else list(names)
    return design_matrix(X, names), names


# -- tree building ----------------------------------------------------------------

def _bin_edges(col: np.ndarray, max_bins: int) -> np.ndarray:
    v = np.unique(col[~np.isnan(col)])
    if len(v) < 2:
        return np.empty(0)
    if len(v) > max_bins:
        # keep max_bins - 1 gaps between adjacent distinct values, spread by rank
        pos = np.unique(np.linspace(0, len(v) - 2, max_bins - 1).round().astype(int))
        lo, hi = v[pos], v[pos + 1]
    else:
        lo, hi = v[:-1], v[1:]
    mid = lo + (hi - lo) / 2.0
    ok = (lo < mid) & (mid < hi)
    return mid[ok]


class _Binned:
    def __init__(self, x: np.ndarray, max_bins: int):
        self.max_bins = max_bins
        self.edges = [_bin_edges(x[:, j], max_bins) for j in range(x.shape[1])]
        self.n_edges = np.array([len(e) for e in self.edges])
        self.width = max_bins + 1            # last slot holds missing values
        codes = np.empty(x.shape, dtype=np.int32)
        for j, e in enumerate(self.edges):
            c = np.searchsorted(e, x[:, j], side="right")
            c[np.isnan(x[:, j])] = max_bins
            codes[:, j] = c
        self.codes = codes
        self.offsets = np.arange(x.shape[1]) * self.width
        self.valid_split = np.arange(max_bins)[None, :] < self.n_edges[:, None]

    def hist(self, idx: np.ndarray, a: np.ndarray, b: np.ndarray,
             cols: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        codes = self.codes[idx] if cols is None else self.codes[np.ix_(idx, cols)]
        p = codes.shape[1]
        flat = (codes + self.offsets[:p]).ravel()
        size = p * self.width
        ha = np.bincount(flat, weights=np.repeat(a[idx], p), minlength=size).reshape(p, self.width)
        hb = np.bincount(flat, weights=np.repeat(b[idx], p), minlength=size).reshape(p, self.width)
        return ha, hb


class _Tree:
    """Flat array tree; leaves have feature == -1."""

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.missing_left: list[bool] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.gain: list[float] = []

    def add(self) -> int:
        for lst, v in ((self.feature, -1), (self.threshold, 0.0), (self.missing_left, False),
                       (self.left, -1), (self.right, -1), (self.value, 0.0), (self.gain, 0.0)):
            lst.append(v)
        return len(self.feature) - 1

    def to_dict(self) -> dict:
        return {
            "feature": self.feature, "threshold": self.threshold, "missing_left": self.missing_left,
            "left": self.left, "right": self.right, "value": self.value, "gain": self.gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "_Tree":
        t = cls()
        for k in ("feature", "threshold", "missing_left", "left", "right", "value", "gain"):
            setattr(t, k, list(d[k]))
        return t

    def predict(self, x: np.ndarray) -> np.ndarray:
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        mleft = np.asarray(self.missing_left)
        left, right = np.asarray(self.left), np.asarray(self.right)
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        active = feat[node] >= 0
        while active.any():
            r, nd = rows[active], node[active]
            v = x[r, feat[nd]]
            go_left = np.where(np.isnan(v), mleft[nd], v < thr[nd])
            node[r] = np.where(go_left, left[nd], right[nd])
            active = feat[node] >= 0
        return np.asarray(self.value)[node]


def _split_scores(kind: str, gl, hl, gr, hr, gt, ht, par):
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind == "gbt":
            lam = par["reg_lambda"]
            gain = 0.5 * (gl ** 2 / (hl + lam) + gr ** 2 / (hr + lam) - gt ** 2 / (ht + lam)) - par["gamma"]
            ok = (hl >= par["min_child_weight"]) & (hr >= par["min_child_weight"])
        else:
            # a = weighted positives, b = weights; gini mass = 2 a (b - a) / b
            def gini(a, b):
                return np.where(b > 0, 2.0 * a * (b - a) / np.where(b > 0, b, 1.0), 0.0)
            gain = gini(gt, ht) - gini(gl, hl) - gini(gr, hr)
            leaf = par.get("min_samples_leaf", 1)
            ok = (hl >= leaf) & (hr >= leaf)
    return np.where(ok & np.isfinite(gain), gain, -np.inf)


def _grow_tree(kind: str, binned: _Binned, a: np.ndarray, b: np.ndarray, idx: np.ndarray, par: dict,
               rng: np.random.Generator | None = None, max_features: int | None = None,
               leaf_out: list | None = None) -> _Tree:
    tree = _Tree()
    mb = binned.max_bins
    n_feat = binned.codes.shape[1]

    def leaf_value(at, bt):
        if kind == "gbt":
            return float(-par["learning_rate"] * at / (bt + par["reg_lambda"]))
        return float(at / bt) if bt > 0 else 0.0

    def grow(node_idx, ha, hb, depth):
        nid = tree.add()
        at, bt = float(a[node_idx].sum()), float(b[node_idx].sum())
        split = None
        pure = kind != "gbt" and (at <= 0 or at >= bt)
        if depth < par["max_depth"] and len(node_idx) >= 2 and not pure:
            split = _best_split(ha, hb, at, bt, node_idx)
        if split is None:
            tree.value[nid] = leaf_value(at, bt)
            if leaf_out is not None:
                leaf_out.append((node_idx, tree.value[nid]))
            return nid
        f, j, miss_left, gain = split
        codes = binned.codes[node_idx, f]
        go_left = (codes <= j) | ((codes == mb) & miss_left)
        li, ri = node_idx[go_left], node_idx[~go_left]
        if max_features is not None:
            la = lb = ra = rb = None                # histograms are drawn per node
        elif len(li) <= len(ri):
            la, lb = binned.hist(li, a, b)
            ra, rb = ha - la, hb - lb
        else:
            ra, rb = binned.hist(ri, a, b)
            la, lb = ha - ra, hb - rb
        tree.feature[nid] = int(f)
        tree.threshold[nid] = float(binned.edges[f][j])
        tree.missing_left[nid] = bool(miss_left)
        tree.gain[nid] = float(gain)
        tree.left[nid] = grow(li, la, lb, depth + 1)
        tree.right[nid] = grow(ri, ra, rb, depth + 1)
        return nid

    def _best_split(ha, hb, at, bt, node_idx):
        cols = None
        if max_features is not None:
            cols = np.sort(rng.choice(n_feat, min(max_features, n_feat), replace=False))
            ha, hb = binned.hist(node_idx, a, b, cols)
        ca = np.cumsum(ha[:, :mb], axis=1)
        cb = np.cumsum(hb[:, :mb], axis=1)
        ma, mbk = ha[:, mb:mb + 1], hb[:, mb:mb + 1]
        # missing right, then missing left; ties keep the right option
        g_right = _split_scores(kind, ca, cb, at - ca, bt - cb, at, bt, par)
        g_left = _split_scores(kind, ca + ma, cb + mbk, at - ca - ma, bt - cb - mbk, at, bt, par)
        valid = binned.valid_split if cols is None else binned.valid_split[cols]
        g_right = np.where(valid, g_right, -np.inf)
        g_left = np.where(valid, g_left, -np.inf)
        both = np.stack([g_right, g_left])
        k = int(np.argmax(both))
        best = both.flat[k]
        if not np.isfinite(best) or best <= 1e-12:
            return None
        side, rem = divmod(k, valid.shape[0] * mb)
        f, j = divmod(rem, mb)
        if cols is not None:
            f = int(cols[f])
        return f, j, side == 1, float(best)

    ha = hb = None
    if max_features is None:
        ha, hb = binned.hist(idx, a, b)
    grow(idx, ha, hb, 0)
    return tree


# -- trained model -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainedModel:
    spec: ModelSpec
    feature_names: tuple[str, ...]
    params: Mapping
    seed: int
    n_rows: int

    def _x(self, X) -> np.ndarray:
        if isinstance(X, np.ndarray):
            x = np.asarray(X, dtype=np.float64)
            if x.shape[1] != len(self.feature_names):
                raise ValueError("X has the wrong number of columns")
            return x
        return design_matrix(list(X), self.feature_names)

    def raw_score(self, X) -> np.ndarray:
        x = self._x(X)
        kind = self.spec.kind
        if kind == "gbt":
            s = np.full(len(x), float(self.params["base_score"]))
            for t in self.params["trees"]:
                s += t.predict(x)
            return s
        if kind == "decision_tree":
            p = self.params["trees"][0].predict(x)
            with np.errstate(divide="ignore"):
                return np.log(p) - np.log1p(-p)
        z = _standardize(x, self.params["center"], self.params["scale"])
        s = z @ np.asarray(self.params["coef"]) + self.params["intercept"]
        if kind == "max_margin":
            s = self.params["platt_a"] * s + self.params["platt_b"]
        return s

    def predict_proba(self, X) -> np.ndarray:
        if self.spec.kind == "decision_tree":
            return self.params["trees"][0].predict(self._x(X))
        return expit(self.raw_score(X))

    def margin(self, X) -> np.ndarray:
        """Signed distance-like score of the linear max-margin model (before Platt scaling)."""
        if self.spec.kind != "max_margin":
            raise ValueError("margin is defined for max_margin models only")
        z = _standardize(self._x(X), self.params["center"], self.params["scale"])
        return z @ np.asarray(self.params["coef"]) + self.params["intercept"]

    def to_dict(self) -> dict:
        par = {}
        for k, v in self.params.items():
            if k == "trees":
                par[k] = [t.to_dict() for t in v]
            elif isinstance(v, np.ndarray):
                par[k] = v.tolist()
            else:
                par[k] = v
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.spec.kind,
            "hyperparameters": dict(self.spec.hyperparameters),
            "feature_names": list(self.feature_names),
            "params": par,
            "seed": self.seed,
            "n_rows": self.n_rows,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')}")
        par = dict(d["params"])
        if "trees" in par:
            par["trees"] = [_Tree.from_dict(t) for t in par["trees"]]
        for k in ("center", "scale", "coef"):
            if k in par:
                par[k] = np.asarray(par[k], dtype=np.float64)
        return cls(ModelSpec(d["kind"], d["hyperparameters"]), tuple(d["feature_names"]), par,
                   int(d["seed"]), int(d["n_rows"]))

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrainedModel":
        return cls.from_dict(json.loads(data))


# -- training ------------------------------------------------------------------------

def _check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.dtype == bool:
        y = y.astype(np.int64)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    if len(np.unique(y)) < 2:
        raise ValueError("single-class labels")
    return y.astype(np.float64)


def _fit_scaler(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    present = ~np.isnan(x)
    cnt = present.sum(axis=0)
    safe = np.where(present, x, 0.0)
    center = np.where(cnt > 0, safe.sum(axis=0) / np.maximum(cnt, 1), 0.0)
    dev = np.where(present, x - center, 0.0)
    sd = np.sqrt((dev ** 2).sum(axis=0) / np.maximum(cnt, 1))
    scale = np.where(sd > 0, sd, 1.0)
    return center, scale


def _standardize(x, center, scale) -> np.ndarray:
    z = (x - center) / scale
    return np.where(np.isnan(z), 0.0, z)        # mean imputation


def _fit_logistic(z: np.ndarray, y: np.ndarray, l2: float, tol: float, max_iter: int):
    n, p = z.shape
    a = np.column_stack([np.ones(n), z])
    beta = np.zeros(p + 1)
    pen = np.full(p + 1, l2)
    pen[0] = 0.0
    for _ in range(int(max_iter)):
        mu = expit(a @ beta)
        w = mu * (1 - mu)
        grad = a.T @ (y - mu) - pen * beta
        hess = (a * w[:, None]).T @ a + np.diag(pen) + 1e-12 * np.eye(p + 1)
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta[1:], float(beta[0])


def _fit_hinge(z: np.ndarray, y: np.ndarray, c: float, max_iter: int):
    """Subgradient descent on 0.5|w|^2 + C * sum hinge, keeping the best iterate."""
    n, p = z.shape
    s = 2 * y - 1
    a = np.column_stack([z, np.ones(n)])
    lam = 1.0 / (c * n)
    theta = np.zeros(p + 1)

    def objective(th):
        return 0.5 * lam * th[:-1] @ th[:-1] + np.mean(np.maximum(0.0, 1 - s * (a @ th)))

    best, best_obj = theta.copy(), objective(theta)
    for t in range(1, int(max_iter) + 1):
        m = s * (a @ theta)
        act = m < 1
        g = -(a[act] * s[act, None]).sum(axis=0) / n
        g[:-1] += lam * theta[:-1]
        theta = theta - g / np.sqrt(t)
        obj = objective(theta)
        if obj < best_obj:
            best, best_obj = theta.copy(), obj
    return best[:-1], float(best[-1])


def _fit_platt(f: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Sigmoid calibration p = sigmoid(a f + b) with smoothed targets."""
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    t = np.where(y == 1, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))
    x = np.column_stack([f, np.ones_like(f)])
    th = np.array([1.0, 0.0])
    for _ in range(100):
        mu = expit(x @ th)
        w = mu * (1 - mu)
        grad = x.T @ (t - mu)
        hess = (x * w[:, None]).T @ x + 1e-10 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        th = th + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return float(th[0]), float(th[1])


def train(spec: ModelSpec, X, y, seed: int = 0, names: Sequence[str] | None = None) -> TrainedModel:
    """Fit a model. X is a list of FeatureVectors or a 2-D array (with `names`)."""
    x, names = _as_matrix(X, names)
    y = _check_labels(y)
    if len(x) != len(y):
        raise ValueError("X and y differ in length")
    if len(x) < 10:
        raise ValueError("need at least 10 rows")
    if x.shape[1] == 0:
        raise ValueError("empty feature set")
    par = spec.params
    kind = spec.kind
    learned: dict = {}
    if kind == "gbt":
        binned = _Binned(x, int(par["max_bins"]))
        f = np.full(len(y), float(par["base_score"]))
        idx = np.arange(len(y))
        trees = []
        for _ in range(int(par["n_rounds"])):
            p = expit(f)
            leaves: list = []
            trees.append(_grow_tree("gbt", binned, p - y, p * (1 - p), idx, par, leaf_out=leaves))
            for rows, v in leaves:
                f[rows] += v
        learned = {"trees": trees, "base_score": float(par["base_score"])}
    elif kind == "decision_tree":
        binned = _Binned(x, int(par["max_bins"]))
        tree = _grow_tree("cart", binned, y, np.ones_like(y), np.arange(len(y)), par)
        learned = {"trees": [tree]}
    else:
        center, scale = _fit_scaler(x)
        z = _standardize(x, center, scale)
        if kind == "logistic_regression":
            coef, b = _fit_logistic(z, y, par["l2"], par["tol"], par["max_iter"])
            learned = {"center": center, "scale": scale, "coef": coef, "intercept": b}
        else:
            coef, b = _fit_hinge(z, y, par["C"], par["max_iter"])
            pa, pb = _fit_platt(z @ coef + b, y)
            learned = {"center": center, "scale": scale, "coef": coef, "intercept": b,
                       "platt_a": pa, "platt_b": pb}
    return TrainedModel(spec, tuple(names), learned, int(seed), len(y))


def predict(model: TrainedModel, X) -> list[tuple[int, float]]:
    """(label, probability of class 1); label is 1 when probability >= 0.5."""
    p = model.predict_proba(X)
    return [(int(v >= 0.5), float(v)) for v in p]


# -- importance ----------------------------------------------------------------------

def _tree_gains(trees: Sequence[_Tree], n_features: int) -> np.ndarray:
    out = np.zeros(n_features)
    for t in trees:
        for f, g in zip(t.feature, t.gain):
            if f >= 0:
                out[f] += g
    return out


def surrogate_forest(x: np.ndarray, y: np.ndarray, seed: int = 0, n_trees: int = 50,
                     max_depth: int = 12, max_bins: int = 256) -> list[_Tree]:
    """Bagged CART trees (bootstrap rows, every feature considered at each split)."""
    rng = np.random.default_rng(seed)
    binned = _Binned(x, max_bins)
    n = len(x)
    par = {"max_depth": max_depth, "min_samples_leaf": 1}
    trees = []
    for _ in range(n_trees):
        w = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
        idx = np.flatnonzero(w > 0)
        trees.append(_grow_tree("cart", binned, y * w, w, idx, par, rng=rng))
    return trees


def feature_importance(model: TrainedModel, X=None, y=None, seed: int | None = None) -> list[tuple[str, float]]:
    """Split-gain importance, normalised to sum to 1, in descending order.

    Non-tree models use a surrogate forest fitted on (X, y).
    """
    names = model.feature_names
    if model.spec.kind in ("gbt", "decision_tree"):
        gains = _tree_gains(model.params["trees"], len(names))
    else:
        if X is None or y is None:
            raise ValueError("non-tree importance needs the training data (X, y)")
        x = model._x(X)
        yy = _check_labels(y)
        trees = surrogate_forest(x, yy, model.seed if seed is None else seed)
        gains = _tree_gains(trees, len(names))
    gains = np.maximum(gains, 0.0)
    total = gains.sum()
    scores = gains / total if total > 0 else gains
    order = sorted(range(len(names)), key=lambda j: (-scores[j], names[j]))
    return [(names[j], float(scores[j])) for j in order]
