"""Questionnaire statistics that turn ratings into window labels.

Reliability (Cronbach's alpha), single-factor extraction of the engagement
construct from calm / at-ease / inverted-nervous ratings, mean-split
binarisation, discomfort binning, and the two-way ANOVA / ANCOVA used to check
that the excerpt manipulation worked.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special

from .data_model import (
    DiscomfortClass,
    EmlClass,
    FeatureVector,
    LabeledWindow,
    QuestionnaireRecord,
    TrialKey,
    Window,
)

EML_ITEMS = ("feel_calm", "inv_nervous", "feel_at_ease")


def cronbach_alpha(items) -> float:
    x = np.asarray(items, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("need an n_obs x k_items matrix with k >= 2")
    var_i = x.var(axis=0)
    if np.any(var_i == 0):
        raise ValueError("zero-variance item")
    k = x.shape[1]
    return float(k / (k - 1) * (1.0 - var_i.sum() / x.sum(axis=1).var()))


@dataclass(frozen=True)
class FactorResult:
    eigenvalues: np.ndarray
    retained: int
    loadings: np.ndarray
    communalities: np.ndarray
    scores: np.ndarray
    method: str = "pca"

    @property
    def explained(self) -> np.ndarray:
        """Percent of total variance per initial eigenvalue."""
        return 100.0 * self.eigenvalues / self.eigenvalues.sum()

    @property
    def extraction_ss(self) -> np.ndarray:
        """Sums of squared loadings of the retained factors."""
        return (self.loadings ** 2).sum(axis=0)

    def variance_table(self) -> str:
        lines = ["factor  eigenvalue  % variance  cumulative %  extraction SS  % variance"]
        cum = np.cumsum(self.explained)
        k = len(self.eigenvalues)
        for i, (e, p, c) in enumerate(zip(self.eigenvalues, self.explained, cum)):
            tail = ""
            if i < self.retained:
                ss = self.extraction_ss[i]
                tail = f"  {ss:13.3f}  {100 * ss / k:10.3f}"
            lines.append(f"{i + 1:6d}  {e:10.3f}  {p:10.3f}  {c:12.3f}{tail}")
        return "\n".join(lines)


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    if np.any(sd == 0):
        raise ValueError("zero-variance item")
    return (x - x.mean(axis=0)) / sd


def _principal_axis(r: np.ndarray, n_factors: int, tol: float = 1e-8, max_iter: int = 500) -> np.ndarray:
    """Iterated principal-axis loadings starting from squared multiple correlations."""
    try:
        h = 1.0 - 1.0 / np.diag(np.linalg.inv(r))
    except np.linalg.LinAlgError:
        h = np.abs(r - np.eye(len(r))).max(axis=0)
    for _ in range(max_iter):
        reduced = r.copy()
        np.fill_diagonal(reduced, h)
        w, v = np.linalg.eigh(reduced)
        order = np.argsort(w)[::-1][:n_factors]
        lam = v[:, order] * np.sqrt(np.clip(w[order], 0, None))
        h_new = np.clip((lam ** 2).sum(axis=1), 0.0, 1.0)
        if np.max(np.abs(h_new - h)) < tol:
            h = h_new
            break
        h = h_new
    return lam


def extract_factor(items, method: str = "pca") -> FactorResult:
    """Eigen-decomposition of the item correlation matrix.

    Factors with eigenvalue > 1 are retained. With ``method="pca"`` loadings
    are eigenvector * sqrt(eigenvalue); ``method="paf"`` refines them by
    iterated principal-axis factoring. Scores are the standardized items
    projected on the first factor and rescaled to unit variance.
    """
    x = np.asarray(items, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("need an n_obs x k_items matrix with k >= 2")
    z = _standardize(x)
    r = (z.T @ z) / len(z)
    w, v = np.linalg.eigh(r)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    retained = int(np.sum(w > 1.0 + 1e-9))
    if retained == 0:
        raise ValueError("no factor retained")
    v = v * np.where(v.sum(axis=0) < 0, -1.0, 1.0)
    if method == "pca":
        loadings = v[:, :retained] * np.sqrt(w[:retained])
        weights = v[:, 0]
    elif method == "paf":
        loadings = _principal_axis(r, retained)
        loadings = loadings * np.where(loadings.sum(axis=0) < 0, -1.0, 1.0)
        weights = np.linalg.lstsq(r, loadings[:, 0], rcond=None)[0]
    else:
        raise ValueError(f"unknown method {method!r}")
    raw = z @ weights
    scores = (raw - raw.mean()) / raw.std()
    comm = (loadings ** 2).sum(axis=1)
    return FactorResult(w, retained, loadings, comm, scores, method)


def eml_items(qnr: Sequence[QuestionnaireRecord]) -> np.ndarray:
    """Columns feel_calm, inv_nervous (11 - feel_nervous), feel_at_ease."""
    return np.array([[r.feel_calm, 11 - r.feel_nervous, r.feel_at_ease] for r in qnr], dtype=np.float64)


def eml_scores(qnr: Sequence[QuestionnaireRecord], method: str = "pca") -> list[float]:
    qnr = list(qnr)
    if not qnr:
        raise ValueError("no questionnaire records")
    return [float(s) for s in extract_factor(eml_items(qnr), method).scores]


def with_eml_scores(qnr: Sequence[QuestionnaireRecord], method: str = "pca") -> list[QuestionnaireRecord]:
    return [replace(r, eml_score=s) for r, s in zip(qnr, eml_scores(qnr, method))]


def binarize_eml(scores, groups: Sequence | None = None) -> list[EmlClass]:
    """High when strictly above the mean (of the whole set, or of each group)."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) < 2:
        raise ValueError("need at least two scores")
    if groups is None:
        means = np.full(len(s), s.mean())
    else:
        g = np.asarray(groups)
        means = np.empty(len(s))
        for level in np.unique(g):
            sel = g == level
            means[sel] = s[sel].mean()
    return [EmlClass.high if v > m else EmlClass.low for v, m in zip(s, means)]


def bin_discomfort(rating: int) -> DiscomfortClass:
    if not 1 <= rating <= 10:
        raise ValueError(f"discomfort rating {rating} outside 1..10")
    return DiscomfortClass.normal if rating <= 8 else DiscomfortClass.high


def trial_labels(qnr: Sequence[QuestionnaireRecord], per_user: bool = False,
                 method: str = "pca") -> dict[TrialKey, tuple[EmlClass, DiscomfortClass]]:
    scored = with_eml_scores(qnr, method)
    groups = [r.key.user_id for r in scored] if per_user else None
    classes = binarize_eml([r.eml_score for r in scored], groups)
    return {r.key: (c, bin_discomfort(r.feel_uncomfortable)) for r, c in zip(scored, classes)}


def interpolate_labels(labels: Mapping[TrialKey, tuple[EmlClass, DiscomfortClass]],
                       windows: Iterable[FeatureVector | Window],
                       folds: Mapping[TrialKey, int] | None = None) -> list[LabeledWindow]:
    """Give every window the labels (and fold) of its trial."""
    out = []
    for w in windows:
        fv = w if isinstance(w, FeatureVector) else FeatureVector(w, {}, {})
        key = fv.window.key
        if key not in labels:
            raise KeyError(f"unlabeled trial {key}")
        eml, disc = labels[key]
        fold = 0 if folds is None else folds[key]
        out.append(LabeledWindow(fv, eml, disc, fold))
    return out


# -- ANOVA / ANCOVA --------------------------------------------------------------

@dataclass(frozen=True)
class AnovaRow:
    source: str
    type3_ss: float
    df: int
    mean_square: float | None
    f: float | None
    p: float | None


@dataclass(frozen=True)
class AnovaTable:
    rows: tuple[AnovaRow, ...]
    r_squared: float
    eta_squared: Mapping[str, float]
    effects: tuple[str, ...]

    def row(self, source: str) -> AnovaRow:
        for r in self.rows:
            if r.source == source:
                return r
        raise KeyError(source)

    def format(self) -> str:
        out = [f"{'Source':<28}{'Type III SS':>14}{'df':>6}{'Mean Square':>14}{'F':>10}{'Sig.':>9}{'eta^2':>8}"]
        for r in self.rows:
            ms = f"{r.mean_square:14.3f}" if r.mean_square is not None else " " * 14
            f = f"{r.f:10.3f}" if r.f is not None else " " * 10
            p = f"{r.p:9.3f}" if r.p is not None else " " * 9
            eta = f"{self.eta_squared[r.source]:8.3f}" if r.source in self.eta_squared else ""
            out.append(f"{r.source:<28}{r.type3_ss:14.3f}{r.df:6d}{ms}{f}{p}{eta}")
        out.append(f"R^2 = {self.r_squared:.3f} (eta^2 is SS/corrected-total SS)")
        return "\n".join(out)

    def to_dict(self) -> dict:
        return {
            "rows": [r.__dict__ for r in self.rows],
            "r_squared": self.r_squared,
            "eta_squared": dict(self.eta_squared),
        }


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail of the F distribution via the regularized incomplete beta."""
    if f <= 0:
        return 1.0
    if not np.isfinite(f):
        return 0.0
    return float(special.betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)))


def effect_code(levels: Sequence) -> tuple[np.ndarray, list]:
    """Sum-to-zero coding; the last sorted level is the reference (-1)."""
    arr = np.asarray(levels)
    uniq = sorted(set(arr.tolist()))
    if len(uniq) < 2:
        raise ValueError("factor needs at least two levels")
    cols = np.zeros((len(arr), len(uniq) - 1))
    for j, lev in enumerate(uniq[:-1]):
        cols[arr == lev, j] = 1.0
    cols[arr == uniq[-1], :] = -1.0
    return cols, uniq


def _independent_columns(x: np.ndarray, tol: float = 1e-9) -> list[int]:
    """Greedy left-to-right selection of linearly independent columns."""
    basis = np.zeros((x.shape[0], 0))
    keep = []
    for j in range(x.shape[1]):
        c = x[:, j]
        norm = np.linalg.norm(c)
        if norm == 0:
            continue
        r = c - basis @ (basis.T @ c)
        r = r - basis @ (basis.T @ r)
        rn = np.linalg.norm(r)
        if rn > tol * norm:
            basis = np.column_stack([basis, r / rn])
            keep.append(j)
    return keep


def _sse(x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[1] == 0:
        return float(y @ y)
    beta, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    return float(resid @ resid)


def _type3(y, terms: list[tuple[str, np.ndarray]], errors: Mapping[str, str]) -> AnovaTable:
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    blocks = [("Intercept", np.ones((n, 1)))] + terms
    x = np.column_stack([b for _, b in blocks])
    owner = np.concatenate([[i] * b.shape[1] for i, (_, b) in enumerate(blocks)])
    keep = _independent_columns(x)
    xk, ok = x[:, keep], owner[keep]
    rank = len(keep)
    df_err = n - rank
    if df_err <= 0:
        raise ValueError("no residual degrees of freedom")
    sse = _sse(xk, y)
    sst = float(np.sum((y - y.mean()) ** 2))
    scale = float(y @ y) + 1.0
    tiny = 1e-10 * scale
    if sse < tiny:
        sse = 0.0
    mse = sse / df_err

    def ftest(ss, df):
        if mse == 0:
            return (0.0, 1.0) if ss == 0 else (float("inf"), 0.0)
        f = (ss / df) / mse
        return f, f_sf(f, df, df_err)

    rows = []
    model_ss = max(sst - sse, 0.0)
    if model_ss < tiny:
        model_ss = 0.0
    df_model = rank - 1
    if df_model > 0:
        f, p = ftest(model_ss, df_model)
        rows.append(AnovaRow("Corrected Model", model_ss, df_model, model_ss / df_model, f, p))
    for i, (name, _) in enumerate(blocks):
        cols = np.flatnonzero(ok == i)
        df = len(cols)
        if df == 0:
            raise ValueError(errors.get(name, "inestimable effect") + f": {name}")
        ss = max(_sse(xk[:, ok != i], y) - sse, 0.0)
        if ss < tiny:
            ss = 0.0
        f, p = ftest(ss, df)
        rows.append(AnovaRow(name, ss, df, ss / df, f, p))
    rows.append(AnovaRow("Error", sse, df_err, mse, None, None))
    rows.append(AnovaRow("Total", float(y @ y), n, None, None, None))
    rows.append(AnovaRow("Corrected Total", sst, n - 1, None, None, None))
    eta = {r.source: (r.type3_ss / sst if sst > 0 else 0.0)
           for r in rows if r.source not in ("Intercept", "Total", "Corrected Total", "Corrected Model")}
    r2 = model_ss / sst if sst > 0 else 0.0
    return AnovaTable(tuple(rows), r2, eta, tuple(name for name, _ in terms))


def _factor_terms(factor_a, factor_b, a_name, b_name):
    ca, _ = effect_code(factor_a)
    cb, _ = effect_code(factor_b)
    inter = np.column_stack([ca[:, i] * cb[:, j] for i in range(ca.shape[1]) for j in range(cb.shape[1])])
    return [(a_name, ca), (b_name, cb), (f"{a_name} * {b_name}", inter)]


def two_way_anova(y, factor_a, factor_b, a_name: str = "A", b_name: str = "B") -> AnovaTable:
    """Two-way ANOVA with interaction; Type III SS by full-vs-reduced fits on effect coding.

    Empty cells are allowed and reduce the interaction df; a main effect with
    no estimable column raises "inestimable effect".
    """
    y = np.asarray(y, dtype=np.float64)
    if not (len(y) == len(factor_a) == len(factor_b)):
        raise ValueError("y and factors differ in length")
    return _type3(y, _factor_terms(factor_a, factor_b, a_name, b_name), {})


def ancova(y, factor_a, factor_b, covariate, a_name: str = "A", b_name: str = "B",
           covariate_name: str = "covariate") -> AnovaTable:
    """Two-way ANCOVA: covariate as a linear term ahead of both factors and their interaction."""
    y = np.asarray(y, dtype=np.float64)
    cov = np.asarray(covariate, dtype=np.float64)
    if not (len(y) == len(factor_a) == len(factor_b) == len(cov)):
        raise ValueError("inputs differ in length")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariate must be finite")
    factors = _factor_terms(factor_a, factor_b, a_name, b_name)
    design = np.column_stack([np.ones(len(y))] + [c for _, c in factors] + [cov])
    if len(_independent_columns(design)) == len(_independent_columns(design[:, :-1])):
        raise ValueError(f"covariate collinear with design: {covariate_name}")
    return _type3(y, [(covariate_name, cov[:, None])] + factors, {})


@dataclass(frozen=True)
class SimpleEffect:
    at_level: object
    f: float
    df: int
    df_error: int
    p: float
    p_bonferroni: float


def simple_effects(y, factor_a, factor_b) -> list[SimpleEffect]:
    """F test of factor A within each level of B, against the full model's error term."""
    y = np.asarray(y, dtype=np.float64)
    a, b = np.asarray(factor_a), np.asarray(factor_b)
    full = two_way_anova(y, a, b)
    err = full.row("Error")
    levels = sorted(set(b.tolist()))
    out = []
    for lev in levels:
        sel = b == lev
        ys, as_ = y[sel], a[sel]
        groups = sorted(set(as_.tolist()))
        if len(groups) < 2:
            continue
        m = ys.mean()
        ss = sum(len(ys[as_ == g]) * (ys[as_ == g].mean() - m) ** 2 for g in groups)
        df = len(groups) - 1
        f = (ss / df) / err.mean_square if err.mean_square > 0 else (0.0 if ss == 0 else float("inf"))
        p = f_sf(f, df, err.df)
        out.append(SimpleEffect(lev, f, df, err.df, p, 1.0))
    m = len(out)
    return [replace(s, p_bonferroni=min(1.0, s.p * m)) for s in out]
