"""Part-level defect severity regression.

Features per part: laser power p, speed s, focus f, linear energy density p/s,
hatch spacing h, and three photodiode aggregates (part mean, part standard
deviation, spread of layer means).  Each defect kind gets its own linear model
chosen by forward-backward stepwise OLS with partial-F p-values and a VIF gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import (
    ConstantActual,
    DataError,
    LengthMismatch,
    RankDeficient,
    TooFewLayers,
    TooFewSamples,
)
from .sensor_data import StrikeSegmentedStream
from .textformat import LineReader, fmt, fmt_list, quote

FEATURE_NAMES = ("p", "s", "f", "eds", "h", "mu_part", "sigma_part", "sigma_mu_layer")
DEFECT_KINDS = ("pore", "lack_of_fusion", "crack")
REGRESSOR_FILE_MAGIC = "meltmon-regressors"
REGRESSOR_FILE_VERSION = 1
# R^2_j at or above this counts as perfect collinearity
COLLINEAR_R2 = 1.0 - 1e-12


@dataclass(frozen=True)
class PartFeatures:
    p: float
    s: float
    f: float
    eds: float
    h: float
    mu_part: float
    sigma_part: float
    sigma_mu_layer: float
    part_id: int | None = None

    def __post_init__(self) -> None:
        if not (self.p > 0 and self.s > 0 and self.h > 0):
            raise DataError("power, speed and hatch spacing must be positive")
        if abs(self.eds - self.p / self.s) > 1e-12 * max(1.0, abs(self.eds)):
            raise DataError("eds must equal p / s")
        if self.sigma_part < 0 or self.sigma_mu_layer < 0:
            raise DataError("standard deviations must be non-negative")

    @classmethod
    def from_laser(cls, p, s, f, h, mu_part, sigma_part, sigma_mu_layer, part_id=None) -> "PartFeatures":
        return cls(p, s, f, p / s, h, mu_part, sigma_part, sigma_mu_layer, part_id)

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class DefectRecord:
    part_id: int
    kind: str
    score: float

    def __post_init__(self) -> None:
        if self.kind not in DEFECT_KINDS:
            raise DataError(f"unknown defect kind {self.kind!r}")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"defect score {self.score} outside [0, 1]")


def extract_part_features(
    part: StrikeSegmentedStream,
    p: float,
    s: float,
    f: float,
    h: float,
    channel: int = 0,
) -> PartFeatures:
    """Aggregate one part's samples (all layers) into the photodiode features."""
    layers = np.unique(part.layer)
    if layers.size < 2:
        raise TooFewLayers(f"part spans {layers.size} layer(s), need 2")
    values = part.intensity[:, channel]
    layer_means = []
    for layer in layers:
        v = values[part.layer == layer]
        if v.size < 2:
            raise TooFewSamples(f"layer {int(layer)} has {v.size} sample(s), need 2")
        layer_means.append(v.mean())
    pid = np.unique(part.part_id)
    return PartFeatures.from_laser(
        p, s, f, h,
        mu_part=float(values.mean()),
        sigma_part=float(values.std(ddof=1)),
        sigma_mu_layer=float(np.std(layer_means, ddof=1)),
        part_id=int(pid[0]) if pid.size == 1 and pid[0] >= 0 else None,
    )


# --- least squares helpers ----------------------------------------------------

def _with_intercept(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def _lstsq(A: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, int]:
    # column scaling keeps raw-unit features (W, mm/s, J/mm) well conditioned
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    beta, _, rank, _ = np.linalg.lstsq(A / scale, y, rcond=None)
    return beta / scale, int(rank)


def _ssr(X: np.ndarray, y: np.ndarray) -> float:
    A = _with_intercept(X)
    beta, _ = _lstsq(A, y)
    r = y - A @ beta
    return float(r @ r)


def vif(X, j: int) -> float:
    """Variance inflation factor of column j: 1 / (1 - R^2_j), regressing j on the rest plus intercept.

    Returns ``math.inf`` when R^2_j >= 1 - 1e-12.
    """
    X = np.asarray(X, dtype=np.float64)
    n, q = X.shape
    if q < 2:
        raise DataError("VIF needs at least two columns")
    if n <= q:
        raise DataError("VIF needs more rows than columns")
    target = X[:, j]
    centered = target - target.mean()
    sst = float(centered @ centered)
    if sst == 0.0:
        return math.inf
    r2 = 1.0 - _ssr(np.delete(X, j, axis=1), target) / sst
    if r2 >= COLLINEAR_R2:
        return math.inf
    return 1.0 / (1.0 - r2)


def _vifs(X: np.ndarray) -> np.ndarray:
    if X.shape[1] < 2:
        return np.ones(X.shape[1])
    return np.array([vif(X, j) for j in range(X.shape[1])])


def r_squared(pred, actual) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    actual = np.asarray(actual, dtype=np.float64).reshape(-1)
    if pred.shape != actual.shape or pred.size == 0:
        raise LengthMismatch("pred and actual need equal non-zero length")
    centered = actual - actual.mean()
    sst = float(centered @ centered)
    if sst == 0.0:
        raise ConstantActual("actual values are constant")
    resid = actual - pred
    return 1.0 - float(resid @ resid) / sst


# --- stepwise selection -------------------------------------------------------

@dataclass(frozen=True)
class StepwiseConfig:
    p_enter: float = 0.05
    p_remove: float = 0.10
    vif_max: float = 10.0
    max_steps: int = 200


@dataclass(frozen=True, eq=False)
class DefectRegressor:
    """Fitted transfer function for one defect kind."""

    kind: str
    features: tuple[str, ...]
    coefficients: np.ndarray
    intercept: float
    r_squared: float
    p_values: np.ndarray
    vifs: np.ndarray
    n_train: int
    no_feature_selected: bool = False
    history: tuple[str, ...] = field(default=())
    candidates: tuple[str, ...] = FEATURE_NAMES

    def raw_predict(self, X: np.ndarray) -> np.ndarray:
        """Unclamped linear prediction from a full candidate-feature matrix."""
        cols = [self.candidates.index(n) for n in self.features]
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        with np.errstate(over="ignore", invalid="ignore"):
            return self.intercept + X[:, cols] @ self.coefficients

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.clip(self.raw_predict(X), 0.0, 1.0)


def _partial_p(ssr_small: float, ssr_big: float, df: int, floor: float) -> float:
    """p-value of the partial F test for one extra column."""
    if df <= 0:
        return 1.0
    denom = max(ssr_big, floor) / df
    F = max(ssr_small - ssr_big, 0.0) / denom
    return float(stats.f.sf(F, 1, df))


def stepwise_ols(
    X,
    y,
    kind: str = "pore",
    config: StepwiseConfig = StepwiseConfig(),
    feature_names: Sequence[str] = FEATURE_NAMES,
) -> DefectRegressor:
    """Forward-backward stepwise OLS over the columns of X.

    Forward: among unselected columns with partial-F p < p_enter whose entry
    keeps every selected VIF <= vif_max, add the smallest p (ties -> earlier
    column).  Backward: drop the selected column with the largest p if it
    exceeds p_remove.  Stops when nothing changes or a selection repeats.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, q = X.shape
    if y.shape[0] != n:
        raise LengthMismatch(f"{n} feature rows vs {y.shape[0]} targets")
    if n < q + 3:
        raise TooFewSamples(f"{n} rows for {q} candidate features, need at least {q + 3}")
    centered = y - y.mean()
    sst = float(centered @ centered)
    if sst == 0.0:
        # constant target: nothing can explain it
        return _final_fit(X, y, [], kind, feature_names, ())
    # residual floor so exact fits do not turn rounding noise into significant F statistics
    floor = 1e-24 * sst

    selected: list[int] = []
    seen = {()}
    history = []
    for _ in range(config.max_steps):
        changed = False
        ssr_cur = _ssr(X[:, selected], y)
        best, best_p = None, config.p_enter
        for c in range(q):
            if c in selected:
                continue
            trial = selected + [c]
            ssr_new = _ssr(X[:, trial], y)
            p = _partial_p(ssr_cur, ssr_new, n - len(trial) - 1, floor)
            if p < best_p and np.all(_vifs(X[:, trial]) <= config.vif_max):
                best, best_p = c, p
        if best is not None:
            selected.append(best)
            history.append(f"+{feature_names[best]}")
            changed = True

        if selected:
            ssr_full = _ssr(X[:, selected], y)
            df = n - len(selected) - 1
            pvals = [_partial_p(_ssr(X[:, [c for c in selected if c != j]], y), ssr_full, df, floor)
                     for j in selected]
            worst = int(np.argmax(pvals))
            if pvals[worst] > config.p_remove:
                history.append(f"-{feature_names[selected[worst]]}")
                del selected[worst]
                changed = True

        key = tuple(sorted(selected))
        if not changed or key in seen:
            break
        seen.add(key)

    selected.sort()
    return _final_fit(X, y, selected, kind, feature_names, tuple(history))


def _final_fit(X, y, selected, kind, feature_names, history) -> DefectRegressor:
    n = X.shape[0]
    A = _with_intercept(X[:, selected])
    beta, rank = _lstsq(A, y)
    if rank < A.shape[1]:
        raise RankDeficient(f"selected design has rank {rank} < {A.shape[1]}")
    resid = y - A @ beta
    ssr = float(resid @ resid)
    centered = y - y.mean()
    sst = float(centered @ centered)
    r2 = 1.0 - ssr / sst if sst > 0 else 0.0
    df = n - A.shape[1]
    if selected and df > 0:
        sigma2 = ssr / df
        cov = sigma2 * np.linalg.inv(A.T @ A)
        se = np.sqrt(np.maximum(np.diag(cov)[1:], 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(se > 0, beta[1:] / se, np.inf)
        pvals = 2.0 * stats.t.sf(np.abs(t), df)
    else:
        pvals = np.zeros(len(selected))
    return DefectRegressor(
        kind=kind,
        features=tuple(feature_names[c] for c in selected),
        coefficients=beta[1:].copy(),
        intercept=float(beta[0]),
        r_squared=float(min(max(r2, 0.0), 1.0)),
        p_values=np.asarray(pvals, dtype=np.float64),
        vifs=_vifs(X[:, selected]),
        n_train=n,
        no_feature_selected=not selected,
        history=history,
        candidates=tuple(feature_names),
    )


def feature_matrix(rows: Sequence[PartFeatures]) -> np.ndarray:
    return np.array([r.vector() for r in rows], dtype=np.float64).reshape(-1, len(FEATURE_NAMES))


def fit_defect_regressors(
    rows: Sequence[PartFeatures],
    records: Sequence[DefectRecord],
    config: StepwiseConfig = StepwiseConfig(),
) -> dict[str, DefectRegressor]:
    """One regressor per defect kind present in ``records`` (rows matched by part id)."""
    by_part = {r.part_id: i for i, r in enumerate(rows)}
    if None in by_part or len(by_part) != len(rows):
        raise DataError("feature rows need unique part ids")
    X = feature_matrix(rows)
    out = {}
    for kind in DEFECT_KINDS:
        recs = [r for r in records if r.kind == kind]
        if not recs:
            continue
        missing = [r.part_id for r in recs if r.part_id not in by_part]
        if missing:
            raise DataError(f"defect scores reference unknown parts {missing[:5]}")
        idx = [by_part[r.part_id] for r in recs]
        out[kind] = stepwise_ols(X[idx], [r.score for r in recs], kind, config)
    return out


def predict_defect(reg: DefectRegressor, feats: PartFeatures) -> float:
    return float(reg.predict(feats.vector()[None, :])[0])


# --- files --------------------------------------------------------------------

FEATURE_CSV_COLUMNS = ("part_id", "p", "s", "f", "h", "mu_part", "sigma_part", "sigma_mu_layer")


def write_features_csv(rows: Sequence[PartFeatures], path: str | Path) -> None:
    lines = [",".join(FEATURE_CSV_COLUMNS)]
    for r in rows:
        lines.append(",".join([str(r.part_id)] + [fmt(getattr(r, c)) for c in FEATURE_CSV_COLUMNS[1:]]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_features_csv(path: str | Path) -> list[PartFeatures]:
    df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    missing = [c for c in FEATURE_CSV_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return [
        PartFeatures.from_laser(row.p, row.s, row.f, row.h, row.mu_part, row.sigma_part,
                                row.sigma_mu_layer, int(row.part_id))
        for row in df.itertuples(index=False)
    ]


def write_scores_csv(records: Sequence[DefectRecord], path: str | Path) -> None:
    lines = ["part_id,kind,score"] + [f"{r.part_id},{r.kind},{fmt(r.score)}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores_csv(path: str | Path) -> list[DefectRecord]:
    df = pd.read_csv(path, dtype={"kind": str}, encoding="utf-8", float_precision="round_trip")
    if list(df.columns) != ["part_id", "kind", "score"]:
        raise DataError(f"{path}: expected header 'part_id,kind,score'")
    return [DefectRecord(int(r.part_id), r.kind, float(r.score)) for r in df.itertuples(index=False)]


def save_regressors(regs: dict[str, DefectRegressor], path: str | Path) -> None:
    lines = [f"{REGRESSOR_FILE_MAGIC} {REGRESSOR_FILE_VERSION}", f"n_regressors {len(regs)}"]
    for reg in regs.values():
        lines += [
            f"regressor {quote(reg.kind)}",
            f"n_train {reg.n_train}",
            f"no_feature_selected {int(reg.no_feature_selected)}",
            f"intercept {fmt(reg.intercept)}",
            f"r_squared {fmt(reg.r_squared)}",
            f"features {len(reg.features)} {' '.join(reg.features)}".rstrip(),
            f"coef {fmt_list(reg.coefficients)}".rstrip(),
            f"p_values {fmt_list(reg.p_values)}".rstrip(),
            f"vif {fmt_list(reg.vifs)}".rstrip(),
            "end",
        ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_regressors(path: str | Path) -> dict[str, DefectRegressor]:
    r = LineReader.open(path)
    r.header(REGRESSOR_FILE_MAGIC, REGRESSOR_FILE_VERSION)
    (count,) = r.ints(r.next_tokens("n_regressors", 1))
    out = {}
    for _ in range(count):
        kind = r.next_string("regressor")
        (n_train,) = r.ints(r.next_tokens("n_train", 1))
        (flag,) = r.ints(r.next_tokens("no_feature_selected", 1))
        (intercept,) = r.floats(r.next_tokens("intercept", 1))
        (r2,) = r.floats(r.next_tokens("r_squared", 1))
        tok = r.next_tokens("features")
        if not tok:
            raise r.fail("features line needs a count")
        (nf,) = r.ints(tok[:1])
        names = tuple(tok[1:])
        if len(names) != nf or any(nm not in FEATURE_NAMES for nm in names):
            raise r.fail("bad feature list")
        coef = r.floats(r.next_tokens("coef", nf))
        pv = r.floats(r.next_tokens("p_values", nf))
        vf = r.floats(r.next_tokens("vif", nf))
        r.next_tokens("end", 0)
        out[kind] = DefectRegressor(kind, names, np.array(coef), intercept, r2, np.array(pv),
                                    np.array(vf), n_train, bool(flag))
    r.expect_eof()
    return out


def write_fit_report(regs: dict[str, DefectRegressor], rows: Sequence[PartFeatures],
                     records: Sequence[DefectRecord], path: str | Path) -> None:
    """Text report: per-kind summary followed by a predicted-vs-actual table."""
    X = feature_matrix(rows)
    by_part = {r.part_id: i for i, r in enumerate(rows)}
    lines = []
    for kind, reg in regs.items():
        lines.append(f"[{kind}] n={reg.n_train} R2={fmt(reg.r_squared)} intercept={fmt(reg.intercept)}"
                     + (" NO_FEATURE_SELECTED" if reg.no_feature_selected else ""))
        for name, c, p, v in zip(reg.features, reg.coefficients, reg.p_values, reg.vifs):
            lines.append(f"  {name} coef={fmt(c)} p={fmt(p)} vif={fmt(v)}")
        if reg.history:
            lines.append(f"  steps: {' '.join(reg.history)}")
    lines.append("")
    lines.append("part_id,kind,actual,predicted")
    for rec in records:
        if rec.kind in regs and rec.part_id in by_part:
            pred = regs[rec.kind].predict(X[by_part[rec.part_id]])[0]
            lines.append(f"{rec.part_id},{rec.kind},{fmt(rec.score)},{fmt(pred)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
