"""Per-sample-index multivariate Gaussian process models.

A model holds one (mean, covariance) pair per laser-on index k = 1..k_T and a
single pooled pair shared by every k > k_T.  Cholesky factors and log
determinants are computed once at construction so classification only does
triangular products.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, DegenerateCovariance, InsufficientSamplesAtIndex
from .sensor_data import DEFAULT_K_T, StrikeSegmentedStream
from .textformat import LineReader, fmt, fmt_list, quote

DEFAULT_N_MIN = 30
DEFAULT_REG_EPS = 1e-6
ABS_COV_FLOOR = 1e-12

MODEL_FILE_MAGIC = "meltmon-modelset"
MODEL_FILE_VERSION = 1
RESERVED_LABELS = frozenset({"unknown", "NO_DATA"})


class ModelParams(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray
    log_det: float
    whitener: np.ndarray  # inverse Cholesky factor: |W (x - mean)|^2 is the Mahalanobis term


@dataclass(frozen=True, eq=False)
class ProcessModel:
    """Gaussian melt-pool response model for one process condition.

    ``counts`` has k_T + 1 entries; the last is the pooled steady-state count.
    """

    label: str
    k_T: int
    transient_mean: np.ndarray
    transient_cov: np.ndarray
    steady_mean: np.ndarray
    steady_cov: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        if self.k_T < 0:
            raise DataError("k_T must be >= 0")
        steady_mean = np.asarray(self.steady_mean, dtype=np.float64).reshape(-1)
        S = steady_mean.shape[0]
        tm = np.asarray(self.transient_mean, dtype=np.float64).reshape(self.k_T, S)
        tc = np.asarray(self.transient_cov, dtype=np.float64).reshape(self.k_T, S, S)
        sc = np.asarray(self.steady_cov, dtype=np.float64).reshape(S, S)
        counts = np.asarray(self.counts, dtype=np.int64).reshape(self.k_T + 1)

        means = np.concatenate([tm, steady_mean[None]], axis=0)
        covs = np.concatenate([tc, sc[None]], axis=0)
        if not np.all(np.isfinite(covs)) or not np.all(np.isfinite(means)):
            raise DegenerateCovariance(f"model {self.label!r} has non-finite parameters")
        asym = np.abs(covs - covs.transpose(0, 2, 1)).max(initial=0.0)
        if asym > 1e-12 * max(1.0, np.abs(covs).max(initial=0.0)):
            raise DegenerateCovariance(f"model {self.label!r} covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError:
            raise DegenerateCovariance(f"model {self.label!r} covariance is not positive definite") from None
        diag = np.diagonal(chol, axis1=1, axis2=2)
        if np.any(diag <= 0):
            raise DegenerateCovariance(f"model {self.label!r} covariance is singular")
        eye = np.broadcast_to(np.eye(S), covs.shape)
        whiten = np.linalg.solve(chol, eye)
        log_det = 2.0 * np.log(diag).sum(axis=1)

        for name, arr in [("transient_mean", tm), ("transient_cov", tc), ("steady_mean", steady_mean),
                          ("steady_cov", sc), ("counts", counts), ("_means", means), ("_covs", covs),
                          ("_whiten", whiten), ("_log_det", log_det)]:
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def sensor_count(self) -> int:
        return int(self.steady_mean.shape[0])

    def param_index(self, k) -> np.ndarray:
        """Row into the stacked parameter arrays for laser-on index k (k > k_T -> steady row)."""
        return np.minimum(np.asarray(k, dtype=np.int64), self.k_T + 1) - 1

    def with_steady(self, mean: np.ndarray, cov: np.ndarray, count: int | None = None) -> "ProcessModel":
        counts = self.counts.copy()
        if count is not None:
            counts[-1] = count
        return ProcessModel(self.label, self.k_T, self.transient_mean, self.transient_cov, mean, cov, counts)

    def equals(self, other: "ProcessModel") -> bool:
        """Bit-exact structural equality."""
        return (
            self.label == other.label
            and self.k_T == other.k_T
            and all(np.array_equal(getattr(self, f), getattr(other, f))
                    for f in ("transient_mean", "transient_cov", "steady_mean", "steady_cov", "counts"))
        )


def model_params_at(model: ProcessModel, k: int) -> ModelParams:
    if k < 1:
        raise DataError("k must be >= 1")
    i = int(model.param_index(k))
    return ModelParams(model._means[i], model._covs[i], float(model._log_det[i]), model._whiten[i])


def regularize(cov: np.ndarray, eps: float = DEFAULT_REG_EPS, floor: float = ABS_COV_FLOOR) -> np.ndarray:
    """Add eps * trace / S to the diagonal (never less than ``floor``)."""
    S = cov.shape[-1]
    tr = np.trace(cov, axis1=-2, axis2=-1)
    ridge = np.maximum(eps * tr / S, floor)
    out = cov + ridge[..., None, None] * np.eye(S)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def fit_model(
    training: StrikeSegmentedStream,
    k_T: int = DEFAULT_K_T,
    label: str = "normal",
    regularization_eps: float = DEFAULT_REG_EPS,
    n_min: int = DEFAULT_N_MIN,
) -> ProcessModel:
    """Estimate per-k means and covariances from (normalized) training samples.

    Sample covariances use the n - 1 denominator.  Samples with k > k_T are
    pooled into one steady-state estimate.
    """
    if k_T < 0:
        raise DataError("k_T must be >= 0")
    X = training.intensity
    S = X.shape[1]
    idx = np.minimum(training.k, k_T + 1) - 1
    counts = np.bincount(idx, minlength=k_T + 1)[: k_T + 1]
    n_req = max(int(n_min), 2)
    for row, c in enumerate(counts):
        if c < n_req:
            raise InsufficientSamplesAtIndex(0 if row == k_T else row + 1, int(c), n_req)

    means = np.stack([np.bincount(idx, weights=X[:, s], minlength=k_T + 1) for s in range(S)], axis=1)
    means /= counts[:, None]
    D = X - means[idx]
    covs = np.empty((k_T + 1, S, S))
    for a in range(S):
        for b in range(a, S):
            c = np.bincount(idx, weights=D[:, a] * D[:, b], minlength=k_T + 1) / (counts - 1)
            covs[:, a, b] = c
            covs[:, b, a] = c
    covs = regularize(covs, regularization_eps)
    return ProcessModel(label, k_T, means[:k_T], covs[:k_T], means[k_T], covs[k_T], counts)


@dataclass(frozen=True, eq=False)
class ModelSet:
    """M process models, M + 1 priors (last = unknown) and the per-sample unknown floor."""

    models: tuple[ProcessModel, ...]
    priors: np.ndarray
    log_p_unk_per_sample: float

    def __post_init__(self) -> None:
        models = tuple(self.models)
        if not models:
            raise DataError("model set needs at least one model")
        S, kT = models[0].sensor_count, models[0].k_T
        for m in models[1:]:
            if m.sensor_count != S or m.k_T != kT:
                raise DataError(f"model {m.label!r} differs in S or k_T from {models[0].label!r}")
        labels = [m.label for m in models]
        if len(set(labels)) != len(labels):
            raise DataError("model labels must be unique")
        if RESERVED_LABELS & set(labels):
            raise DataError(f"labels {sorted(RESERVED_LABELS)} are reserved")
        priors = np.asarray(self.priors, dtype=np.float64).reshape(-1)
        if priors.shape[0] != len(models) + 1:
            raise DataError(f"need {len(models) + 1} priors (one per model plus unknown)")
        if np.any(~(priors > 0)) or abs(priors.sum() - 1.0) > 1e-12:
            raise DataError("priors must be strictly positive and sum to 1")
        priors.setflags(write=False)
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "priors", priors)
        object.__setattr__(self, "log_p_unk_per_sample", float(self.log_p_unk_per_sample))

    @classmethod
    def build(cls, models: Sequence[ProcessModel], log_p_unk_per_sample: float,
              priors: Sequence[float] | None = None) -> "ModelSet":
        """Normalizes ``priors`` (default uniform over M + 1 hypotheses)."""
        w = np.ones(len(models) + 1) if priors is None else np.asarray(priors, dtype=np.float64)
        if np.any(~(w > 0)):
            raise DataError("prior weights must be positive")
        return cls(tuple(models), w / w.sum(), log_p_unk_per_sample)

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.models]

    @property
    def sensor_count(self) -> int:
        return self.models[0].sensor_count

    @property
    def k_T(self) -> int:
        return self.models[0].k_T

    def equals(self, other: "ModelSet") -> bool:
        return (
            len(self.models) == len(other.models)
            and all(a.equals(b) for a, b in zip(self.models, other.models))
            and np.array_equal(self.priors, other.priors)
            and (self.log_p_unk_per_sample == other.log_p_unk_per_sample
                 or (np.isnan(self.log_p_unk_per_sample) and np.isnan(other.log_p_unk_per_sample)))
        )


def save_model_set(model_set: ModelSet, path: str | Path) -> None:
    lines = [
        f"{MODEL_FILE_MAGIC} {MODEL_FILE_VERSION}",
        f"n_models {len(model_set.models)}",
        f"priors {fmt_list(model_set.priors)}",
        f"log_p_unk_per_sample {fmt(model_set.log_p_unk_per_sample)}",
    ]
    for m in model_set.models:
        lines += [f"model {quote(m.label)}", f"S {m.sensor_count}", f"k_T {m.k_T}"]
        for k in range(m.k_T):
            lines.append(f"k {k + 1} {m.counts[k]} {fmt_list(m.transient_mean[k])} "
                         f"{fmt_list(m.transient_cov[k].ravel())}")
        lines.append(f"steady {m.counts[-1]} {fmt_list(m.steady_mean)} {fmt_list(m.steady_cov.ravel())}")
        lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_model(r: LineReader) -> ProcessModel:
    label = r.next_string("model")
    (S,) = r.ints(r.next_tokens("S", 1))
    (k_T,) = r.ints(r.next_tokens("k_T", 1))
    if S < 1 or k_T < 0:
        raise r.fail("invalid S or k_T")
    width = S + S * S
    tm, tc, counts = np.empty((k_T, S)), np.empty((k_T, S, S)), np.empty(k_T + 1, dtype=np.int64)
    for k in range(k_T):
        tok = r.next_tokens("k", 2 + width)
        kk, n = r.ints(tok[:2])
        if kk != k + 1:
            raise r.fail(f"expected k={k + 1}")
        vals = r.floats(tok[2:])
        counts[k] = n
        tm[k] = vals[:S]
        tc[k] = np.reshape(vals[S:], (S, S))
    tok = r.next_tokens("steady", 1 + width)
    (counts[-1],) = r.ints(tok[:1])
    vals = r.floats(tok[1:])
    r.next_tokens("end", 0)
    return ProcessModel(label, k_T, tm, tc, np.array(vals[:S]), np.reshape(vals[S:], (S, S)), counts)


def load_model_set(path: str | Path) -> ModelSet:
    r = LineReader.open(path)
    r.header(MODEL_FILE_MAGIC, MODEL_FILE_VERSION)
    (M,) = r.ints(r.next_tokens("n_models", 1))
    if M < 1:
        raise r.fail("n_models must be >= 1")
    priors = r.floats(r.next_tokens("priors", M + 1))
    (floor,) = r.floats(r.next_tokens("log_p_unk_per_sample", 1))
    models = [_read_model(r) for _ in range(M)]
    r.expect_eof()
    return ModelSet(tuple(models), np.array(priors), floor)
