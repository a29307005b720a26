"""Multiple-model hypothesis test over aggregated kernels of sensor samples.

All probabilities are handled as logarithms: a layer kernel holds ~1e5
samples and the product of their densities underflows any float.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyKernel,
    InsufficientSamples,
    LengthMismatch,
    MissingPartIds,
    UnknownLabelString,
)
from .process_models import ModelSet, ProcessModel, model_params_at
from .sensor_data import StrikeSegmentedStream

UNKNOWN = "unknown"
NO_DATA = "NO_DATA"
DEFAULT_SIDE_MM = 0.39
DEFAULT_UNKNOWN_QUANTILE = 0.001
LOG_2PI = math.log(2.0 * math.pi)


# --- likelihoods --------------------------------------------------------------

def log_likelihood_point(x, model: ProcessModel, k: int) -> float:
    """Gaussian log-density of one S-vector under ``model`` at laser-on index k."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.sensor_count:
        raise DimensionMismatch(f"sample has {x.shape[0]} channels, model has {model.sensor_count}")
    mean, _, log_det, whitener = model_params_at(model, int(k))
    z = whitener @ (x - mean)
    return -0.5 * (x.shape[0] * LOG_2PI + log_det + float(z @ z))


def point_log_likelihoods(X, k, model: ProcessModel) -> np.ndarray:
    """Vectorized log_likelihood_point over rows of X (n, S) with per-row k."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None] if model.sensor_count == 1 else X[None, :]
    if X.shape[1] != model.sensor_count:
        raise DimensionMismatch(f"samples have {X.shape[1]} channels, model has {model.sensor_count}")
    k = np.asarray(k, dtype=np.int64).reshape(-1)
    if k.shape[0] != X.shape[0]:
        raise DimensionMismatch("one k per sample required")
    if np.any(k < 1):
        raise DimensionMismatch("k must be >= 1")
    idx = model.param_index(k)
    D = X - model._means[idx]
    S = X.shape[1]
    if S == 1:
        quad = (D[:, 0] * model._whiten[idx, 0, 0]) ** 2
    else:
        Z = np.einsum("nij,nj->ni", model._whiten[idx], D)
        quad = np.einsum("ni,ni->n", Z, Z)
    return -0.5 * (S * LOG_2PI + model._log_det[idx] + quad)


def kernel_log_likelihood(X, k, model: ProcessModel) -> float:
    """Sum of per-sample log-likelihoods; each sample uses its own k."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyKernel("kernel has no samples")
    return float(np.sum(point_log_likelihoods(X, k, model)))


def unknown_log_likelihood(N: int, log_p_unk_per_sample: float) -> float:
    if N < 1:
        raise EmptyKernel("kernel has no samples")
    return N * log_p_unk_per_sample


def log_sum_exp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.squeeze(top, axis=axis) + np.log(np.sum(np.exp(a - top), axis=axis))


# --- kernels ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KernelSelection:
    """Index set I into a stream.

    kind is "layer", "square" or "part"; square kernels carry their grid cell,
    center and side, part kernels their part id.
    """

    indices: np.ndarray
    kind: str = "layer"
    center: tuple[float, float] | None = None
    side_mm: float | None = None
    cell: tuple[int, int] | None = None
    part_id: int | None = None

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def N(self) -> int:
        return int(self.indices.shape[0])

    def describe(self) -> str:
        if self.kind == "square":
            return f"square:{self.cell[0]}:{self.cell[1]}"
        if self.kind == "part":
            return f"part:{self.part_id}"
        return "layer"


@dataclass(frozen=True)
class SquareGrid:
    x0: float
    y0: float
    side_mm: float
    nx: int
    ny: int

    def center(self, i: int, j: int) -> tuple[float, float]:
        return (self.x0 + (i + 0.5) * self.side_mm, self.y0 + (j + 0.5) * self.side_mm)


def square_grid(layer: StrikeSegmentedStream, side_mm: float) -> SquareGrid:
    if not side_mm > 0:
        raise ValueError("side_mm must be positive")
    if len(layer) == 0:
        return SquareGrid(0.0, 0.0, side_mm, 0, 0)
    x0, x1 = float(layer.x_mm.min()), float(layer.x_mm.max())
    y0, y1 = float(layer.y_mm.min()), float(layer.y_mm.max())
    nx = max(1, math.ceil((x1 - x0) / side_mm))
    ny = max(1, math.ceil((y1 - y0) / side_mm))
    return SquareGrid(x0, y0, side_mm, nx, ny)


def _cell_indices(layer: StrikeSegmentedStream, grid: SquareGrid) -> tuple[np.ndarray, np.ndarray]:
    # half-open cells; samples on the far edge of the box fall into the last cell
    i = np.floor((layer.x_mm - grid.x0) / grid.side_mm).astype(np.int64)
    j = np.floor((layer.y_mm - grid.y0) / grid.side_mm).astype(np.int64)
    return np.clip(i, 0, grid.nx - 1), np.clip(j, 0, grid.ny - 1)


def build_square_kernels(layer: StrikeSegmentedStream, side_mm: float = DEFAULT_SIDE_MM) -> list[KernelSelection]:
    """One kernel per non-empty grid cell, ordered by (i, j)."""
    grid = square_grid(layer, side_mm)
    if len(layer) == 0:
        return []
    i, j = _cell_indices(layer, grid)
    cell = i * grid.ny + j
    order = np.argsort(cell, kind="stable")
    cells, starts = np.unique(cell[order], return_index=True)
    groups = np.split(order, starts[1:])
    out = []
    for c, members in zip(cells, groups):
        ci, cj = divmod(int(c), grid.ny)
        out.append(KernelSelection(members, "square", grid.center(ci, cj), side_mm, (ci, cj)))
    return out


def build_part_kernels(layer: StrikeSegmentedStream) -> list[KernelSelection]:
    """One kernel per distinct part id, ascending."""
    if len(layer) and not layer.has_part_ids:
        raise MissingPartIds("every sample needs a part id for part kernels")
    order = np.argsort(layer.part_id, kind="stable")
    parts, starts = np.unique(layer.part_id[order], return_index=True)
    return [KernelSelection(g, "part", part_id=int(p)) for p, g in zip(parts, np.split(order, starts[1:]))]


def build_layer_kernel(layer: StrikeSegmentedStream) -> KernelSelection:
    return KernelSelection(np.arange(len(layer)), "layer")


# --- posteriors ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Classification:
    """Log-posteriors over M models plus unknown (last) and the MAP decision."""

    log_posteriors: np.ndarray
    map_index: int
    labels: tuple[str, ...]
    kernel: KernelSelection | None = None

    @property
    def map_label(self) -> str:
        return self.labels[self.map_index]

    @property
    def is_unknown(self) -> bool:
        return self.map_index == len(self.labels) - 1

    @property
    def posteriors(self) -> np.ndarray:
        return np.exp(self.log_posteriors)

    @property
    def margin(self) -> float:
        """Gap between the two largest log-posteriors."""
        top = np.sort(self.log_posteriors)[::-1]
        return float(top[0] - top[1]) if top.size > 1 else math.inf


def hypothesis_labels(model_set: ModelSet) -> tuple[str, ...]:
    return tuple(model_set.labels) + (UNKNOWN,)


def log_posteriors_from_sums(ll_sums: np.ndarray, N: np.ndarray, model_set: ModelSet) -> np.ndarray:
    """Rows of log-posteriors from per-kernel model log-likelihood sums (K, M) and sizes (K,)."""
    ll_sums = np.atleast_2d(np.asarray(ll_sums, dtype=np.float64))
    N = np.asarray(N, dtype=np.float64).reshape(-1)
    unk = N * model_set.log_p_unk_per_sample
    joint = np.concatenate([ll_sums, unk[:, None]], axis=1) + np.log(model_set.priors)
    return joint - log_sum_exp(joint, axis=1)[:, None]


def map_decision(log_post: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: lowest model index wins ties, unknown last
    return np.argmax(log_post, axis=-1)


def posteriors(X, k, model_set: ModelSet, kernel: KernelSelection | None = None) -> Classification:
    """Posterior over M models + unknown for one kernel of samples X (N, S) at indices k."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, model_set.sensor_count)
    if X.shape[0] == 0:
        raise EmptyKernel("kernel has no samples")
    if X.shape[1] != model_set.sensor_count:
        raise DimensionMismatch(f"samples have {X.shape[1]} channels, models have {model_set.sensor_count}")
    sums = np.array([kernel_log_likelihood(X, k, m) for m in model_set.models])
    lp = log_posteriors_from_sums(sums[None, :], np.array([X.shape[0]]), model_set)[0]
    return Classification(lp, int(map_decision(lp)), hypothesis_labels(model_set), kernel)


def log_likelihood_matrix(stream: StrikeSegmentedStream, model_set: ModelSet, threads: int = 1) -> np.ndarray:
    """(n, M) per-sample log-likelihoods; columns computed independently so threading never changes values."""
    if stream.sensor_count != model_set.sensor_count:
        raise DimensionMismatch(f"stream has {stream.sensor_count} channels, models have {model_set.sensor_count}")
    out = np.empty((len(stream), len(model_set.models)))

    def column(m: int) -> None:
        out[:, m] = point_log_likelihoods(stream.intensity, stream.k, model_set.models[m])

    if threads > 1 and len(model_set.models) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(column, range(len(model_set.models))))
    else:
        for m in range(len(model_set.models)):
            column(m)
    return out


def classify_kernels(
    stream: StrikeSegmentedStream,
    kernels: Sequence[KernelSelection],
    model_set: ModelSet,
    threads: int = 1,
) -> list[Classification]:
    if not kernels:
        return []
    for kern in kernels:
        if kern.N == 0:
            raise EmptyKernel(f"kernel {kern.describe()} has no samples")
    ll = log_likelihood_matrix(stream, model_set, threads)
    members = np.concatenate([kern.indices for kern in kernels])
    owner = np.repeat(np.arange(len(kernels)), [kern.N for kern in kernels])
    sums = np.stack(
        [np.bincount(owner, weights=ll[members, m], minlength=len(kernels)) for m in range(ll.shape[1])],
        axis=1,
    )
    sizes = np.array([kern.N for kern in kernels])
    lp = log_posteriors_from_sums(sums, sizes, model_set)
    winners = map_decision(lp)
    labels = hypothesis_labels(model_set)
    return [Classification(lp[i], int(winners[i]), labels, kern) for i, kern in enumerate(kernels)]


# --- layer classification and defect maps -------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    kind: str = "layer"  # layer | square | part
    side_mm: float = DEFAULT_SIDE_MM

    def __post_init__(self) -> None:
        if self.kind not in ("layer", "square", "part"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "square" and not self.side_mm > 0:
            raise ValueError("side_mm must be positive")


@dataclass(frozen=True, eq=False)
class DefectMap:
    """Square-kernel classification grid for one layer.

    ``label_index[i, j]`` is a hypothesis index (M = unknown) or -1 for cells
    without samples; ``margin`` is NaN there.
    """

    grid: SquareGrid
    label_index: np.ndarray
    margin: np.ndarray
    labels: tuple[str, ...]
    classifications: tuple[Classification, ...] = field(default=())

    def label_at(self, i: int, j: int) -> str:
        v = int(self.label_index[i, j])
        return NO_DATA if v < 0 else self.labels[v]

    def rows(self):
        for i in range(self.grid.nx):
            for j in range(self.grid.ny):
                cx, cy = self.grid.center(i, j)
                yield i, j, cx, cy, self.label_at(i, j), float(self.margin[i, j])

    def to_csv(self, path: str | Path) -> None:
        from .textformat import fmt

        lines = ["i,j,x_center_mm,y_center_mm,label,margin"]
        for i, j, cx, cy, label, margin in self.rows():
            m = "" if math.isnan(margin) else fmt(margin)
            lines.append(f"{i},{j},{fmt(cx)},{fmt(cy)},{label},{m}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def to_pgm(self, path: str | Path) -> None:
        """Plain (P2) PGM; image rows run from high y to low y. NO_DATA is black."""
        n_h = len(self.labels)
        gray = np.where(self.label_index < 0, 0,
                        np.round(255 * (self.label_index + 1) / n_h)).astype(int)
        lines = ["P2", f"# labels: {' '.join(f'{v}={l}' for v, l in self._gray_legend())}",
                 f"{self.grid.nx} {self.grid.ny}", "255"]
        for j in range(self.grid.ny - 1, -1, -1):
            lines.append(" ".join(str(gray[i, j]) for i in range(self.grid.nx)))
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")

    def _gray_legend(self):
        n_h = len(self.labels)
        yield 0, NO_DATA
        for h, label in enumerate(self.labels):
            yield int(round(255 * (h + 1) / n_h)), label.replace(" ", "_")


def classify_layer(
    layer: StrikeSegmentedStream,
    model_set: ModelSet,
    kernel_spec: KernelSpec = KernelSpec(),
    threads: int = 1,
) -> DefectMap | list[Classification]:
    """Classify a (normalized) layer; square kernels produce a DefectMap."""
    if kernel_spec.kind == "square":
        grid = square_grid(layer, kernel_spec.side_mm)
        kernels = build_square_kernels(layer, kernel_spec.side_mm)
        results = classify_kernels(layer, kernels, model_set, threads)
        label_index = np.full((grid.nx, grid.ny), -1, dtype=np.int64)
        margin = np.full((grid.nx, grid.ny), np.nan)
        for c in results:
            i, j = c.kernel.cell
            label_index[i, j] = c.map_index
            margin[i, j] = c.margin
        return DefectMap(grid, label_index, margin, hypothesis_labels(model_set), tuple(results))
    if len(layer) == 0:
        return []
    if kernel_spec.kind == "part":
        kernels = build_part_kernels(layer)
    else:
        kernels = [build_layer_kernel(layer)]
    return classify_kernels(layer, kernels, model_set, threads)


def calibrate_unknown_floor(
    training: StrikeSegmentedStream,
    model: ProcessModel,
    quantile: float = DEFAULT_UNKNOWN_QUANTILE,
) -> float:
    """Per-sample log-likelihood at the given lower quantile of training data under its own model.

    Uses linear interpolation between order statistics.
    """
    if not 0 < quantile <= 0.5:
        raise ValueError("quantile must be in (0, 0.5]")
    need = max(2, math.ceil(1.0 / quantile))
    if len(training) < need:
        raise InsufficientSamples(f"{len(training)} samples, quantile {quantile} needs {need}")
    ll = point_log_likelihoods(training.intensity, training.k, model)
    return float(np.quantile(ll, quantile))


# --- confusion matrix ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    labels: tuple[str, ...]
    counts: np.ndarray

    @property
    def rates(self) -> np.ndarray:
        tot = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, tot, out=np.zeros(self.counts.shape), where=tot > 0)

    @property
    def per_class_accuracy(self) -> np.ndarray:
        tot = self.counts.sum(axis=1)
        return np.divide(np.diag(self.counts), tot, out=np.full(tot.shape, np.nan), where=tot > 0)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else math.nan

    def to_csv(self, path: str | Path) -> None:
        from .textformat import fmt

        lines = ["truth," + ",".join(self.labels) + ",n," + ",".join(f"rate:{l}" for l in self.labels)]
        rates = self.rates
        for r, label in enumerate(self.labels):
            lines.append(f"{label}," + ",".join(str(int(v)) for v in self.counts[r])
                         + f",{int(self.counts[r].sum())}," + ",".join(fmt(v) for v in rates[r]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def confusion_matrix(pred: Sequence[str], truth: Sequence[str], labels: Sequence[str]) -> ConfusionMatrix:
    if len(pred) != len(truth):
        raise LengthMismatch(f"{len(pred)} predictions vs {len(truth)} truth labels")
    pos = {label: i for i, label in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, t in zip(pred, truth):
        if p not in pos:
            raise UnknownLabelString(f"predicted label {p!r} not in {list(labels)}")
        if t not in pos:
            raise UnknownLabelString(f"true label {t!r} not in {list(labels)}")
        counts[pos[t], pos[p]] += 1
    return ConfusionMatrix(tuple(labels), counts)
