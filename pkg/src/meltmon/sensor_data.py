"""Strike-segmented photodiode streams: data model, segmentation, plate-trend normalization.

A stream stores samples column-wise in numpy arrays.  Sample ``i`` belongs to
strike ``strike_id[i]`` and sits ``k[i]`` samples after laser turn-on (1-based).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import pandas as pd
from numpy.polynomial import polynomial as P

from .errors import (
    ChannelCountMismatch,
    DataError,
    EmptyTrace,
    InconsistentVectorLength,
    InsufficientSpatialCoverage,
    NonPositiveTrend,
)

DEFAULT_SAMPLE_RATE_HZ = 60_000.0
DEFAULT_K_T = 45
DEFAULT_ENVELOPE = (0.0, 250.0, 0.0, 250.0)
NO_PART = -1

Envelope = tuple[float, float, float, float]


@dataclass(frozen=True)
class SensorSample:
    """One time sample of the S-channel sensor vector."""

    strike_id: int
    k: int
    x_mm: float
    y_mm: float
    intensity: np.ndarray
    part_id: int | None = None
    layer: int = 0


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StrikeSegmentedStream:
    """Column store of strike-segmented samples.

    Arrays are coerced to fixed dtypes and made read-only on construction.
    ``part_id`` uses ``NO_PART`` (-1) for samples without a part assignment.
    """

    strike_id: np.ndarray
    k: np.ndarray
    x_mm: np.ndarray
    y_mm: np.ndarray
    intensity: np.ndarray
    part_id: np.ndarray | None = None
    layer: np.ndarray | None = None
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    machine: str = ""
    envelope: Envelope = DEFAULT_ENVELOPE
    # False for subsets that may cut strikes: k then only has to increase within a strike
    whole_strikes: bool = True

    def __post_init__(self) -> None:
        intensity = np.asarray(self.intensity, dtype=np.float64)
        if intensity.ndim == 1:
            intensity = intensity[:, None]
        if intensity.ndim != 2 or intensity.shape[1] < 1:
            raise DataError("intensity must be an (n, S) array with S >= 1")
        n = intensity.shape[0]
        cols = {
            "strike_id": np.asarray(self.strike_id, dtype=np.int64).reshape(-1),
            "k": np.asarray(self.k, dtype=np.int64).reshape(-1),
            "x_mm": np.asarray(self.x_mm, dtype=np.float64).reshape(-1),
            "y_mm": np.asarray(self.y_mm, dtype=np.float64).reshape(-1),
            "part_id": (np.full(n, NO_PART, dtype=np.int64) if self.part_id is None
                        else np.asarray(self.part_id, dtype=np.int64).reshape(-1)),
            "layer": (np.zeros(n, dtype=np.int64) if self.layer is None
                      else np.asarray(self.layer, dtype=np.int64).reshape(-1)),
        }
        for name, col in cols.items():
            if col.shape[0] != n:
                raise DataError(f"{name} has {col.shape[0]} entries, intensity has {n}")
        if not self.sample_rate_hz > 0:
            raise DataError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(intensity)):
            raise DataError("intensity contains non-finite values")

        sid, k = cols["strike_id"], cols["k"]
        if n:
            if sid[0] < 0:
                raise DataError("strike ids must be non-negative")
            if np.any(k < 1):
                raise DataError(f"k must be >= 1 (sample {int(np.argmax(k < 1))})")
            step = np.diff(sid)
            if np.any(step < 0):
                raise DataError("strike_id must be non-decreasing")
            new_strike = np.concatenate(([True], step > 0))
            if self.whole_strikes:
                expected_k = np.where(new_strike, 1, np.concatenate(([0], k[:-1])) + 1)
                bad = np.flatnonzero(k != expected_k)
            else:
                bad = np.flatnonzero(~new_strike[1:] & (np.diff(k) <= 0)) + 1
            if bad.size:
                raise DataError(f"k sequence broken at sample {int(bad[0])}")
            x0, x1, y0, y1 = self.envelope
            xs, ys = cols["x_mm"], cols["y_mm"]
            outside = (xs < x0) | (xs > x1) | (ys < y0) | (ys > y1) | ~np.isfinite(xs) | ~np.isfinite(ys)
            if np.any(outside):
                raise DataError(f"sample {int(np.argmax(outside))} lies outside the build envelope")

        for name, col in cols.items():
            object.__setattr__(self, name, _frozen(col))
        object.__setattr__(self, "intensity", _frozen(intensity))
        object.__setattr__(self, "envelope", tuple(float(v) for v in self.envelope))

    @property
    def sensor_count(self) -> int:
        return int(self.intensity.shape[1])

    @property
    def n_strikes(self) -> int:
        return int(np.unique(self.strike_id).size)

    @property
    def has_part_ids(self) -> bool:
        return bool(np.all(self.part_id != NO_PART))

    def __len__(self) -> int:
        return int(self.k.shape[0])

    def sample(self, i: int) -> SensorSample:
        pid = int(self.part_id[i])
        return SensorSample(
            strike_id=int(self.strike_id[i]),
            k=int(self.k[i]),
            x_mm=float(self.x_mm[i]),
            y_mm=float(self.y_mm[i]),
            intensity=self.intensity[i].copy(),
            part_id=None if pid == NO_PART else pid,
            layer=int(self.layer[i]),
        )

    def __iter__(self) -> Iterator[SensorSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def replace_intensity(self, intensity: np.ndarray) -> "StrikeSegmentedStream":
        return StrikeSegmentedStream(
            self.strike_id, self.k, self.x_mm, self.y_mm, intensity,
            part_id=self.part_id, layer=self.layer, sample_rate_hz=self.sample_rate_hz,
            machine=self.machine, envelope=self.envelope, whole_strikes=self.whole_strikes,
        )

    def select(self, which: np.ndarray, whole_strikes: bool = False) -> "StrikeSegmentedStream":
        """Sub-stream from a boolean mask or sorted index array.

        With ``whole_strikes`` the selection is checked to keep complete strikes.
        """
        which = np.asarray(which)
        return StrikeSegmentedStream(
            self.strike_id[which], self.k[which], self.x_mm[which], self.y_mm[which],
            self.intensity[which], part_id=self.part_id[which], layer=self.layer[which],
            sample_rate_hz=self.sample_rate_hz, machine=self.machine, envelope=self.envelope,
            whole_strikes=whole_strikes,
        )

    def layers(self) -> list[int]:
        return [int(v) for v in np.unique(self.layer)]

    def layer_stream(self, layer: int) -> "StrikeSegmentedStream":
        return self.select(self.layer == layer)


def empty_stream(sensor_count: int, sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> StrikeSegmentedStream:
    z = np.zeros(0)
    return StrikeSegmentedStream(z, z, z, z, np.zeros((0, sensor_count)), sample_rate_hz=sample_rate_hz)


def segment_strikes(
    raw_trace: Sequence[tuple[Sequence[float], bool]],
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
    positions: Sequence[tuple[float, float]] | None = None,
    envelope: Envelope = DEFAULT_ENVELOPE,
) -> StrikeSegmentedStream:
    """Split a raw (intensity, laser_trigger) trace into strikes.

    Each maximal run of trigger-true samples becomes one strike with k = 1, 2, ...;
    trigger-false samples are dropped.  Strike ids count from 0 in encounter order.
    """
    if len(raw_trace) == 0:
        raise EmptyTrace("raw trace has no samples")
    if positions is not None and len(positions) != len(raw_trace):
        raise DataError("positions and raw trace differ in length")

    S = len(raw_trace[0][0])
    rows: list[Sequence[float]] = []
    keep: list[int] = []
    sids: list[int] = []
    ks: list[int] = []
    sid, k, prev = -1, 0, False
    for i, (vec, trig) in enumerate(raw_trace):
        if len(vec) != S:
            raise InconsistentVectorLength(i, S, len(vec))
        if trig:
            if not prev:
                sid += 1
                k = 0
            k += 1
            rows.append(vec)
            keep.append(i)
            sids.append(sid)
            ks.append(k)
        prev = bool(trig)

    if not keep:
        return empty_stream(S, sample_rate_hz)
    if positions is None:
        xs = ys = np.zeros(len(keep))
    else:
        pos = np.asarray(positions, dtype=np.float64)[keep]
        xs, ys = pos[:, 0], pos[:, 1]
    return StrikeSegmentedStream(
        np.array(sids), np.array(ks), xs, ys, np.asarray(rows, dtype=np.float64).reshape(len(keep), S),
        sample_rate_hz=sample_rate_hz, envelope=envelope,
    )


@dataclass(frozen=True, eq=False)
class PlateTrendMap:
    """Per-channel bivariate polynomial t(x, y) = sum_ij c[s, i, j] x^i y^j (x, y in mm)."""

    coefficients: np.ndarray  # (S, degree + 1, degree + 1)
    envelope: Envelope = DEFAULT_ENVELOPE
    residual_rms: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def degree(self) -> int:
        return self.coefficients.shape[1] - 1

    @property
    def sensor_count(self) -> int:
        return self.coefficients.shape[0]

    def evaluate(self, x_mm, y_mm) -> np.ndarray:
        """Trend values, shape (n, S)."""
        x = np.asarray(x_mm, dtype=np.float64)
        y = np.asarray(y_mm, dtype=np.float64)
        return np.stack([P.polyval2d(x, y, c) for c in self.coefficients], axis=-1)

    def envelope_mean(self) -> np.ndarray:
        """Exact mean of t over the envelope rectangle, per channel."""
        x0, x1, y0, y1 = self.envelope
        powers = np.arange(self.degree + 1)

        def mean_pow(a, b):
            if b == a:
                return a ** powers.astype(np.float64)
            return (b ** (powers + 1) - a ** (powers + 1)) / ((powers + 1) * (b - a))

        mx, my = mean_pow(x0, x1), mean_pow(y0, y1)
        return np.einsum("sij,i,j->s", self.coefficients, mx, my)


def fit_plate_trend(
    samples: StrikeSegmentedStream,
    degree: int = 2,
    k_T: int = DEFAULT_K_T,
    check_grid: int = 101,
) -> PlateTrendMap:
    """Least-squares plate trend on steady-state samples (k > k_T).

    Raises InsufficientSpatialCoverage when fewer than (degree+1)^2 distinct
    positions are available, NonPositiveTrend if the surface dips to <= 0
    anywhere on a ``check_grid`` x ``check_grid`` lattice over the envelope.
    """
    if degree < 0:
        raise DataError("degree must be >= 0")
    steady = samples.k > k_T
    x, y = samples.x_mm[steady], samples.y_mm[steady]
    z = samples.intensity[steady]
    n_terms = (degree + 1) ** 2
    distinct = np.unique(np.stack([x, y], axis=1), axis=0).shape[0] if x.size else 0
    if distinct < n_terms:
        raise InsufficientSpatialCoverage(
            f"{distinct} distinct steady-state locations, degree {degree} needs {n_terms}"
        )

    V = P.polyvander2d(x, y, [degree, degree])
    scale = np.linalg.norm(V, axis=0)
    scale[scale == 0] = 1.0
    sol, *_ = np.linalg.lstsq(V / scale, z, rcond=None)
    coef = (sol / scale[:, None]).T.reshape(z.shape[1], degree + 1, degree + 1)
    resid = z - V @ (sol / scale[:, None])
    trend = PlateTrendMap(coef, samples.envelope, np.sqrt(np.mean(resid**2, axis=0)))

    x0, x1, y0, y1 = samples.envelope
    gx, gy = np.meshgrid(np.linspace(x0, x1, check_grid), np.linspace(y0, y1, check_grid))
    vals = trend.evaluate(gx.ravel(), gy.ravel())
    if np.any(vals <= 0):
        raise NonPositiveTrend(f"trend minimum {vals.min():.6g} inside envelope {samples.envelope}")
    return trend


def normalize(samples: StrikeSegmentedStream, trend: PlateTrendMap) -> StrikeSegmentedStream:
    """Divide each channel by t(x, y) / mean(t) so the global scale is kept."""
    if trend.sensor_count != samples.sensor_count:
        raise ChannelCountMismatch(
            f"trend has {trend.sensor_count} channels, stream has {samples.sensor_count}"
        )
    rel = trend.evaluate(samples.x_mm, samples.y_mm) / trend.envelope_mean()
    return samples.replace_intensity(samples.intensity / rel)


# --- CSV ingestion -----------------------------------------------------------

def _channel_columns(columns) -> list[str]:
    chans = [c for c in columns if c.startswith("s") and c[1:].isdigit()]
    chans.sort(key=lambda c: int(c[1:]))
    if not chans or [int(c[1:]) for c in chans] != list(range(len(chans))):
        raise DataError("channel columns must be s0..s{S-1}")
    return chans


def write_stream_csv(stream: StrikeSegmentedStream, path: str | Path) -> None:
    """Write ``strike_id,k,x_mm,y_mm,part_id,layer,s0,...``; missing part ids are blank."""
    df = pd.DataFrame({
        "strike_id": stream.strike_id,
        "k": stream.k,
        "x_mm": stream.x_mm,
        "y_mm": stream.y_mm,
        "part_id": pd.array(np.where(stream.part_id == NO_PART, 0, stream.part_id), dtype="Int64"),
        "layer": stream.layer,
    })
    df.loc[stream.part_id == NO_PART, "part_id"] = pd.NA
    for s in range(stream.sensor_count):
        df[f"s{s}"] = stream.intensity[:, s]
    df.to_csv(path, index=False, lineterminator="\n")


def read_stream_csv(
    path: str | Path,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
    envelope: Envelope = DEFAULT_ENVELOPE,
) -> StrikeSegmentedStream:
    """Read a stream CSV. The ``layer`` column is optional (defaults to 0)."""
    try:
        df = pd.read_csv(path, dtype={"part_id": "Int64"}, encoding="utf-8", float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    required = ["strike_id", "k", "x_mm", "y_mm", "part_id"]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    chans = _channel_columns(df.columns)
    part = df["part_id"].fillna(NO_PART).to_numpy(dtype=np.int64)
    layer = df["layer"].to_numpy(dtype=np.int64) if "layer" in df.columns else None
    return StrikeSegmentedStream(
        df["strike_id"].to_numpy(), df["k"].to_numpy(), df["x_mm"].to_numpy(), df["y_mm"].to_numpy(),
        df[chans].to_numpy(dtype=np.float64), part_id=part, layer=layer,
        sample_rate_hz=sample_rate_hz, envelope=envelope,
    )


def read_raw_trace(path: str | Path) -> tuple[list[tuple[np.ndarray, bool]], list[tuple[float, float]]]:
    """Read a raw-trace CSV ``trigger,x_mm,y_mm,s0,...`` into segment_strikes inputs."""
    df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    chans = _channel_columns(df.columns)
    trig = df["trigger"].astype(str).str.strip().str.lower().isin(["1", "true", "t", "yes"])
    vals = df[chans].to_numpy(dtype=np.float64)
    trace = [(vals[i], bool(trig.iloc[i])) for i in range(len(df))]
    positions = list(zip(df["x_mm"].astype(float), df["y_mm"].astype(float)))
    return trace, positions


TREND_FILE_MAGIC = "meltmon-trend"
TREND_FILE_VERSION = 1


def save_trend(trend: PlateTrendMap, path: str | Path) -> None:
    from .textformat import fmt_list

    lines = [
        f"{TREND_FILE_MAGIC} {TREND_FILE_VERSION}",
        f"S {trend.sensor_count}",
        f"degree {trend.degree}",
        f"envelope {fmt_list(trend.envelope)}",
    ]
    lines += [f"channel {s} {fmt_list(trend.coefficients[s].ravel())}" for s in range(trend.sensor_count)]
    lines.append(f"residual_rms {fmt_list(trend.residual_rms)}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trend(path: str | Path) -> PlateTrendMap:
    from .textformat import LineReader

    r = LineReader.open(path)
    r.header(TREND_FILE_MAGIC, TREND_FILE_VERSION)
    (S,) = r.ints(r.next_tokens("S", 1))
    (d,) = r.ints(r.next_tokens("degree", 1))
    envelope = tuple(r.floats(r.next_tokens("envelope", 4)))
    coef = np.empty((S, d + 1, d + 1))
    for s in range(S):
        tok = r.next_tokens("channel", 1 + (d + 1) ** 2)
        if r.ints(tok[:1]) != [s]:
            raise r.fail(f"expected channel {s}")
        coef[s] = np.reshape(r.floats(tok[1:]), (d + 1, d + 1))
    rms = np.array(r.floats(r.next_tokens("residual_rms", S)))
    r.expect_eof()
    return PlateTrendMap(coef, envelope, rms)
