"""Synthetic DMLM builds with strike-segmented multi-photodiode traces.

Every sensor channel follows a first-order rise after laser turn-on,

    mu(k) = b + a * (1 - exp(-k / tau)),

with correlated Gaussian noise across channels.  Bulk parameter shifts map onto
(a, tau) and the hatch layout; random streams are keyed by (seed, layer, part)
through Philox so output never depends on generation order.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from shapely.geometry import LineString, Polygon

from .errors import DataError, EmptyBuild, EmptyRegion, FootprintOutsideEnvelope
from .process_models import ProcessModel
from .sensor_data import DEFAULT_ENVELOPE, DEFAULT_SAMPLE_RATE_HZ, Envelope, StrikeSegmentedStream

_ANOMALY_STREAM = 0xA40A


def _rng(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(v) for v in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ProcessSpec:
    """Generating law for one process condition.

    Shifts are fractions (0.1 == +10 %).  Power scales the amplitude; speed
    divides the amplitude and stretches the rise constant; hatch only changes
    line spacing in a build.
    """

    label: str
    amplitude: tuple[float, ...]
    offset: tuple[float, ...]
    tau: tuple[float, ...]
    sigma: tuple[float, ...]
    rho: float = 0.0
    power_shift: float = 0.0
    speed_shift: float = 0.0
    hatch_shift: float = 0.0
    focus_shift: float = 0.0

    def __post_init__(self) -> None:
        for name in ("amplitude", "offset", "tau", "sigma"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        S = len(self.amplitude)
        if S < 1 or any(len(getattr(self, n)) != S for n in ("offset", "tau", "sigma")):
            raise DataError(f"process {self.label!r}: per-sensor parameters must share one length")
        if min(self.tau) <= 0 or min(self.sigma) <= 0 or not abs(self.rho) < 1:
            raise DataError(f"process {self.label!r}: need tau > 0, sigma > 0, |rho| < 1")
        if min(self.power_shift, self.speed_shift, self.hatch_shift) <= -1:
            raise DataError(f"process {self.label!r}: shifts must exceed -100 %")

    @property
    def sensor_count(self) -> int:
        return len(self.amplitude)

    def shape(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Effective (a, b, tau) after bulk shifts."""
        a = np.array(self.amplitude) * (1 + self.power_shift) / (1 + self.speed_shift)
        tau = np.array(self.tau) * (1 + self.speed_shift)
        return a, np.array(self.offset), tau

    def mean_at(self, k) -> np.ndarray:
        """Generating mean, shape (n, S)."""
        a, b, tau = self.shape()
        k = np.asarray(k, dtype=np.float64).reshape(-1, 1)
        return b + a * (1.0 - np.exp(-k / tau))

    def steady_mean(self) -> np.ndarray:
        a, b, _ = self.shape()
        return a + b

    def covariance(self) -> np.ndarray:
        s = np.array(self.sigma)
        corr = np.full((len(s), len(s)), self.rho)
        np.fill_diagonal(corr, 1.0)
        return corr * np.outer(s, s)

    def shifted(self, label: str, **shifts: float) -> "ProcessSpec":
        return replace(self, label=label, **shifts)

    def draw(self, k: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        L = np.linalg.cholesky(self.covariance())
        z = rng.standard_normal((len(k), self.sensor_count))
        return self.mean_at(k) + z @ L.T


def exact_model(spec: ProcessSpec, k_T: int) -> ProcessModel:
    """ProcessModel carrying the generating law itself (steady part = limiting mean)."""
    ks = np.arange(1, k_T + 1)
    cov = spec.covariance()
    return ProcessModel(
        spec.label, k_T, spec.mean_at(ks), np.broadcast_to(cov, (k_T,) + cov.shape),
        spec.steady_mean(), cov, np.zeros(k_T + 1, dtype=np.int64),
    )


@dataclass(frozen=True, eq=False)
class SimulatedBuild:
    stream: StrikeSegmentedStream
    truth: np.ndarray  # label per sample

    def truth_labels(self) -> list[str]:
        return [str(v) for v in self.truth]


def simulate_strikes(
    spec: ProcessSpec,
    n_strikes: int,
    strike_samples: int,
    seed: int,
    origin: tuple[float, float] = (0.0, 0.0),
    spacing_mm: float = 0.0,
    layer: int = 0,
    part_id: int | None = None,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
) -> SimulatedBuild:
    """``n_strikes`` strikes of equal length drawn at a fixed location pattern.

    Samples of strike s sit at origin + (i * spacing_mm, s * spacing_mm).
    """
    if n_strikes < 1 or strike_samples < 1:
        raise EmptyBuild("need at least one strike with one sample")
    k = np.tile(np.arange(1, strike_samples + 1), n_strikes)
    sid = np.repeat(np.arange(n_strikes), strike_samples)
    x = origin[0] + (k - 1) * spacing_mm
    y = origin[1] + sid * spacing_mm
    X = spec.draw(k, _rng(seed, layer, 0))
    stream = StrikeSegmentedStream(
        sid, k, x, y, X, part_id=None if part_id is None else np.full(k.size, part_id),
        layer=np.full(k.size, layer), sample_rate_hz=sample_rate_hz,
    )
    return SimulatedBuild(stream, np.full(k.size, spec.label))


@dataclass(frozen=True)
class PartSpec:
    part_id: int
    footprint: tuple[tuple[float, float], ...]
    process: ProcessSpec
    head: str = "LH0"


class LaserParams(NamedTuple):
    power_w: float
    speed_mm_s: float
    focus: float
    hatch_mm: float


@dataclass(frozen=True)
class BuildSpec:
    """Build layout and nominal laser parameters; ``seed`` is mandatory.

    Hatch vectors run along x; vectors longer than ``max_strike_samples``
    (0 = unlimited) are cut into equal strikes, vectors shorter than
    ``min_strike_samples`` are skipped.
    """

    parts: tuple[PartSpec, ...]
    seed: int
    layers: int = 1
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ
    hatch_mm: float = 0.1
    scan_speed_mm_s: float = 1000.0
    power_w: float = 200.0
    focus: float = 0.0
    max_strike_samples: int = 0
    min_strike_samples: int = 1
    envelope: Envelope = DEFAULT_ENVELOPE
    anomalies: tuple["AnomalySpec", ...] = field(default=())

    def laser_params(self, part: PartSpec) -> LaserParams:
        p = part.process
        return LaserParams(self.power_w * (1 + p.power_shift), self.scan_speed_mm_s * (1 + p.speed_shift),
                           self.focus + p.focus_shift, self.hatch_mm * (1 + p.hatch_shift))

    def processes(self) -> list[ProcessSpec]:
        seen: dict[str, ProcessSpec] = {}
        for spec in [p.process for p in self.parts] + [a.process for a in self.anomalies]:
            seen.setdefault(spec.label, spec)
        return list(seen.values())


@dataclass(frozen=True)
class AnomalySpec:
    region: tuple[float, float, float, float]  # x0, y0, x1, y1 in mm
    process: ProcessSpec


def _hatch_vectors(poly: Polygon, hatch: float) -> list[tuple[float, float, float]]:
    """(y, x_start, x_end) for every hatch vector, serpentine direction."""
    minx, miny, maxx, maxy = poly.bounds
    out = []
    n_lines = int(math.floor((maxy - miny) / hatch + 0.5))
    for n in range(max(n_lines, 1)):
        y = miny + (n + 0.5) * hatch
        if y >= maxy:
            break
        cut = poly.intersection(LineString([(minx - 1.0, y), (maxx + 1.0, y)]))
        segs = [g for g in getattr(cut, "geoms", [cut]) if isinstance(g, LineString) and not g.is_empty]
        spans = sorted((min(s.coords[0][0], s.coords[-1][0]), max(s.coords[0][0], s.coords[-1][0])) for s in segs)
        if n % 2:
            spans = [(b, a) for a, b in reversed(spans)]
        out.extend((y, a, b) for a, b in spans)
    return out


def _part_geometry(build: BuildSpec, part: PartSpec):
    """Strike layout for one part: per-sample (strike index, k, x, y)."""
    lp = build.laser_params(part)
    step = lp.speed_mm_s / build.sample_rate_hz
    ks, xs, ys, strike = [], [], [], []
    s_idx = 0
    for y, xa, xb in _hatch_vectors(Polygon(part.footprint), lp.hatch_mm):
        n = int(math.floor(abs(xb - xa) / step)) + 1
        if n < build.min_strike_samples:
            continue
        direction = 1.0 if xb >= xa else -1.0
        pos = xa + direction * step * np.arange(n)
        cap = build.max_strike_samples or n
        n_chunks = math.ceil(n / cap)
        for chunk in np.array_split(np.arange(n), n_chunks):
            ks.append(np.arange(1, chunk.size + 1))
            xs.append(pos[chunk])
            ys.append(np.full(chunk.size, y))
            strike.append(np.full(chunk.size, s_idx))
            s_idx += 1
    if not ks:
        return None
    return np.concatenate(strike), np.concatenate(ks), np.concatenate(xs), np.concatenate(ys)


def simulate_build(spec: BuildSpec) -> SimulatedBuild:
    """Deterministic synthetic build; anomalies in ``spec.anomalies`` are injected afterwards."""
    if spec.layers < 1 or not spec.parts:
        raise EmptyBuild("build needs at least one layer and one part")
    x0, x1, y0, y1 = spec.envelope
    geometry = []
    for part in spec.parts:
        bx0, by0, bx1, by1 = Polygon(part.footprint).bounds
        if bx0 < x0 or bx1 > x1 or by0 < y0 or by1 > y1:
            raise FootprintOutsideEnvelope(f"part {part.part_id} footprint leaves envelope {spec.envelope}")
        if part.process.sensor_count != spec.parts[0].process.sensor_count:
            raise DataError("all processes must share the sensor count")
        geometry.append(_part_geometry(spec, part))

    cols: dict[str, list[np.ndarray]] = {n: [] for n in ("sid", "k", "x", "y", "X", "part", "layer", "truth")}
    next_sid = 0
    for layer in range(spec.layers):
        for p_idx, (part, geo) in enumerate(zip(spec.parts, geometry)):
            if geo is None:
                continue
            strike, k, x, y = geo
            cols["sid"].append(strike + next_sid)
            next_sid += int(strike[-1]) + 1
            cols["k"].append(k)
            cols["x"].append(x)
            cols["y"].append(y)
            cols["X"].append(part.process.draw(k, _rng(spec.seed, layer, p_idx)))
            cols["part"].append(np.full(k.size, part.part_id))
            cols["layer"].append(np.full(k.size, layer))
            cols["truth"].append(np.full(k.size, part.process.label, dtype=object))
    if not cols["k"]:
        raise EmptyBuild("no part produced any strike")
    stream = StrikeSegmentedStream(
        np.concatenate(cols["sid"]), np.concatenate(cols["k"]), np.concatenate(cols["x"]),
        np.concatenate(cols["y"]), np.concatenate(cols["X"]), part_id=np.concatenate(cols["part"]),
        layer=np.concatenate(cols["layer"]), sample_rate_hz=spec.sample_rate_hz, envelope=spec.envelope,
    )
    build = SimulatedBuild(stream, np.concatenate(cols["truth"]).astype(str))
    for n, anomaly in enumerate(spec.anomalies):
        build = inject_local_anomaly(build, anomaly.region, anomaly.process, seed=spec.seed, stream_key=n)
    return build


def inject_local_anomaly(
    build: SimulatedBuild,
    region: tuple[float, float, float, float],
    anomaly: ProcessSpec,
    seed: int,
    stream_key: int = 0,
) -> SimulatedBuild:
    """Resample every sample inside the closed rectangle (x0, y0, x1, y1) from ``anomaly``."""
    s = build.stream
    if anomaly.sensor_count != s.sensor_count:
        raise DataError("anomaly sensor count differs from stream")
    rx0, ry0, rx1, ry1 = region
    inside = (s.x_mm >= rx0) & (s.x_mm <= rx1) & (s.y_mm >= ry0) & (s.y_mm <= ry1)
    if not inside.any():
        raise EmptyRegion(f"region {region} contains no samples")
    X = s.intensity.copy()
    X[inside] = anomaly.draw(s.k[inside], _rng(seed, _ANOMALY_STREAM, stream_key))
    truth = build.truth.copy()
    truth = truth.astype(f"<U{max(truth.dtype.itemsize // 4, len(anomaly.label))}")
    truth[inside] = anomaly.label
    return SimulatedBuild(s.replace_intensity(X), truth)


def write_truth_csv(build: SimulatedBuild, path: str | Path) -> None:
    lines = ["sample,label"] + [f"{i},{label}" for i, label in enumerate(build.truth)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_truth_csv(path: str | Path) -> np.ndarray:
    import pandas as pd

    df = pd.read_csv(path, dtype={"label": str}, keep_default_na=False, encoding="utf-8")
    if list(df.columns) != ["sample", "label"]:
        raise DataError(f"{path}: expected header 'sample,label'")
    if not np.array_equal(df["sample"].to_numpy(), np.arange(len(df))):
        raise DataError(f"{path}: sample column must count 0..n-1")
    return df["label"].to_numpy(dtype=str)


# --- synthetic defect scores --------------------------------------------------

DEFECT_KINDS = ("pore", "lack_of_fusion", "crack")


def synthetic_defect_scores(
    laser: Sequence[LaserParams],
    nominal: LaserParams,
    seed: int,
    noise: float = 0.002,
) -> dict[str, np.ndarray]:
    """Area-fraction scores with a known dependence on energy density and hatch.

    Pores grow with excess linear energy density, lack of fusion with a deficit
    and with widened hatch; cracks are noise around a small constant.
    """
    lp = np.array(laser, dtype=np.float64).reshape(-1, 4)
    eds_rel = (lp[:, 0] / lp[:, 1]) / (nominal.power_w / nominal.speed_mm_s)
    h_rel = lp[:, 3] / nominal.hatch_mm
    rng = _rng(seed, 0xDEF)
    eps = rng.standard_normal((3, lp.shape[0])) * noise
    pore = 0.01 + 0.08 * np.maximum(0.0, eds_rel - 1.0) + eps[0]
    lof = 0.01 + 0.10 * np.maximum(0.0, 1.0 - eds_rel) + 0.05 * np.abs(h_rel - 1.0) + eps[1]
    crack = 0.005 + 1.5 * eps[2]
    return {k: np.clip(v, 0.0, 1.0) for k, v in zip(DEFECT_KINDS, (pore, lof, crack))}


# --- config file --------------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _parse_process(label: str, sec: configparser.SectionProxy) -> ProcessSpec:
    return ProcessSpec(
        label=label,
        amplitude=_floats(sec["amplitude"]),
        offset=_floats(sec["offset"]),
        tau=_floats(sec["tau"]),
        sigma=_floats(sec["sigma"]),
        rho=sec.getfloat("rho", 0.0),
        power_shift=sec.getfloat("power_shift", 0.0),
        speed_shift=sec.getfloat("speed_shift", 0.0),
        hatch_shift=sec.getfloat("hatch_shift", 0.0),
        focus_shift=sec.getfloat("focus_shift", 0.0),
    )


def _parse_footprint(text: str) -> tuple[tuple[float, float], ...]:
    pts = []
    for pair in text.split():
        x, y = pair.split(",")
        pts.append((float(x), float(y)))
    if len(pts) < 3:
        raise DataError("footprint needs at least three vertices 'x,y x,y x,y'")
    return tuple(pts)


def load_build_spec(path: str | Path) -> BuildSpec:
    """Read a BuildSpec from an INI-style key-value file.

    Sections: ``[build]``, ``[process <label>]``, ``[part <id>]`` (keys
    process, footprint, head) and optional ``[anomaly <name>]`` (keys process,
    region = x0 y0 x1 y1).
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise DataError(f"{path}: {exc}") from exc
    if "build" not in cp:
        raise DataError(f"{path}: missing [build] section")
    b = cp["build"]
    if "seed" not in b:
        raise DataError(f"{path}: seed is mandatory")
    try:
        processes = {name.split(None, 1)[1]: _parse_process(name.split(None, 1)[1], cp[name])
                     for name in cp.sections() if name.startswith("process ")}
        parts, anomalies = [], []
        for name in cp.sections():
            if name.startswith("part "):
                sec = cp[name]
                parts.append(PartSpec(int(name.split(None, 1)[1]), _parse_footprint(sec["footprint"]),
                                      processes[sec["process"]], sec.get("head", "LH0")))
            elif name.startswith("anomaly "):
                sec = cp[name]
                region = _floats(sec["region"])
                if len(region) != 4:
                    raise DataError("anomaly region needs x0 y0 x1 y1")
                anomalies.append(AnomalySpec(region, processes[sec["process"]]))
        envelope = _floats(b.get("envelope", " ".join(map(str, DEFAULT_ENVELOPE))))
        return BuildSpec(
            parts=tuple(parts),
            seed=b.getint("seed"),
            layers=b.getint("layers", 1),
            sample_rate_hz=b.getfloat("sample_rate_hz", DEFAULT_SAMPLE_RATE_HZ),
            hatch_mm=b.getfloat("hatch_mm", 0.1),
            scan_speed_mm_s=b.getfloat("scan_speed_mm_s", 1000.0),
            power_w=b.getfloat("power_w", 200.0),
            focus=b.getfloat("focus", 0.0),
            max_strike_samples=b.getint("max_strike_samples", 0),
            min_strike_samples=b.getint("min_strike_samples", 1),
            envelope=tuple(envelope),
            anomalies=tuple(anomalies),
        )
    except KeyError as exc:
        raise DataError(f"{path}: missing or unknown key {exc}") from None
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: {exc}") from None
