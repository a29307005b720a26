"""meltmon command line.

Exit codes: 0 success, 1 usage error, 2 data error.  Diagnostics go to
stderr as one ``meltmon: <code>: <context>`` line; data goes to files.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import mmht, process_models, quality_regression as qr, sensor_data, simulator
from .errors import DataError, MeltmonError
from .textformat import fmt

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads_default() -> int:
    env = os.environ.get("MELTMON_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _priors(text: str | None):
    if text is None:
        return None
    return [float(v) for v in text.replace(",", " ").split()]


def _log(msg: str) -> None:
    print(f"meltmon: {msg}", file=sys.stderr)


def _load_stream(args, path) -> sensor_data.StrikeSegmentedStream:
    stream = sensor_data.read_stream_csv(path, sample_rate_hz=args.sample_rate_hz)
    if getattr(args, "trend", None):
        stream = sensor_data.normalize(stream, sensor_data.load_trend(args.trend))
    return stream


# --- subcommands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = simulator.load_build_spec(args.config_file)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    build = simulator.simulate_build(spec)
    sensor_data.write_stream_csv(build.stream, out / "stream.csv")
    simulator.write_truth_csv(build, out / "truth.csv")

    lines = ["part_id,head,process,p,s,f,h"]
    laser = {}
    for part in spec.parts:
        lp = spec.laser_params(part)
        laser[part.part_id] = lp
        lines.append(f"{part.part_id},{part.head},{part.process.label},{fmt(lp.power_w)},"
                     f"{fmt(lp.speed_mm_s)},{fmt(lp.focus)},{fmt(lp.hatch_mm)}")
    (out / "parts.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if spec.layers >= 2:
        rows = _part_features(build.stream, laser)
        qr.write_features_csv(rows, out / "features.csv")
        nominal = simulator.LaserParams(spec.power_w, spec.scan_speed_mm_s, spec.focus, spec.hatch_mm)
        scores = simulator.synthetic_defect_scores([laser[r.part_id] for r in rows], nominal, spec.seed)
        records = [qr.DefectRecord(r.part_id, kind, float(scores[kind][i]))
                   for kind in qr.DEFECT_KINDS for i, r in enumerate(rows)]
        qr.write_scores_csv(records, out / "scores.csv")
    _log(f"simulated {len(build.stream)} samples, {build.stream.n_strikes} strikes -> {out}")
    return EXIT_OK


def _part_features(stream, laser: dict) -> list[qr.PartFeatures]:
    rows = []
    for pid in np.unique(stream.part_id):
        if pid == sensor_data.NO_PART:
            continue
        if int(pid) not in laser:
            raise DataError(f"part {int(pid)} has no laser parameters")
        p, s, f, h = laser[int(pid)]
        rows.append(qr.extract_part_features(stream.select(stream.part_id == pid), p, s, f, h))
    return rows


def _read_parts_csv(path) -> dict[int, simulator.LaserParams]:
    import pandas as pd

    df = pd.read_csv(path, encoding="utf-8", float_precision="round_trip")
    for col in ("part_id", "p", "s", "f", "h"):
        if col not in df.columns:
            raise DataError(f"{path}: missing column {col}")
    return {int(r.part_id): simulator.LaserParams(float(r.p), float(r.s), float(r.f), float(r.h))
            for r in df.itertuples(index=False)}


def cmd_features(args) -> int:
    stream = _load_stream(args, args.stream)
    rows = _part_features(stream, _read_parts_csv(args.parts))
    qr.write_features_csv(rows, args.out)
    _log(f"wrote features for {len(rows)} parts -> {args.out}")
    return EXIT_OK


def cmd_fit_trend(args) -> int:
    stream = sensor_data.read_stream_csv(args.stream, sample_rate_hz=args.sample_rate_hz)
    trend = sensor_data.fit_plate_trend(stream, args.degree, args.k_t)
    sensor_data.save_trend(trend, args.out)
    _log(f"trend residual rms {' '.join(fmt(v) for v in trend.residual_rms)} -> {args.out}")
    return EXIT_OK


def _training_groups(stream, truth, label: str | None):
    """(label, sub-stream) pairs: one per truth label, or the whole stream under ``label``."""
    if truth is None:
        return [(label or "normal", stream)]
    if len(truth) != len(stream):
        raise DataError(f"truth has {len(truth)} rows, stream has {len(stream)}")
    labels = list(dict.fromkeys(str(v) for v in truth))
    if label is not None:
        labels = [label] if label in labels else []
        if not labels:
            raise DataError(f"label {label!r} not present in truth file")
    return [(lab, stream.select(truth == lab)) for lab in labels]


def _calibrated_floor(groups, models, quantile) -> float:
    floors = [mmht.calibrate_unknown_floor(s, m, quantile) for (_, s), m in zip(groups, models)]
    return min(floors)


def cmd_train(args) -> int:
    stream = _load_stream(args, args.stream)
    truth = simulator.read_truth_csv(args.truth) if args.truth else None
    groups = _training_groups(stream, truth, args.label)
    models = [process_models.fit_model(s, args.k_t, lab, args.eps, args.n_min) for lab, s in groups]
    floor = _calibrated_floor(groups, models, args.unknown_quantile)
    model_set = process_models.ModelSet.build(models, floor, _priors(args.priors))
    process_models.save_model_set(model_set, args.out)
    _log(f"trained {len(models)} model(s) {[m.label for m in models]}, unknown floor {fmt(floor)} -> {args.out}")
    return EXIT_OK


def cmd_calibrate_unknown(args) -> int:
    model_set = process_models.load_model_set(args.models)
    stream = _load_stream(args, args.stream)
    truth = simulator.read_truth_csv(args.truth) if args.truth else None
    if truth is None:
        groups, models = [("", stream)], [model_set.models[0]]
    else:
        present = set(str(v) for v in truth)
        models = [m for m in model_set.models if m.label in present]
        if not models:
            raise DataError("truth file shares no label with the model set")
        groups = [(m.label, stream.select(truth == m.label)) for m in models]
    floor = _calibrated_floor(groups, models, args.unknown_quantile)
    updated = process_models.ModelSet(model_set.models, model_set.priors, floor)
    process_models.save_model_set(updated, args.out or args.models)
    _log(f"unknown floor {fmt(floor)} at quantile {args.unknown_quantile}")
    print(fmt(floor))
    return EXIT_OK


def _kernel_truth(truth, kernel, labels) -> str:
    """Majority truth label of a kernel; labels outside the model set count as unknown."""
    known = set(labels)
    counts = Counter(str(v) if str(v) in known else mmht.UNKNOWN for v in truth[kernel.indices])
    best = max(counts.values())
    return next(lab for lab in labels if counts.get(lab, 0) == best)


def cmd_classify(args) -> int:
    model_set = process_models.load_model_set(args.models)
    stream = _load_stream(args, args.stream)
    truth = simulator.read_truth_csv(args.truth) if args.truth else None
    if truth is not None and len(truth) != len(stream):
        raise DataError(f"truth has {len(truth)} rows, stream has {len(stream)}")
    spec = mmht.KernelSpec(args.kernel, args.side_mm)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = mmht.hypothesis_labels(model_set)

    header = "layer,kernel,n,label,margin," + ",".join(f"logpost:{l}" for l in labels)
    rows = [header + (",truth" if truth is not None else "")]
    preds, truths = [], []
    for layer in stream.layers():
        sel = np.flatnonzero(stream.layer == layer)
        layer_stream = stream.select(sel)
        result = mmht.classify_layer(layer_stream, model_set, spec, threads=args.threads)
        if isinstance(result, mmht.DefectMap):
            result.to_csv(out / f"defect_map_layer{layer}.csv")
            result.to_pgm(out / f"defect_map_layer{layer}.pgm")
            result = list(result.classifications)
        for c in result:
            row = (f"{layer},{c.kernel.describe()},{c.kernel.N},{c.map_label},{fmt(c.margin)},"
                   + ",".join(fmt(v) for v in c.log_posteriors))
            if truth is not None:
                t = _kernel_truth(truth[sel], c.kernel, labels)
                preds.append(c.map_label)
                truths.append(t)
                row += f",{t}"
            rows.append(row)
    (out / "classifications.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    _log(f"classified {len(rows) - 1} kernel(s) -> {out}")
    if truth is not None:
        cm = mmht.confusion_matrix(preds, truths, labels)
        cm.to_csv(out / "confusion.csv")
        _log(f"accuracy {fmt(cm.accuracy)} over {int(cm.counts.sum())} kernel(s)")
    return EXIT_OK


def cmd_fit_defects(args) -> int:
    rows = qr.read_features_csv(args.features)
    records = qr.read_scores_csv(args.scores)
    config = qr.StepwiseConfig(args.p_enter, args.p_remove, args.vif_max)
    regs = qr.fit_defect_regressors(rows, records, config)
    qr.save_regressors(regs, args.out)
    if args.report:
        qr.write_fit_report(regs, rows, records, args.report)
    for kind, reg in regs.items():
        _log(f"{kind}: features {list(reg.features)} R2 {fmt(reg.r_squared)}")
    return EXIT_OK


def cmd_predict_defects(args) -> int:
    rows = qr.read_features_csv(args.features)
    regs = qr.load_regressors(args.regressors)
    lines = ["part_id," + ",".join(regs)]
    for r in rows:
        lines.append(f"{r.part_id}," + ",".join(fmt(qr.predict_defect(reg, r)) for reg in regs.values()))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="meltmon", description="DMLM photodiode process monitoring")
    parser.add_argument("--config", help="INI file with a [meltmon] section of flag defaults")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, stream=True):
        p.add_argument("--sample-rate-hz", type=float, default=sensor_data.DEFAULT_SAMPLE_RATE_HZ)
        p.add_argument("--threads", type=int, default=_threads_default())
        if stream:
            p.add_argument("--stream", required=True, help="stream CSV")
            p.add_argument("--trend", help="plate trend file; the stream is normalized with it")

    p = sub.add_parser("simulate", help="generate a synthetic build")
    p.add_argument("config_file", help="BuildSpec key-value file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit-trend", help="fit the plate trend used for normalization")
    common(p)
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--k-t", type=int, default=sensor_data.DEFAULT_K_T)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_trend)

    p = sub.add_parser("train", help="fit process models")
    common(p)
    p.add_argument("--truth", help="truth CSV: one model per label")
    p.add_argument("--label", help="model label (or the single truth label to train)")
    p.add_argument("--k-t", type=int, default=sensor_data.DEFAULT_K_T)
    p.add_argument("--eps", type=float, default=process_models.DEFAULT_REG_EPS)
    p.add_argument("--n-min", type=int, default=process_models.DEFAULT_N_MIN)
    p.add_argument("--unknown-quantile", type=float, default=mmht.DEFAULT_UNKNOWN_QUANTILE)
    p.add_argument("--priors", help="M+1 prior weights, unknown last (default uniform)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate-unknown", help="recalibrate the unknown floor of a model file")
    common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--truth")
    p.add_argument("--unknown-quantile", type=float, default=mmht.DEFAULT_UNKNOWN_QUANTILE)
    p.add_argument("--out", help="output model file (default: overwrite --models)")
    p.set_defaults(func=cmd_calibrate_unknown)

    p = sub.add_parser("classify", help="classify kernels of a stream")
    common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--kernel", choices=["layer", "square", "part"], default="layer")
    p.add_argument("--side-mm", type=float, default=mmht.DEFAULT_SIDE_MM)
    p.add_argument("--truth")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("features", help="aggregate part features from a stream")
    common(p)
    p.add_argument("--parts", required=True, help="CSV with part_id,p,s,f,h")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("fit-defects", help="stepwise OLS defect regressors")
    p.add_argument("--features", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--p-enter", type=float, default=0.05)
    p.add_argument("--p-remove", type=float, default=0.10)
    p.add_argument("--vif-max", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_fit_defects)

    p = sub.add_parser("predict-defects", help="predict defect scores")
    p.add_argument("--features", required=True)
    p.add_argument("--regressors", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict_defects)
    return parser


def _apply_config(parser: _Parser, argv: list[str]) -> list[str]:
    """Flag defaults from ``--config`` (any position); explicit flags still win. Returns argv without it."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return argv
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(known.config, encoding="utf-8"):
        raise DataError(f"cannot read config {known.config}")
    if "meltmon" not in cp:
        return rest
    values = {k.replace("-", "_"): v for k, v in cp["meltmon"].items()}
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            for a in sp._actions:
                if a.dest in values:
                    raw = values[a.dest]
                    a.default = a.type(raw) if a.type else raw
                    a.required = False
    return rest


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        _log(f"usage: {exc}")
        return EXIT_USAGE
    except MeltmonError as exc:
        _log(f"{exc.code}: {exc}")
        return EXIT_DATA
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except MeltmonError as exc:
        _log(f"{exc.code}: {exc}")
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        _log(f"data_error: {exc}")
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
