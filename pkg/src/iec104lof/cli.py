"""Command-line entry point: ``iec104lof <subcommand> ...``.

Exit codes: 0 ok, 1 outliers found (only with ``--fail-on-outlier``),
2 usage error or missing input, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .detector import (BATCH, DEFAULT_WINDOW, MODES, TRAIN_THEN_SCORE, DetectionReport,
                       WindowConfig, detect_windowed, emit_plot_data, validate)
from .features import FeatureSeries, extract_features, write_series_csv
from .ingest import (IEC104_PORT, Conversation, IngestError, ParseStats, parse_csv,
                     parse_pcap, read_labeled_csv, write_csv, write_pcap)
from .injector import AttackScenario, generate_normal, inject, load_scenarios, scenario_dict
from .lof import DEFAULT_K, DEFAULT_THRESHOLD, fit_lof, load_model, save_model, score

logger = logging.getLogger("iec104lof")

EXIT_OK, EXIT_OUTLIERS, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3
MERGE_ALL = "merge-all"
PER_CONVERSATION = "per-conversation"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    k: int = DEFAULT_K
    window_size: int = DEFAULT_WINDOW
    threshold: float | str = DEFAULT_THRESHOLD
    mode: str = BATCH
    train_fraction: float = 2 / 3
    port: int = IEC104_PORT
    conversation: str = PER_CONVERSATION
    i_frames_only: bool = False
    seed: int = 0

    def window_config(self) -> WindowConfig:
        return WindowConfig(self.window_size, self.k, self.threshold, self.mode)

    def validate(self):
        try:
            self.window_config()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if not 0 < self.train_fraction < 1:
            raise UsageError("--train-fraction must lie in (0, 1)")
        if not 0 <= self.port <= 0xFFFF:
            raise UsageError("--port out of range")
        self.selector()

    def selector(self) -> Optional[Conversation]:
        if self.conversation in (MERGE_ALL, PER_CONVERSATION):
            return None
        try:
            a, b = self.conversation.split("-")
            return Conversation.between(_endpoint(a), _endpoint(b))
        except ValueError:
            raise UsageError(
                f"--conversation must be {MERGE_ALL}, {PER_CONVERSATION} or "
                f"ADDR:PORT-ADDR:PORT, got {self.conversation!r}") from None


def _endpoint(text: str) -> tuple[str, int]:
    addr, _, port = text.rpartition(":")
    return addr, int(port)


def _parse_threshold(text):
    if text is None or text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None


def _read_config_file(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_config(args) -> RunConfig:
    """Defaults, then the optional ``--config`` file, then explicit flags."""
    from_file = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        from_file = _read_config_file(path)
    values = {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
        elif f.name in from_file:
            values[f.name] = _coerce_field(f.name, from_file[f.name])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _coerce_field(name, raw):
    default = getattr(RunConfig, name)
    if name == "threshold":
        return _parse_threshold(str(raw))
    if isinstance(default, bool):
        return str(raw).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    return path


def _write_meta(artifact: Path, payload: dict):
    meta = Path(str(artifact) + ".meta.json")
    meta.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")


def _load_series(path: Path, cfg: RunConfig) -> tuple[dict, ParseStats]:
    stats = ParseStats()
    records, labels = read_labeled_csv(path, stats)
    if cfg.i_frames_only:
        keep = [i for i, r in enumerate(records) if r.apci_type == "I"]
        records = [records[i] for i in keep]
        labels = [labels[i] for i in keep] if labels is not None else None
    series = extract_features(records, merge=cfg.conversation == MERGE_ALL, labels=labels)
    selected = cfg.selector()
    if selected is not None:
        if selected not in series:
            raise IngestError(f"conversation {selected} not present in {path}")
        series = {selected: series[selected]}
    return series, stats


def _usable(series_map: dict, cfg: RunConfig, minimum: int) -> list[tuple[str, FeatureSeries]]:
    out = []
    for conv, s in sorted(series_map.items(), key=lambda kv: str(kv[0])):
        name = "all" if conv is None else str(conv)
        if len(s) < minimum:
            print(f"skip {name}: {len(s)} samples (< {minimum})")
            continue
        out.append((name, s))
    if not out:
        raise IngestError(f"no conversation has at least {minimum} inter-arrival samples")
    return out


def _artifact_path(base: Path, name: str, many: bool) -> Path:
    if not many:
        return base
    safe = name.replace(":", "_").replace("<->", "-")
    return base.with_name(f"{base.stem}.{safe}{base.suffix}")


def _echo(cfg: RunConfig) -> str:
    return " ".join(f"{k}={v}" for k, v in asdict(cfg).items())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_extract(args) -> int:
    cfg = build_config(args)
    src = _require_file(args.pcap)
    started = time.perf_counter()
    stats = ParseStats()
    records = parse_pcap(src, cfg.port, stats)
    if cfg.i_frames_only:
        records = (r for r in records if r.apci_type == "I")
    conversations = set()

    def tracked(it):
        for r in it:
            conversations.add(Conversation.of(r))
            yield r

    count = write_csv(tracked(records), args.out)
    elapsed = time.perf_counter() - started
    _write_meta(Path(args.out), {"source": str(src), "config": asdict(cfg),
                                 "records": count, "warnings": stats.warning_count})
    print(f"records: {count}")
    print(f"conversations: {len(conversations)}")
    print(f"warnings: {stats.warning_count} (truncated={stats.truncated} "
          f"parse_errors={stats.parse_errors} gaps={stats.stream_gaps} "
          f"retransmissions={stats.retransmissions})")
    print(f"elapsed_seconds: {elapsed:.3f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = build_config(args)
    records = generate_normal(args.period, args.jitter, args.count, cfg.seed)
    count = write_csv(records, args.out)
    meta = {"generator": {"period": args.period, "jitter_fraction": args.jitter,
                          "count": args.count, "seed": cfg.seed}}
    _write_meta(Path(args.out), meta)
    if args.pcap:
        write_pcap(records, args.pcap)
        _write_meta(Path(args.pcap), meta)
    print(f"records: {count}")
    return EXIT_OK


def _scenarios_from(args, cfg) -> list[AttackScenario]:
    if args.scenario:
        return load_scenarios(_require_file(args.scenario))
    if args.kind is None:
        raise UsageError("give --scenario FILE or --kind/--start/--duration/--magnitude")
    missing = [n for n in ("start", "duration", "magnitude") if getattr(args, n) is None]
    if missing:
        raise UsageError("missing " + ", ".join("--" + n for n in missing))
    return [AttackScenario(args.kind, args.start, args.duration, args.magnitude, cfg.seed)]


def cmd_inject(args) -> int:
    cfg = build_config(args)
    src = _require_file(args.csv)
    scenarios = _scenarios_from(args, cfg)
    records, labels = read_labeled_csv(src)
    # apply back to front so earlier scenarios' indices refer to the input stream
    for sc in sorted(scenarios, key=lambda s: s.start, reverse=True):
        records, labels = inject(records, sc, labels)
    count = write_csv(records, args.out, labels=labels)
    _write_meta(Path(args.out), {"source": str(src),
                                 "scenarios": [scenario_dict(s) for s in scenarios]})
    attacks = sum(label == "attack" for label in labels)
    print(f"records: {count}")
    print(f"attack_records: {attacks}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    series_map, _ = _load_series(_require_file(args.csv), cfg)
    usable = _usable(series_map, cfg, cfg.k + 2)
    if len(usable) > 1:
        raise UsageError("train needs a single series; use --conversation or merge-all")
    name, series = usable[0]
    window = series.iat[:cfg.window_size]
    model = fit_lof(window.reshape(-1, 1), cfg.k, cfg.threshold)
    save_model(model, args.model_out)
    _write_meta(Path(args.model_out), {"source": str(args.csv), "series": name,
                                       "config": asdict(cfg)})
    print(f"series: {name}")
    print(f"trained_points: {model.n_points}")
    print(f"threshold: {model.threshold}")
    print(f"training_outliers: {len(model.outliers())}")
    return EXIT_OK


def _report_from_model(series: FeatureSeries, model, cfg: RunConfig) -> DetectionReport:
    scores = score(model, series.as_points())
    return DetectionReport(series.indices, np.zeros(len(series), dtype=np.intp), scores,
                           np.array([model.threshold]),
                           asdict(cfg) | {"mode": "saved_model"})


def cmd_detect(args) -> int:
    cfg = build_config(args)
    series_map, stats = _load_series(_require_file(args.csv), cfg)
    model = load_model(_require_file(args.model)) if args.model else None
    usable = _usable(series_map, cfg, 1 if model else cfg.k + 2)
    print(f"config: {_echo(cfg)}")
    total_outliers = 0
    summaries = {}
    for name, series in usable:
        if model is not None:
            report = _report_from_model(series, model, cfg)
        else:
            report = detect_windowed(series, cfg.window_config(), n_jobs=args.jobs)
        total_outliers += report.n_outliers
        summaries[name] = report.summary()
        print(f"[{name}] samples: {len(series)} windows: {report.n_windows} "
              f"outliers: {report.n_outliers}")
        if args.plot_out:
            path = _artifact_path(Path(args.plot_out), name, len(usable) > 1)
            emit_plot_data(report, series, path)
            _write_meta(path, {"config": report.config, "series": name,
                               "summary": report.summary()})
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps({"config": asdict(cfg), "series": summaries}, indent=2, sort_keys=True)
            + "\n", encoding="utf-8")
    if stats.warning_count:
        print(f"parse_warnings: {stats.warning_count}")
    print(f"outliers: {total_outliers}")
    if args.fail_on_outlier and total_outliers:
        return EXIT_OUTLIERS
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = build_config(args)
    series_map, _ = _load_series(_require_file(args.csv), cfg)
    usable = _usable(series_map, cfg, 3)
    print(f"config: {_echo(cfg)}")
    results = {}
    fp = test = normal = 0
    attacks = detected = None
    for name, series in usable:
        train_len = int(np.floor(cfg.train_fraction * len(series) + 1e-12))
        if train_len < cfg.k + 2:
            print(f"skip {name}: training part has {train_len} samples (< {cfg.k + 2})")
            continue
        result = validate(series, cfg.window_config(), cfg.train_fraction, n_jobs=args.jobs)
        results[name] = result.summary()
        fp += result.false_positives
        test += result.test_samples
        normal += result.normal_samples
        if result.attack_samples is not None:
            attacks = (attacks or 0) + result.attack_samples
            detected = (detected or 0) + result.detected
    if not results:
        raise IngestError("no conversation is long enough to validate")
    lines = {"series": len(results), "test_samples": test, "false_positives": fp,
             "fp_rate": fp / normal if normal else 0.0}
    if attacks is not None:
        lines.update(attack_samples=attacks, detected=detected,
                     detection_rate=detected / attacks if attacks else 0.0)
    for key, value in lines.items():
        print(f"{key}={value}")
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps({"config": asdict(cfg), "summary": lines, "series": results},
                       indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.fail_on_outlier and fp:
        return EXIT_OUTLIERS
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = build_config(args)
    series_map, _ = _load_series(_require_file(args.csv), cfg)
    name, series = _usable(series_map, cfg, cfg.k + 2)[0]
    n = len(series)
    starts = list(range(0, max(n - cfg.window_size, 0) + 1, cfg.window_size))
    runs = max(args.repeat, len(starts))
    timings, first_scores, deterministic = [], {}, True
    for r in range(runs):
        start = starts[r % len(starts)]
        window = series.iat[start:start + cfg.window_size].reshape(-1, 1)
        t0 = time.perf_counter()
        model = fit_lof(window, cfg.k, cfg.threshold)
        timings.append(time.perf_counter() - t0)
        if start in first_scores:
            deterministic &= np.array_equal(first_scores[start], model.lof)
        else:
            first_scores[start] = model.lof
    timings = np.array(timings)
    print(f"series: {name}")
    print(f"window_size: {min(cfg.window_size, n)}")
    print(f"fits: {runs}")
    print(f"fit_seconds_mean: {timings.mean():.4f}")
    print(f"fit_seconds_min: {timings.min():.4f}")
    print(f"fit_seconds_max: {timings.max():.4f}")
    print(f"fit_seconds_std: {timings.std():.4f}")
    print(f"deterministic: {'yes' if deterministic else 'no'}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = _require_file(args.plot_csv)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "verdict" not in reader.fieldnames:
            raise IngestError(f"{path}: not a plot-data file")
        rows = list(reader)
    outliers = [r for r in rows if r["verdict"] == "outlier"]
    print(f"samples: {len(rows)}")
    print(f"outliers: {len(outliers)}")
    top = sorted(outliers, key=lambda r: float(r["score"]), reverse=True)[:args.top]
    for r in top:
        print(f"  index={r['sample_index']} iat={float(r['iat_seconds']):.6f} "
              f"score={float(r['score']):.3f}")
    if args.series_out:
        series = FeatureSeries(None, [float(r["iat_seconds"]) for r in rows],
                               np.zeros(len(rows)),
                               int(rows[0]["sample_index"]) if rows else 1)
        write_series_csv(series, args.series_out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, detection=True):
    p.add_argument("--config", help="JSON or key=value file; flags override it")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    if detection:
        p.add_argument("--k", type=int, help=f"neighbourhood size (default {DEFAULT_K})")
        p.add_argument("--window-size", type=int,
                       help=f"samples per window (default {DEFAULT_WINDOW})")
        p.add_argument("--threshold", type=_parse_threshold,
                       help=f"LOF decision threshold or 'auto' (default {DEFAULT_THRESHOLD})")
        p.add_argument("--mode", choices=MODES, help=f"windowing mode (default {BATCH})")
        p.add_argument("--train-fraction", type=float,
                       help="leading fraction used for training (default 2/3)")
        p.add_argument("--conversation",
                       help=f"{PER_CONVERSATION} (default), {MERGE_ALL}, or ADDR:PORT-ADDR:PORT")
        p.add_argument("--i-frames-only", action="store_true", default=None,
                       help="ignore S and U frames")
        p.add_argument("--jobs", type=int, default=None, help="parallel workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iec104lof",
        description="LOF outlier detection on IEC 104 packet inter-arrival times.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="PCAP -> per-APDU CSV")
    p.add_argument("pcap")
    p.add_argument("--out", required=True)
    p.add_argument("--port", type=int, help=f"IEC 104 TCP port (default {IEC104_PORT})")
    p.add_argument("--i-frames-only", action="store_true", default=None)
    _common(p, detection=False)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("generate", help="synthetic periodic traffic")
    p.add_argument("--out", required=True)
    p.add_argument("--pcap", help="also write the traffic as a PCAP")
    p.add_argument("--count", type=int, default=15001)
    p.add_argument("--period", type=float, default=1.0)
    p.add_argument("--jitter", type=float, default=0.01)
    _common(p, detection=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inject", help="apply attack scenarios to a CSV")
    p.add_argument("csv")
    p.add_argument("--out", required=True)
    p.add_argument("--scenario", help="scenario file (JSON or key=value blocks)")
    p.add_argument("--kind", choices=("flood", "delay", "injection", "outage"))
    p.add_argument("--start", type=int)
    p.add_argument("--duration", type=int)
    p.add_argument("--magnitude", type=float)
    _common(p, detection=False)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="fit one window and save the model")
    p.add_argument("csv")
    p.add_argument("--model-out", required=True)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="windowed detection with plot-data output")
    p.add_argument("csv")
    p.add_argument("--plot-out", help="plot-data CSV (sample_index, iat_seconds, score, verdict)")
    p.add_argument("--json-out")
    p.add_argument("--model", help="score against a saved model instead of windowed fitting")
    p.add_argument("--fail-on-outlier", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("validate", help="train on the first part, count false positives")
    p.add_argument("csv")
    p.add_argument("--json-out")
    p.add_argument("--fail-on-outlier", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench", help="time LOF fits on full windows")
    p.add_argument("csv")
    p.add_argument("--repeat", type=int, default=3)
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="summarise a plot-data CSV")
    p.add_argument("plot_csv")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--series-out", help="also export (index, iat_seconds)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
