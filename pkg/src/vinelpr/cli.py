"""Command-line front end: ``vinelpr synth|describe|train|evaluate|report``.

Every command resolves its parameters from built-in defaults, then the
command's table in an optional TOML config file (``--config``), then
command-line flags.  Unknown config keys are rejected.  The resolved
configuration is logged before any work starts.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import tomli
from threadpoolctl import threadpool_limits

from .cloud import EmptyCloudError, NormalizationParams
from .evaluation import (
    RecallReport,
    evaluate,
    recall_curve_csv,
    recall_matrix_csv,
    report_from_json,
    report_to_csv,
    report_to_json,
)
from .handcrafted import FpfhParams, ScanContextParams, fpfh_descriptor, scan_context_descriptor
from .head import CheckpointError, DescriptorHeadParams, load_checkpoint
from .ingest import (
    DatasetManifest,
    DescriptorStore,
    FormatError,
    ManifestError,
    dump_manifest,
    load_dataset,
    load_manifest,
    load_store,
    save_store,
    write_sequence,
)
from .ranking import LossConfig, NoUsableQueryError
from .splits import DegenerateSplitError, make_interleaved_split, make_run_split, make_zone_split
from .synth import VineyardSpec, generate_traversal
from .training import InfeasibleBatchError, TrainConfig, describe_records, loss_curve_csv, train

log = logging.getLogger("vinelpr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- options
def _parse_list(kind: Callable) -> Callable:
    def parse(value):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return [kind(v.strip() if isinstance(v, str) else v) for v in value]

    return parse


def _parse_centers(value):
    if isinstance(value, str):
        value = [c.split(",") for c in value.split(";") if c.strip()]
    out = []
    for c in value:
        if len(c) != 2:
            raise ValueError(f"zone centre needs two coordinates, got {c!r}")
        out.append((float(c[0]), float(c[1])))
    return out


def _parse_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _optional(kind: Callable) -> Callable:
    return lambda v: None if v in (None, "", "none") else kind(v)


@dataclass(frozen=True)
class Option:
    key: str
    default: Any
    parse: Callable
    help: str = ""


def _opts(*items) -> dict:
    return {o.key: o for o in items}


_NORMALIZATION = (
    Option("scale_factor", 60.0, float, "normalization scale S in metres"),
    Option("max_range", 60.0, float, "range filter in metres"),
    Option("drop_zero_points", True, _parse_bool, "drop exact (0,0,0) returns"),
    Option("quantization", 0.01, float, "voxel size in normalized units"),
)

SYNTH_OPTIONS = _opts(
    *(Option(k, v, type(v)) for k, v in VineyardSpec().__dict__.items()),
    Option("rows", None, _optional(_parse_list(int)), "lane indices to traverse (default all)"),
    Option("step", 1.0, float, "metres between scans"),
    Option("reverse", False, _parse_bool, "drive the lanes in reverse"),
    Option("sequence_id", "synth", str),
    Option("x_offset", 0.0, float, "along-row offset of the first scan"),
    Option("speed", 1.0, float, "metres per second, sets timestamps"),
    Option("dataset_name", "synthetic", str),
    Option("sampling_distance", 0.0, float, "written to the manifest; 0 keeps every scan"),
    Option("append", False, _parse_bool, "add the sequence to an existing manifest in the output directory"),
)

DESCRIBE_OPTIONS = _opts(
    Option("method", "scan_context", str, "scan_context, fpfh or learned"),
    Option("checkpoint", None, _optional(str), "checkpoint file for the learned method"),
    *_NORMALIZATION,
    Option("sc_rings", 20, int),
    Option("sc_sectors", 60, int),
    Option("sc_voxel", 0.1, float),
    Option("fpfh_voxel", 0.15, float),
    Option("fpfh_normal_radius", 0.5, float),
    Option("sequences", None, _optional(_parse_list(str)), "restrict to these sequence ids"),
)

TRAIN_OPTIONS = _opts(
    Option("split", "interleaved", str, "interleaved, zone or run"),
    Option("test_sequences", None, _optional(_parse_list(str)), "run split: test sequence ids"),
    Option("zone_centers", None, _optional(_parse_centers), "zone split: 'x,y;x,y' (default from manifest)"),
    Option("zone_radius", None, _optional(float), "zone split radius (default from manifest)"),
    Option("order", "pose", str, "record order before an interleaved split: 'pose' (lane, x) or 'load'"),
    Option("epochs", 200, int),
    Option("batch_size", 16, int),
    Option("batches_per_epoch", None, _optional(int)),
    Option("positives_radius", 5.0, float),
    Option("negatives_min_radius", 20.0, float),
    Option("learning_rate", 0.01, float),
    Option("momentum", 0.9, float),
    Option("seed", 0, int),
    Option("tau", 0.01, float),
    Option("mrl_dims", [64, 128, 192], _parse_list(int)),
    Option("mrl_weights", [1.0, 0.5, 0.25], _parse_list(float)),
    Option("encoder_widths", [3, 32, 64, 128], _parse_list(int)),
    Option("nonlinearity", "relu", str),
    Option("gem_p", 3.0, float),
    Option("output_dim", 192, int),
    Option("use_intensity", False, _parse_bool),
    Option("head_seed", 0, int),
    Option("eval_every", 0, int, "score the test side every N epochs and keep the best checkpoint"),
    Option("loss_curve", None, _optional(str), "loss-curve CSV path (default <out>.loss.csv)"),
    *_NORMALIZATION,
)

EVALUATE_OPTIONS = _opts(
    Option("threshold", 5.0, float, "correct-match distance in metres"),
    Option("dims", None, _optional(_parse_list(int)), "prefix dimensions (learned stores)"),
    Option("max_n", 25, int),
    Option("test_label", "test", str),
    Option("dataset", "", str),
    Option("split_label", "", str),
    Option("csv", None, _optional(str), "CSV output path (default <out> with .csv suffix)"),
)

REPORT_OPTIONS = _opts(
    Option("format", "csv", str, "csv, curve, json or matrix"),
    Option("value", "recall_at_1", str, "matrix cell value: recall_at_1 or recall_at_1pct"),
    Option("dim", None, _optional(int), "matrix: which prefix dim to tabulate (default the largest)"),
)

COMMAND_OPTIONS = {
    "synth": SYNTH_OPTIONS,
    "describe": DESCRIBE_OPTIONS,
    "train": TRAIN_OPTIONS,
    "evaluate": EVALUATE_OPTIONS,
    "report": REPORT_OPTIONS,
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file's ``[command]`` table, then flags."""
    options = COMMAND_OPTIONS[command]
    resolved = {k: o.default for k, o in options.items()}
    if args.config:
        try:
            raw = tomli.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid TOML: {exc}") from None
        unknown_tables = set(raw) - set(COMMAND_OPTIONS)
        if unknown_tables:
            raise ConfigError(f"unknown config tables: {sorted(unknown_tables)}")
        table = raw.get(command, {})
        unknown = set(table) - set(options)
        if unknown:
            raise ConfigError(f"unknown keys in [{command}]: {sorted(unknown)}")
        for k, v in table.items():
            resolved[k] = _coerce(options[k], v)
    for k, o in options.items():
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = _coerce(o, v)
    return resolved


def _coerce(option: Option, value):
    try:
        return option.parse(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {option.key}: {value!r} ({exc})") from None


# --------------------------------------------------------------- commands
def _normalization(cfg: dict) -> NormalizationParams:
    return NormalizationParams(cfg["scale_factor"], cfg["max_range"], cfg["drop_zero_points"])


def _build(factory, *a, **kw):
    """Construct a parameter object, reporting validation failures as config errors."""
    try:
        return factory(*a, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_synth(args, cfg: dict) -> int:
    spec_keys = VineyardSpec().__dict__.keys()
    spec = _build(VineyardSpec, **{k: cfg[k] for k in spec_keys})
    rows = cfg["rows"] if cfg["rows"] is not None else list(range(spec.num_rows))
    records = _build(
        generate_traversal,
        spec, rows, cfg["step"], reverse=cfg["reverse"], sequence_id=cfg["sequence_id"],
        x_offset=cfg["x_offset"], speed=cfg["speed"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.toml"
    sequences: tuple = ()
    if cfg["append"] and manifest_path.exists():
        existing = load_manifest(manifest_path)
        if any(s.sequence_id == cfg["sequence_id"] for s in existing.sequences):
            raise ConfigError(f"sequence {cfg['sequence_id']!r} already in {manifest_path}")
        sequences = existing.sequences
    entry = write_sequence(records, out, cfg["sequence_id"])
    manifest = _build(
        DatasetManifest, cfg["dataset_name"], sequences + (entry,), sampling_distance=cfg["sampling_distance"]
    )
    manifest_path.write_text(dump_manifest(manifest), encoding="utf-8")
    log.info("wrote %d scans for sequence %s to %s", len(records), cfg["sequence_id"], out)
    return EXIT_OK


def _load_records(manifest_path: str, cfg: dict, sequences=None) -> list:
    manifest = load_manifest(manifest_path)
    data = load_dataset(manifest, _normalization(cfg))
    records = data.records
    if sequences is not None:
        known = {r.sequence_id for r in records}
        missing = set(sequences) - known
        if missing:
            raise DataError(f"unknown sequence ids: {sorted(missing)}")
        records = [r for r in records if r.sequence_id in set(sequences)]
    if not records:
        raise DataError(f"no usable scans in {manifest_path}")
    log.info("loaded %d records (%d scans skipped)", len(records), data.skipped)
    return records


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_describe(args, cfg: dict) -> int:
    method = cfg["method"]
    records = _load_records(args.manifest, cfg, cfg["sequences"])
    norm = _normalization(cfg)
    if method == "learned":
        if not cfg["checkpoint"]:
            raise ConfigError("method 'learned' needs --checkpoint")
        try:
            blob = Path(cfg["checkpoint"]).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint: {exc}") from None
        head = load_checkpoint(blob)
        store = describe_records(head, records, normalization=norm, quantization=cfg["quantization"])
    elif method in ("scan_context", "fpfh"):
        if method == "scan_context":
            params = _build(ScanContextParams, cfg["sc_rings"], cfg["sc_sectors"], cfg["max_range"], cfg["sc_voxel"])
            fn = lambda r: scan_context_descriptor(r.cloud, params)  # noqa: E731
            dim = params.dim
        else:
            params = _build(FpfhParams, cfg["fpfh_voxel"], cfg["fpfh_normal_radius"])
            fn = lambda r: fpfh_descriptor(r.cloud, params, cfg["max_range"])  # noqa: E731
            dim = params.dim
        vectors = _map(fn, records, args.threads)
        store = DescriptorStore(dim, method)
        for rec, vec in zip(records, vectors):
            store.add(rec.key, vec, rec.pose)
    else:
        raise ConfigError(f"unknown method {method!r}; expected scan_context, fpfh or learned")
    Path(args.out).write_bytes(save_store(store))
    log.info("described %d records with %s (dim %d)", len(store), method, store.descriptor_dim)
    return EXIT_OK


def _split(records: list, cfg: dict, manifest: DatasetManifest):
    protocol = cfg["split"]
    if protocol == "interleaved":
        return make_interleaved_split(records)
    if protocol == "zone":
        centers = cfg["zone_centers"] if cfg["zone_centers"] is not None else list(manifest.zone_centers)
        radius = cfg["zone_radius"] if cfg["zone_radius"] is not None else manifest.zone_radius
        if not centers or radius is None:
            raise ConfigError("zone split needs zone centres and a radius (flags or manifest)")
        return make_zone_split(records, centers, radius)
    if protocol == "run":
        if not cfg["test_sequences"]:
            raise ConfigError("run split needs --test-sequences")
        return make_run_split(records, cfg["test_sequences"])
    raise ConfigError(f"unknown split protocol {protocol!r}")


def _order_records(records: list, order: str) -> list:
    """Interleaving alternates neighbours, so by default records are put in
    spatial order (lane by rounded y, then x) before splitting."""
    if order == "load":
        return list(records)
    if order == "pose":
        return sorted(records, key=lambda r: (round(r.pose[1], 3), r.pose[0], r.sequence_id, r.scan_index))
    raise ConfigError(f"unknown record order {order!r}")


def train_configs(cfg: dict) -> tuple[TrainConfig, DescriptorHeadParams]:
    loss = _build(LossConfig, cfg["tau"], tuple(cfg["mrl_dims"]), tuple(cfg["mrl_weights"]))
    head = _build(
        DescriptorHeadParams,
        tuple(cfg["encoder_widths"]), cfg["nonlinearity"], cfg["gem_p"], cfg["output_dim"],
        tuple(cfg["mrl_dims"]), cfg["use_intensity"], cfg["head_seed"],
    )
    train_cfg = _build(
        TrainConfig,
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], positives_radius=cfg["positives_radius"],
        negatives_min_radius=cfg["negatives_min_radius"], learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"], seed=cfg["seed"], loss=loss, normalization=_normalization(cfg),
        quantization=cfg["quantization"], batches_per_epoch=cfg["batches_per_epoch"],
        eval_every=cfg["eval_every"],
    )
    return train_cfg, head


def cmd_train(args, cfg: dict) -> int:
    train_cfg, head_params = train_configs(cfg)
    manifest = load_manifest(args.manifest)
    records = _order_records(_load_records(args.manifest, cfg), cfg["order"])
    split = _split(records, cfg, manifest)
    validation = None
    if train_cfg.eval_every:
        validation = split.select(records)
    result = train(records, split, train_cfg, head_params, validation)
    out = Path(args.out)
    out.write_bytes(result.checkpoint)
    curve_path = Path(cfg["loss_curve"]) if cfg["loss_curve"] else out.with_name(out.name + ".loss.csv")
    curve_path.write_bytes(loss_curve_csv(result.curve, train_cfg.loss.mrl_dims))
    if result.best_checkpoint is not None:
        out.with_name(out.name + ".best").write_bytes(result.best_checkpoint)
        log.info("best validation Recall@1 %.4f at epoch %d", result.best_recall, result.best_epoch)
    if result.curve:
        log.info("final epoch mean loss %.6f", result.curve[-1].mean_loss)
    return EXIT_OK


def _read_store(path: str) -> DescriptorStore:
    try:
        return load_store(Path(path).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read store {path}: {exc}") from None


def cmd_evaluate(args, cfg: dict) -> int:
    db, queries = _read_store(args.database), _read_store(args.queries)
    if db.descriptor_dim != queries.descriptor_dim:
        raise DataError(f"dimension mismatch: database {db.descriptor_dim} vs queries {queries.descriptor_dim}")
    if len(db) == 0 or len(queries) == 0:
        raise DataError("database and query stores must be non-empty")
    threshold = cfg["threshold"]
    meta = {"dataset": cfg["dataset"], "split": cfg["split_label"]}
    report = evaluate(db, queries, cfg["dims"], threshold, cfg["test_label"], cfg["max_n"], meta)
    out = Path(args.out)
    out.write_bytes(report_to_json(report))
    csv_path = Path(cfg["csv"]) if cfg["csv"] else out.with_suffix(".csv")
    csv_path.write_bytes(report_to_csv(report))
    for r in report.results:
        print(
            f"{r.test_label} dim={r.dim} Recall@1={r.recall_at_1:.4f} "
            f"Recall@1%={r.recall_at_1pct:.4f} (N={r.n_1pct}, queries={r.num_queries}, "
            f"excluded={r.excluded_queries})"
        )
    return EXIT_OK


def _read_report(path: str) -> RecallReport:
    try:
        return report_from_json(Path(path).read_bytes())
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed report {path}: {exc}") from None


def cmd_report(args, cfg: dict) -> int:
    fmt = cfg["format"]
    if fmt == "matrix":
        cells = {}
        for item in args.inputs:
            label, sep, path = item.partition("=")
            if not sep:
                raise ConfigError(f"matrix inputs are TRAIN_LABEL=report.json, got {item!r}")
            report = _read_report(path)
            dims = [r.dim for r in report.results]
            dim = cfg["dim"] if cfg["dim"] is not None else (max(dims) if dims else 0)
            for r in report.results:
                if r.dim == dim:
                    cells[(label, r.test_label)] = r
        if cfg["value"] not in ("recall_at_1", "recall_at_1pct"):
            raise ConfigError(f"unknown matrix value {cfg['value']!r}")
        data = recall_matrix_csv(cells, cfg["value"])
    else:
        reports = [_read_report(p) for p in args.inputs]
        merged = RecallReport(
            reports[0].meta if reports else {},
            [r for rep in reports for r in rep.results],
        )
        if fmt == "csv":
            data = report_to_csv(merged)
        elif fmt == "curve":
            data = recall_curve_csv(merged)
        elif fmt == "json":
            data = report_to_json(merged)
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "describe": cmd_describe,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ----------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vinelpr", description="LiDAR place recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic vineyard traversal (PCD scans, pose CSV, manifest)",
        "describe": "compute one descriptor per scan into a descriptor store",
        "train": "train the learned descriptor head",
        "evaluate": "retrieval evaluation of a query store against a database store",
        "report": "render or merge recall reports",
    }
    for name, options in COMMAND_OPTIONS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="TOML config file; the [%s] table applies" % name)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker thread cap (default: all cores)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        if name == "synth":
            p.add_argument("--out", required=True, help="output directory")
        elif name == "describe":
            p.add_argument("manifest")
            p.add_argument("--out", required=True, help="descriptor store file")
        elif name == "train":
            p.add_argument("manifest")
            p.add_argument("--out", required=True, help="checkpoint file")
        elif name == "evaluate":
            p.add_argument("database", help="database descriptor store")
            p.add_argument("queries", help="query descriptor store")
            p.add_argument("--out", required=True, help="report JSON path")
        else:
            p.add_argument("inputs", nargs="+", help="report JSON files (matrix: TRAIN_LABEL=path)")
            p.add_argument("--out", help="output file (default stdout)")
        for key, o in options.items():
            default = "unset" if o.default is None else o.default
            p.add_argument(_flag(key), dest=key, default=None, help=f"{o.help} [default: {default}]".strip())
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ManifestError)):
        return EXIT_CONFIG
    if isinstance(exc, (FloatingPointError, NoUsableQueryError)):
        return EXIT_NUMERIC
    if isinstance(
        exc,
        (DataError, FormatError, CheckpointError, EmptyCloudError, DegenerateSplitError, InfeasibleBatchError, OSError),
    ):
        return EXIT_DATA
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    raise exc


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = resolve_config(args.command, args)
        log.info("resolved %s config: %s", args.command, json.dumps(cfg, sort_keys=True, default=str))
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code or re-raised
        code = _exit_code(exc)
        log.error("%s: %s", type(exc).__name__, exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
