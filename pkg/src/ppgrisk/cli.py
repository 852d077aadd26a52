"""Operator entry point: cohort synthesis, extractor pretraining, risk-model
training, hourly evaluation, and trajectory export, each writing a
self-describing run directory (config snapshot, key=value log, manifest).

Every tunable default lives in the shipped configs/default.yaml; user
configs override it sparsely. Exit codes: 0 ok, 1 usage/config, 2 data,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import yaml

from .aggregator import (AGGREGATOR_KINDS, AggregatorConfig, bce_loss,
                         build_aggregator)
from .cohort import (CohortConfig, PatientRecord, load_manifest, load_patient,
                     save_patient, synthesize_patient)
from .errors import ConfigError, DataError, NumericError
from .evaluation import export_report
from .extractor import (ExtractorConfig, PatchTransformer, chunks_to_patches,
                        copy_last_patch_baseline, load_extractor,
                        next_patch_loss, pretrain_step, save_extractor)
from .segmentation import (CHUNK_SAMPLES, CHUNKS_PER_HOUR, VARIANT_1H,
                           VARIANT_FH)
from .trajectory import build_trajectory, export_trajectory
from .training import (FEATURE_FAMILIES, FeatureSource, GridCache,
                       GroupedOptimizer, ModelBundle, Split, TrainConfig,
                       build_grid_dataset, grad_check, hourly_grid_eval,
                       init_bundle, load_bundle, save_bundle, split_cohort,
                       train)

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def default_config() -> dict:
    text = resources.files("ppgrisk").joinpath("configs/default.yaml").read_text()
    return yaml.safe_load(text)


def _merge_into(base: dict, override: dict, path: str = ""):
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path}{key!r} must be a mapping")
            _merge_into(base[key], value, f"{path}{key}.")
        else:
            base[key] = value


def load_config(path=None) -> dict:
    """The shipped defaults, sparsely overridden by the user's file."""
    config = default_config()
    if path is None:
        return config
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    try:
        override = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: {getattr(e, 'problem', None) or e}")
    if override is None:
        return config
    if not isinstance(override, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    version = override.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version {version} unsupported "
                          f"(expected {SCHEMA_VERSION})")
    _merge_into(config, override)
    return config


def _cohort_config(config: dict) -> CohortConfig:
    cc = CohortConfig(**config["cohort"])
    cc.validate()
    return cc


def _extractor_config(config: dict) -> ExtractorConfig:
    section = config["extractor"]
    custom = section.get("custom")
    if custom:
        ec = ExtractorConfig(**custom)
    else:
        ec = ExtractorConfig.from_size_tag(section["size"])
    ec.validate()
    return ec


def _train_config(config: dict, args) -> TrainConfig:
    section = dict(config["train"])
    section["val_hours"] = tuple(section["val_hours"])
    tc = TrainConfig(**section)
    if getattr(args, "variant", None):
        tc.variant = args.variant
    if getattr(args, "extractor_mode", None):
        tc.extractor_mode = args.extractor_mode
    if getattr(args, "family", None):
        tc.feature_family = args.family
    if getattr(args, "seed", None) is not None:
        tc.seed = args.seed
    tc.validate()
    return tc


# ---------------------------------------------------------------------------
# Run directories
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    run_id: str
    command: str
    seed: int
    config: dict
    inputs: dict = field(default_factory=dict)    # name -> content hash
    outputs: list = field(default_factory=list)   # paths relative to run dir
    wall_clock_s: float = 0.0
    schema_version: int = SCHEMA_VERSION


def file_digest(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _prepare_run_dir(out_dir, force: bool) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _finish_run(run_dir: Path, manifest: RunManifest, started: float):
    manifest.wall_clock_s = time.monotonic() - started
    with open(run_dir / "config.yaml", "w") as f:
        yaml.safe_dump(manifest.config, f, sort_keys=False)
    manifest.outputs.append("config.yaml")
    manifest.outputs.append("manifest.json")
    with open(run_dir / "manifest.json", "w") as f:
        json.dump(asdict(manifest), f, indent=2)
    print(f"run {manifest.run_id}: wrote {run_dir}")


def _run_id(command: str, seed: int) -> str:
    return f"{command}-seed{seed}-{time.strftime('%Y%m%d-%H%M%S')}"


class _LineLog:
    """Line-oriented key=value log, echoed to stdout."""

    def __init__(self, path: Path, echo: bool = True):
        self.path = path
        self.echo = echo

    def __call__(self, line: str):
        with open(self.path, "a") as f:
            f.write(line + "\n")
        if self.echo:
            print(line)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _synth_one(payload) -> tuple[str, int, str]:
    config_kw, index, label, out_dir = payload
    record = synthesize_patient(CohortConfig(**config_kw), index, label)
    path = Path(out_dir) / f"{record.id}.ppg"
    save_patient(record, path)
    return record.id, record.label, path.name


def cmd_synth(args) -> int:
    started = time.monotonic()
    config = load_config(args.config)
    if args.seed is not None:
        config["cohort"]["seed"] = args.seed
    cc = _cohort_config(config)
    run_dir = _prepare_run_dir(args.out, args.force)
    jobs = max(1, args.jobs)

    plan = [(asdict(cc), i, 1 if i < cc.n_case else 0, str(run_dir))
            for i in range(cc.n_case + cc.n_control)]
    if jobs == 1:
        rows = [_synth_one(p) for p in plan]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_synth_one, plan))

    manifest_path = run_dir / "cohort_manifest.csv"
    with open(manifest_path, "w") as f:
        f.write("id,label,path\n")
        for pid, label, name in rows:
            f.write(f"{pid},{label},{name}\n")

    manifest = RunManifest(_run_id("synth", cc.seed), "synth", cc.seed, config)
    manifest.outputs = [name for _, _, name in rows] + ["cohort_manifest.csv"]
    _finish_run(run_dir, manifest, started)
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def _chunk_pool(manifest_path: Path, per_record: int, rng) -> np.ndarray:
    """Training pool for next-patch pretraining: a random subset of chunks
    per record, one record resident at a time."""
    pool = []
    for pid, label, path in load_manifest(manifest_path):
        record = load_patient(path)
        n_chunks = len(record.samples) // CHUNK_SAMPLES
        take = min(per_record, n_chunks)
        idx = rng.choice(n_chunks, size=take, replace=False)
        chunks = record.samples[:n_chunks * CHUNK_SAMPLES].reshape(n_chunks, CHUNK_SAMPLES)
        pool.append(chunks[np.sort(idx)].astype(np.float32))
    if not pool:
        raise DataError(f"no records in {manifest_path}")
    return np.concatenate(pool, axis=0)


def cmd_pretrain(args) -> int:
    started = time.monotonic()
    config = load_config(args.config)
    section = config["pretrain"]
    seed = args.seed if args.seed is not None else section["seed"]
    run_dir = _prepare_run_dir(args.out, args.force)
    log = _LineLog(run_dir / "pretrain.log")

    model = PatchTransformer(_extractor_config(config), seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9e37]))
    pool = _chunk_pool(Path(args.cohort), section["chunks_per_record"], rng)
    log(f"pool_chunks={len(pool)} model_params={model.n_params()}")

    opt = GroupedOptimizer([{"params": list(model.parameters()),
                             "lr": section["lr"],
                             "weight_decay": section["weight_decay"]}])
    baseline = copy_last_patch_baseline(chunks_to_patches(pool[:2048]))
    log(f"copy_last_baseline_mse={baseline:.6f}")
    for step in range(1, section["steps"] + 1):
        idx = rng.integers(0, len(pool), size=section["batch_size"])
        loss = pretrain_step(model, chunks_to_patches(pool[idx]), opt)
        if step % 25 == 0 or step == 1 or step == section["steps"]:
            log(f"step={step} next_patch_mse={loss:.6f}")

    ckpt = run_dir / "extractor.npz"
    save_extractor(model, ckpt)
    manifest = RunManifest(_run_id("pretrain", seed), "pretrain", seed, config,
                           inputs={"cohort": file_digest(args.cohort)},
                           outputs=["extractor.npz", "pretrain.log"])
    _finish_run(run_dir, manifest, started)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@dataclass
class _ManifestEntry:
    id: str
    label: int
    path: Path


def _manifest_entries(manifest_path) -> list[_ManifestEntry]:
    return [_ManifestEntry(pid, label, path)
            for pid, label, path in load_manifest(Path(manifest_path))]


def _records(entries):
    for e in entries:
        yield load_patient(e.path)


def _feature_source(config: dict, family: str, extractor_path) -> FeatureSource:
    if family == "extractor":
        if extractor_path is None:
            raise ConfigError("extractor features need --extractor CHECKPOINT")
        return FeatureSource("extractor", load_extractor(extractor_path))
    return FeatureSource(family, seed=config["features"]["random_seed"])


def cmd_train(args) -> int:
    started = time.monotonic()
    config = load_config(args.config)
    tc = _train_config(config, args)
    agg_section = config["aggregator"]
    kind = args.aggregator or agg_section["kind"]
    run_dir = _prepare_run_dir(args.out, args.force)
    log = _LineLog(run_dir / "history.log")

    source = _feature_source(config, tc.feature_family, args.extractor)
    bundle = init_bundle(tc, source, aggregator_kind=kind,
                         param_budget=agg_section["param_budget"],
                         n_layers=agg_section["n_layers"])
    cache = GridCache(args.cache) if args.cache else None

    entries = _manifest_entries(args.cohort)
    split_entries = split_cohort(entries, tc.seed)
    with open(run_dir / "split.json", "w") as f:
        json.dump(split_entries.ids(), f, indent=2)

    if tc.extractor_mode == "finetune":
        split = Split([load_patient(e.path) for e in split_entries.train],
                      [load_patient(e.path) for e in split_entries.val], [])
    else:
        split = Split(build_grid_dataset(_records(split_entries.train), source, cache),
                      build_grid_dataset(_records(split_entries.val), source, cache),
                      [])
    log(f"split train={len(split.train)} val={len(split.val)} "
        f"test={len(split_entries.test)} aggregator={kind} "
        f"agg_params={bundle.aggregator.n_params()}")
    bundle = train(None, bundle, tc, split=split, cache=cache, log=log)
    log(f"best_epoch={bundle.best_epoch}")

    save_bundle(bundle, run_dir / "bundle.npz")
    manifest = RunManifest(_run_id("train", tc.seed), "train", tc.seed, config,
                           inputs={"cohort": file_digest(args.cohort)},
                           outputs=["bundle.npz", "history.log", "split.json"])
    if args.extractor:
        manifest.inputs["extractor"] = file_digest(args.extractor)
    _finish_run(run_dir, manifest, started)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    started = time.monotonic()
    bundle = load_bundle(args.bundle)
    tc = bundle.train_config
    config = load_config(args.config)
    run_dir = _prepare_run_dir(args.out, args.force)
    variant = args.variant or tc.variant
    cache = GridCache(args.cache) if args.cache else None

    entries = _manifest_entries(args.cohort)
    if args.subset == "all":
        wanted = entries
    else:
        split = split_cohort(entries, tc.seed)
        wanted = getattr(split, args.subset)
    items = build_grid_dataset(_records(wanted), bundle.source, cache)
    report = hourly_grid_eval(bundle.aggregator, items, variant)
    report_path, roc_path = export_report(report, run_dir / "report.csv")
    print(f"variant={variant} subset={args.subset} n={len(items)} "
          f"mean_auroc_all={report.mean_auroc_all:.4f} "
          f"mean_auprc_all={report.mean_auprc_all:.4f}")

    manifest = RunManifest(_run_id("eval", tc.seed), "eval", tc.seed, config,
                           inputs={"cohort": file_digest(args.cohort),
                                   "bundle": file_digest(args.bundle)},
                           outputs=[report_path.name, roc_path.name])
    _finish_run(run_dir, manifest, started)
    return 0


# ---------------------------------------------------------------------------
# trajectory
# ---------------------------------------------------------------------------

def cmd_trajectory(args) -> int:
    started = time.monotonic()
    config = load_config(args.config)
    section = config["trajectory"]
    bundle = load_bundle(args.bundle)
    run_dir = _prepare_run_dir(args.out, args.force)

    entries = {e.id: e for e in _manifest_entries(args.cohort)}
    if args.patient not in entries:
        raise DataError(f"patient {args.patient!r} not in cohort manifest")
    record = load_patient(entries[args.patient].path)
    n_chunks = min(args.last_hours * CHUNKS_PER_HOUR,
                   len(record.samples) // CHUNK_SAMPLES)
    tail = PatientRecord(id=record.id, label=record.label,
                         samples=record.samples[-n_chunks * CHUNK_SAMPLES:],
                         event_time=record.event_time, meta=record.meta)
    grid = bundle.source.grid(tail)

    path = build_trajectory(grid,
                            window_length=args.window_length or section["window_length"],
                            poly_order=args.poly_order or section["poly_order"],
                            method=args.method or section["method"],
                            coords_path=args.coords)
    table, image = export_trajectory(path, run_dir / f"trajectory_{record.id}")
    print(f"trajectory: {len(path.points)} points -> {table}")

    manifest = RunManifest(_run_id("trajectory", 0), "trajectory", 0, config,
                           inputs={"cohort": file_digest(args.cohort),
                                   "bundle": file_digest(args.bundle)},
                           outputs=[table.name, image.name])
    _finish_run(run_dir, manifest, started)
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    reports = {}
    kinds = ("extractor",) + AGGREGATOR_KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        if kind == "extractor":
            model = PatchTransformer(ExtractorConfig(
                n_layers=1, d_model=8, n_heads=2, d_ff=16), seed=0).double()
            patches = torch.randn(2, 30, 40, dtype=torch.float64,
                                  generator=torch.Generator().manual_seed(1))

            def loss_fn(model=model, patches=patches):
                _, preds = model(patches)
                return next_patch_loss(preds, patches)
        else:
            model = build_aggregator(AggregatorConfig(
                kind=kind, input_dim=6, hidden_dim=8), seed=0).double()
            seq = torch.randn(2, 12, 6, dtype=torch.float64,
                              generator=torch.Generator().manual_seed(2))
            y = torch.tensor([1.0, 0.0], dtype=torch.float64)

            def loss_fn(model=model, seq=seq, y=y):
                return bce_loss(torch.sigmoid(model(seq)), y)

        report = grad_check(model, loss_fn, tolerance=args.tolerance)
        reports[kind] = report
        status = "ok" if report.passed else "FAIL"
        print(f"gradcheck {kind}: max_rel_err={report.max_rel_err:.3e} "
              f"worst={report.worst_param} [{status}]")
    if all(r.passed for r in reports.values()):
        return 0
    raise NumericError("gradient check failed")


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def exit(self, status=0, message=None):
        if message:
            sys.stderr.write(message)
        raise SystemExit(1 if status == 2 else status)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ppgrisk",
                     description="cardiac-arrest risk from single-channel PPG: "
                                 "synthesis, pretraining, training, evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, cohort=True):
        p.add_argument("--config", help="YAML config overriding shipped defaults")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--force", action="store_true",
                       help="write into a non-empty directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker parallelism for per-patient work")
        if cohort:
            p.add_argument("--cohort", required=True,
                           help="cohort_manifest.csv of a synthesized cohort")

    p = sub.add_parser("synth", help="synthesize and persist a cohort")
    common(p, cohort=False)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("pretrain", help="next-patch pretraining of the extractor")
    common(p)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("train", help="train the risk model")
    common(p)
    p.add_argument("--extractor", help="pretrained extractor checkpoint (.npz)")
    p.add_argument("--variant", choices=[VARIANT_1H, VARIANT_FH])
    p.add_argument("--extractor-mode", dest="extractor_mode",
                   choices=["frozen", "finetune"])
    p.add_argument("--aggregator", choices=list(AGGREGATOR_KINDS))
    p.add_argument("--family", choices=list(FEATURE_FAMILIES),
                   help="feature family fed to the aggregator")
    p.add_argument("--cache", help="feature-grid cache directory")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="24-hour alarm-protocol evaluation")
    common(p)
    p.add_argument("--bundle", required=True, help="trained bundle (.npz)")
    p.add_argument("--variant", choices=[VARIANT_1H, VARIANT_FH],
                   help="override the bundle's variant")
    p.add_argument("--subset", choices=["test", "val", "train", "all"],
                   default="test")
    p.add_argument("--cache", help="feature-grid cache directory")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("trajectory", help="export a latent trajectory")
    common(p)
    p.add_argument("--bundle", required=True, help="trained bundle (.npz)")
    p.add_argument("--patient", required=True, help="patient id")
    p.add_argument("--last-hours", dest="last_hours", type=int, default=1)
    p.add_argument("--window-length", dest="window_length", type=int)
    p.add_argument("--poly-order", dest="poly_order", type=int)
    p.add_argument("--method", choices=["linear-pca", "external"])
    p.add_argument("--coords", help="external 2-D coordinates file")
    p.set_defaults(handler=cmd_trajectory)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--kind", default="all",
                   choices=["all", "extractor"] + list(AGGREGATOR_KINDS))
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
