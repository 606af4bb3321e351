"""Command-line entry point: ``greenmesh {generate,train,eval,rollout,diagnose}``.

Exit codes: 0 success, 2 usage or invalid config, 3 numerical failure, 4 I/O.
Environment: ``GREENMESH_THREADS`` caps BLAS threads, ``GREENMESH_VERBOSITY``
(0-2) sets log output.
"""

from __future__ import annotations

import os

_threads = os.environ.get("GREENMESH_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import container
from .analysis import FIELDS, export_spectrum, mse, rne, spectral_report, truncation_probe
from .data import PRESETS, ScenarioSpec, generate_dataset, load_dataset, save_dataset
from .mesh import compute_edge_geometry
from .neural import NetConfig
from .operators import export_triplets
from .solver import FactorizationError, NonFiniteError, save_trajectory
from .training import HybridModel, MeshMismatchError, TrainingConfig, TrainingDiverged, run_metadata, save_run_metadata, train

log = logging.getLogger("greenmesh")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
SPLITS = ("test_seen", "test_unseen")


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path}: top level must be an object")
    return cfg


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"{section}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{section}: {exc}") from exc


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(x) for x in paths):
        h.update(p.encode())
        h.update(container.sha256_file(p).encode())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict, inputs: list, outputs: list, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "input_hash": _hash_files([p for p in inputs if Path(p).is_file()]),
        "tool_version": _version(),
        "wall_clock_seconds": time.perf_counter() - started,
    }
    path = out_dir / f"run_manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _scenario(args) -> ScenarioSpec:
    if args.scenario not in PRESETS:
        raise UsageError(f"--scenario: unknown preset {args.scenario!r}; choose from {', '.join(PRESETS)}")
    cfg = _load_config(args.config)
    base = asdict(PRESETS[args.scenario])
    over = cfg.get("scenario", cfg)
    unknown = sorted(set(over) - set(base))
    if unknown:
        raise UsageError(f"scenario: unknown field(s) {', '.join(unknown)}")
    try:
        return ScenarioSpec.from_dict({**base, **over})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"scenario: {exc}") from exc


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    spec = _scenario(args)
    out = Path(args.out)
    ds = generate_dataset(spec, args.n_train, args.n_seen, args.n_unseen, args.seed)
    manifest = save_dataset(ds, out)
    files = [out / f for f in manifest["checksums"]] + [out / "manifest.json"]
    write_manifest(out, "generate", {"scenario": spec.to_dict(), "counts": [args.n_train, args.n_seen, args.n_unseen]},
                   {"seed": args.seed}, [] if args.config is None else [args.config], files, t0)
    print(f"wrote {len(ds.trajectories)} trajectories to {out}")
    return EXIT_OK


def _model_for(ds, prior: str, net: NetConfig | None = None, seed: int = 0, checkpoint=None) -> HybridModel:
    geom = compute_edge_geometry(ds.mesh)
    l_phys = ds.spec.prior(prior).compose(ds.mesh, geom)
    if checkpoint is not None:
        return HybridModel.load(checkpoint, ds.mesh, geom, l_phys)
    return HybridModel.create(ds.mesh, geom, l_phys, ds.spec.dt, seed=seed, config=net)


TRAIN_FLAGS = {
    "epochs": "epochs", "q": "q", "lr": "lr", "batch_size": "batch_size", "decay_step": "decay_step",
    "decay_rate": "decay_rate", "noise": "noise", "stride": "stride", "pushforward": "pushforward",
    "spectral_weight": "spectral_weight", "seed": "seed",
}


def _train_configs(args) -> tuple[TrainingConfig, NetConfig, str]:
    cfg = _load_config(args.config)
    unknown = sorted(set(cfg) - {"training", "net", "prior"})
    if unknown:
        raise UsageError(f"config: unknown section(s) {', '.join(unknown)}")
    tr = dict(cfg.get("training", {}))
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            tr[key] = v
    for flag in ("freeze_neural", "freeze_correction", "freeze_residual"):
        if getattr(args, flag):
            tr[flag] = True
    net = dict(cfg.get("net", {}))
    if args.width is not None:
        net["width"] = args.width
    if args.layers is not None:
        net["layers"] = args.layers
    prior = args.prior or cfg.get("prior", "geometric")
    if prior not in ("geometric", "full"):
        raise UsageError(f"prior: unknown value {prior!r}")
    return _build(TrainingConfig, tr, "training"), _build(NetConfig, net, "net"), prior


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    tcfg, ncfg, prior = _train_configs(args)
    data = Path(args.data)
    ds = load_dataset(data)
    out = Path(args.out) if args.out else data / "train"
    out.mkdir(parents=True, exist_ok=True)
    model = _model_for(ds, prior, ncfg, tcfg.seed)
    model.extra_meta = {"prior": prior}
    ckpt = out / "checkpoint.dgm"
    metrics = out / "metrics.csv"
    meta = run_metadata(tcfg, model)
    meta["prior"] = prior
    save_run_metadata(meta, out / "run_metadata.json")
    inputs = [data / "manifest.json"] + ([args.config] if args.config else [])
    try:
        res = train(tcfg, ds.train, model, metrics_path=metrics, checkpoint_path=ckpt,
                    progress=(lambda r: print(f"epoch {r['epoch']} loss {r['train_loss']:.6g} val_rne {r['val_rne']:.6g}")) if args.verbose else None)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            model.store.values[:] = exc.last_good.values
            model.save(out / "checkpoint_last_good.dgm", tcfg.seed)
        log.error("training diverged: %s", exc)
        write_manifest(out, "train", {**meta, "status": "diverged"}, {"seed": tcfg.seed}, inputs, [out / "checkpoint_last_good.dgm"], t0)
        return EXIT_NUMERICAL
    meta.update(best_epoch=res.best_epoch, best_val_rne=res.best_val_rne, baseline_val_rne=res.baseline_val_rne)
    save_run_metadata(meta, out / "run_metadata.json")
    write_manifest(out, "train", meta, {"seed": tcfg.seed}, inputs, [ckpt, metrics, out / "run_metadata.json"], t0)
    print(f"best val RNE {res.best_val_rne:.6g} (physics-only {res.baseline_val_rne:.6g}); checkpoint {ckpt}")
    return EXIT_OK


def _split_metrics(ds, predict) -> dict:
    out = {}
    for split in SPLITS:
        rows = []
        for name, tr in zip(ds.files, ds.trajectories):
            if tr.meta.get("split") != split:
                continue
            pred = predict(tr)
            rows.append({"file": name, "mse": mse(pred, tr, skip_initial=True), "rne": rne(pred, tr, skip_initial=True)})
        out[split] = {
            "count": len(rows),
            "mse": float(np.mean([r["mse"] for r in rows])) if rows else None,
            "rne": float(np.mean([r["rne"] for r in rows])) if rows else None,
            "per_trajectory": rows,
        }
    return out


def _prior_from_checkpoint(path) -> str:
    meta, _ = container.read(path)
    return meta.get("prior", "geometric")


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    data = Path(args.data)
    ds = load_dataset(data)
    prior = args.prior or "geometric"
    report = {}
    if args.checkpoint == "oracle":
        report.update(_split_metrics(ds, lambda tr: tr.states))
    else:
        prior = args.prior or _prior_from_checkpoint(args.checkpoint)
        model = _model_for(ds, prior, checkpoint=args.checkpoint)
        st = model.stepper()
        report.update(_split_metrics(ds, lambda tr: model.predict(tr, st).states))
    base = _model_for(ds, prior, NetConfig(width=1, layers=1))
    base.use_correction = base.use_residual = False
    st = base.stepper()
    report["baseline_physics_only"] = _split_metrics(ds, lambda tr: base.predict(tr, st).states)
    report["prior"] = prior
    out = Path(args.out) if args.out else data / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    inputs = [data / "manifest.json"] + ([args.checkpoint] if args.checkpoint != "oracle" else [])
    write_manifest(out.parent, "eval", {"prior": prior, "checkpoint": args.checkpoint}, {}, inputs, [out], t0)
    for split in SPLITS:
        print(f"{split}: RNE {report[split]['rne']:.6g} (physics-only {report['baseline_physics_only'][split]['rne']:.6g})")
    return EXIT_OK


def cmd_rollout(args) -> int:
    t0 = time.perf_counter()
    data = Path(args.data)
    ds = load_dataset(data)
    prior = args.prior or _prior_from_checkpoint(args.checkpoint)
    model = _model_for(ds, prior, checkpoint=args.checkpoint)
    if not (0 <= args.index < len(ds.trajectories)):
        raise UsageError(f"--index must be in [0, {len(ds.trajectories) - 1}]")
    truth = ds.trajectories[args.index]
    pred = model.predict(truth)
    pred.meta.update(source=ds.files[args.index], role="prediction")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_trajectory(pred, out)
    write_manifest(out.parent, "rollout", {"index": args.index, "prior": prior}, {}, [data / "manifest.json", args.checkpoint], [out], t0)
    print(f"RNE {rne(pred, truth, skip_initial=True):.6g}; wrote {out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    t0 = time.perf_counter()
    data = Path(args.data)
    ds = load_dataset(data)
    prior = args.prior or _prior_from_checkpoint(args.checkpoint)
    model = _model_for(ds, prior, checkpoint=args.checkpoint)
    if args.field not in FIELDS:
        raise UsageError(f"--field must be one of {', '.join(FIELDS)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    l_neural = model.l_neural()
    rep = spectral_report(model.l_physics, l_neural, model.stepper(), weights=ds.mesh.control_volume)
    spec_csv, spec_json = export_spectrum(rep, out / "spectrum.csv")
    bundle = ds.spec.prior(prior)
    probe = truncation_probe(model.l_physics, l_neural, ds.mesh, FIELDS[args.field],
                             diffusivity=bundle.diffusivity, velocity=bundle.velocity, decay=bundle.decay)
    trunc = out / "truncation.json"
    trunc.write_text(json.dumps(probe.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    prov = {"checkpoint": str(args.checkpoint), "mesh_checksum": ds.mesh.checksum()}
    heat_n = export_triplets(l_neural, out / "l_neural.txt", {**prov, "operator": "L_neural"})
    heat_p = export_triplets(model.l_physics, out / "l_physics.txt", {**prov, "operator": "L_physics"})
    outputs = [spec_csv, spec_json, trunc, heat_n, heat_p]
    write_manifest(out, "diagnose", {"field": args.field, "prior": prior}, {}, [data / "manifest.json", args.checkpoint], outputs, t0)
    print(f"mu2(L) = {rep.mu2:.6g}, contraction = {rep.contraction:.6g}; "
          f"truncation {probe.norm_physics:.6g} -> {probe.norm_hybrid:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greenmesh", description="Discrete Green-operator hybrid solver on triangle meshes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--scenario", default="laser-desk")
    g.add_argument("--config", help="JSON file with scenario overrides")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=8)
    g.add_argument("--n-seen", type=int, default=4)
    g.add_argument("--n-unseen", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the hybrid model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--config", help="JSON file with 'training', 'net' and 'prior' sections")
    t.add_argument("--epochs", type=int)
    t.add_argument("--q", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--decay-step", type=int)
    t.add_argument("--decay-rate", type=float)
    t.add_argument("--noise", type=float)
    t.add_argument("--stride", type=int)
    t.add_argument("--pushforward", choices=["full", "detached"])
    t.add_argument("--spectral-weight", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--prior", choices=["geometric", "full"])
    t.add_argument("--freeze-neural", action="store_true")
    t.add_argument("--freeze-correction", action="store_true")
    t.add_argument("--freeze-residual", action="store_true")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test splits")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True, help="checkpoint file, or 'oracle' to replay ground truth")
    e.add_argument("--prior", choices=["geometric", "full"])
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="predict one trajectory with a checkpoint")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--prior", choices=["geometric", "full"])
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    d = sub.add_parser("diagnose", help="export spectra, truncation residuals and operator heatmaps")
    d.add_argument("--data", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--field", default="quadratic")
    d.add_argument("--prior", choices=["geometric", "full"])
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    level = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}
    try:
        verbosity = int(os.environ.get("GREENMESH_VERBOSITY", "0"))
    except ValueError:
        verbosity = 0
    logging.basicConfig(level=level.get(verbosity, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FactorizationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, container.ContainerError, KeyError, MeshMismatchError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
