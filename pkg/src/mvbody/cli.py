"""Command-line entry point.

Subcommands: synth, project, train, eval, explain, ablate. Every subcommand
takes --out (all outputs land there), an optional JSON --config, and --seed
which overrides the config seed everywhere. The resolved configuration is
echoed into the output directory, outputs are deterministic byte-for-byte
given identical inputs, and re-runs overwrite in place.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import explain as explain_mod
from . import meshproj, metrics, records, synth, train as train_mod
from .errors import (
    ConfigError,
    DataError,
    DegenerateError,
    DivergenceError,
    MvBodyError,
    NonFiniteError,
    ParamError,
    ParseError,
    SchemaError,
    SpecError,
    SplitError,
    StatsError,
    ValidationError,
    WeightImportError,
)
from .loss import LossConfig
from .net import ModelConfig, load_checkpoint

CONFIG_ERRORS = (ConfigError, SpecError, ParamError)
DATA_ERRORS = (ParseError, ValidationError, SchemaError, DataError, SplitError,
               StatsError, WeightImportError, ValueError, OSError)
NUMERIC_ERRORS = (DegenerateError, DivergenceError, NonFiniteError)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        with open(p) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _echo_config(out: Path, resolved: dict) -> None:
    _write_json(resolved, out / "config.json")


def _schema(cfg: dict) -> records.RecordSchema:
    races = cfg.get("schema", {}).get("races")
    return records.RecordSchema(races=tuple(races)) if races else records.RecordSchema()


def _gen_spec(cfg: dict, seed_override) -> synth.GenSpec:
    section = dict(cfg.get("gen", {}))
    if seed_override is not None:
        section["seed"] = seed_override
    if "coefficients" in section:
        section["coefficients"] = dict(section["coefficients"])
    return synth.GenSpec(**section).validate()


def _view_config(cfg: dict, default_size: int) -> meshproj.ViewConfig:
    section = dict(cfg.get("view", {}))
    section.setdefault("image_size", default_size)
    section.setdefault("channels", 1)  # projections are grayscale on disk
    return meshproj.ViewConfig(**section).validate()


def _model_config(cfg: dict, d: int, image_size: int | None = None) -> ModelConfig:
    section = dict(cfg.get("model", {}))
    section["d"] = d
    if image_size is not None:
        if "image_size" in section and section["image_size"] != image_size:
            raise ConfigError(
                f"model.image_size {section['image_size']} != rendered projection size {image_size}"
            )
        section["image_size"] = image_size
    if "conv_widths" in section:
        section["conv_widths"] = tuple(section["conv_widths"])
    return ModelConfig(**section).validate()


def _train_config(cfg: dict, model: ModelConfig, seed_override) -> train_mod.TrainConfig:
    section = dict(cfg.get("train", {}))
    loss_section = dict(cfg.get("loss", {}))
    if "class_weights" in loss_section and loss_section["class_weights"] is not None:
        loss_section["class_weights"] = tuple(loss_section["class_weights"])
    if seed_override is not None:
        section["seed"] = seed_override
    return train_mod.TrainConfig(model=model, loss=LossConfig(**loss_section), **section).validate()


def _load_dataset(data_dir: Path):
    manifest = records.load_manifest(data_dir / "manifest.json")
    recs = records.parse_records(data_dir / manifest.records_csv)
    return manifest, recs


def _projection_size(data_dir: Path, manifest) -> int:
    first = Path(manifest.entries[0].proj_dir)
    if not first.is_absolute():
        first = data_dir / first
    with open(first / "manifest.json") as fh:
        return int(json.load(fh)["image_size"])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _load_config(args.config)
    if args.n_participants:
        cfg.setdefault("gen", {})["n_participants"] = args.n_participants
    spec = _gen_spec(cfg, args.seed)
    ds = synth.generate_dataset(spec)

    (out / "meshes").mkdir(exist_ok=True)
    entries = []
    for scan in ds.scans:
        meshproj.write_obj(scan.mesh, out / "meshes" / f"{scan.scan_id}.obj")
        entries.append(records.ScanEntry(
            participant_id=scan.participant_id,
            scan_id=scan.scan_id,
            proj_dir=f"projections/{scan.scan_id}",
        ))
    records.write_records_csv(ds.records, out / "records.csv")
    records.save_manifest(records.DatasetManifest(records_csv="records.csv", entries=tuple(entries)),
                          out / "manifest.json")
    _write_json(ds.ground_truth, out / "ground_truth.json")
    _echo_config(out, {"gen": {**spec.__dict__, "coefficients": dict(spec.coefficients)}})
    print(f"synth: {len(ds.records)} participants, {len(ds.scans)} scans -> {out}")
    return 0


def cmd_project(args) -> int:
    data_dir = Path(args.data)
    out = Path(args.out) if args.out else data_dir
    cfg = _load_config(args.config)
    view_cfg = _view_config(cfg, args.image_size)
    manifest, _ = _load_dataset(data_dir)
    for e in manifest.entries:
        mesh = meshproj.load_mesh(data_dir / "meshes" / f"{e.scan_id}.obj")
        transform = meshproj.normalization_transform(mesh)
        views = meshproj.render_views(meshproj.normalize_mesh(mesh), view_cfg)
        meshproj.export_views(views, out / e.proj_dir, e.scan_id, transform)
    _echo_config(out, {"view": view_cfg.__dict__})
    print(f"project: rendered {len(manifest.entries)} scans at {view_cfg.image_size}px -> {out}")
    return 0


def _prepare_training(args, cfg):
    data_dir = Path(args.data)
    manifest, recs = _load_dataset(data_dir)
    records.validate_manifest(manifest, data_dir)
    schema = _schema(cfg)
    proj_size = _projection_size(data_dir, manifest)
    model_cfg = _model_config(cfg, schema.d, proj_size)
    tcfg = _train_config(cfg, model_cfg, args.seed)
    split_section = cfg.get("split", {})
    split_seed = args.seed if args.seed is not None else int(split_section.get("seed", tcfg.seed))
    labels = records.labels_from_records(recs)
    plan = records.make_splits(
        labels,
        seed=split_seed,
        n_folds=int(split_section.get("n_folds", 5)),
        test_frac=float(split_section.get("test_frac", 0.25)),
    )
    data = train_mod.load_scan_data(manifest, recs, data_dir, tcfg.mask, schema)
    return data_dir, data, tcfg, plan, schema


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _load_config(args.config)
    _, data, tcfg, plan, schema = _prepare_training(args, cfg)
    _write_json(plan.to_json(), out / "split.json")
    _echo_config(out, {"train": tcfg.to_json(), "split": plan.to_json()["seed"]})

    if args.cv:
        results, pooled, _ = train_mod.cross_validate(data, plan.cv_folds, tcfg,
                                                      forbidden_pids=plan.test_participants)
        for res in results:
            train_mod.write_jsonl(res.log, out / f"fold{res.fold_index}.log.jsonl")
            train_mod.save_fold_checkpoint(out / f"fold{res.fold_index}.mvb", tcfg, res)
            metrics.save_report(res.val_report, out / f"fold{res.fold_index}.val_report.json")
        metrics.save_report(pooled, out / "cv_report.json")
        print(metrics.TABLE_HEADER)
        print(pooled.table_row("mvbody (pooled CV)"))
    else:
        train_pids, val_pids = plan.cv_folds[0]
        res = train_mod.train_fold(data, train_pids, val_pids, tcfg,
                                   forbidden_pids=plan.test_participants)
        train_mod.write_jsonl(res.log, out / "train.log.jsonl")
        train_mod.save_fold_checkpoint(out / "checkpoint.mvb", tcfg, res)
        metrics.save_report(res.val_report, out / "val_report.json")
        print(metrics.TABLE_HEADER)
        print(res.val_report.table_row("mvbody (validation)"))
    return 0


def _restore_from_checkpoint(ck_path: Path, dtype=np.float32):
    model, centers, header = load_checkpoint(ck_path, dtype=dtype)
    stats = records.NormalizationStats.from_json(header["normalization_stats"])
    tcfg_json = header["train_config"]
    return model, centers, stats, tcfg_json, header


def _subset_pids(plan: records.SplitPlan, subset: str):
    if subset == "test":
        return list(plan.test_participants)
    if subset == "val":
        return list(plan.cv_folds[0][1])
    if subset == "cv":
        return sorted({p for tr, va in plan.cv_folds for p in va})
    raise ConfigError(f"unknown subset {subset!r}")


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data)
    model, _, stats, tcfg_json, header = _restore_from_checkpoint(Path(args.checkpoint))
    manifest, recs = _load_dataset(data_dir)
    schema = _schema(_load_config(args.config))
    data = train_mod.load_scan_data(manifest, recs, data_dir, tcfg_json["mask"], schema)
    plan = records.SplitPlan.from_json(json.loads(Path(args.split).read_text()))
    pids = _subset_pids(plan, args.subset)
    med = train_mod._med_matrix(data, stats)
    report, scores = train_mod.evaluate_participants(model, data, med, pids,
                                                     tcfg_json.get("threshold", 0.5))
    metrics.save_report(report, out / "report.json")
    _write_json({"scores": [{"participant_id": p, "score": s} for p, s in scores]},
                out / "scores.json")
    table = metrics.TABLE_HEADER + "\n" + report.table_row(f"mvbody ({args.subset})")
    (out / "report.txt").write_text(table + "\n")
    _echo_config(out, {"eval": {"checkpoint": str(args.checkpoint), "subset": args.subset,
                                "threshold": tcfg_json.get("threshold", 0.5)}})
    print(table)
    return 0


def cmd_explain(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data)
    cfg = _load_config(args.config)
    att_section = dict(cfg.get("attribution", {}))
    if args.steps:
        att_section["steps"] = args.steps
    acfg = explain_mod.AttributionConfig(**att_section).validate()
    # IG runs in float64: quadrature and completeness checks stay clean
    model, _, stats, tcfg_json, _ = _restore_from_checkpoint(Path(args.checkpoint), dtype=np.float64)
    manifest, recs = _load_dataset(data_dir)
    schema = _schema(cfg)
    data = train_mod.load_scan_data(manifest, recs, data_dir, tcfg_json["mask"], schema)
    plan = records.SplitPlan.from_json(json.loads(Path(args.split).read_text()))
    pids = set(_subset_pids(plan, args.subset))
    med = train_mod._med_matrix(data, stats)

    idx = [i for i, p in enumerate(data.scan_pids) if p in pids][: args.limit]
    if not idx:
        raise DataError(f"no scans in subset {args.subset!r}")
    rows, recs_aligned = [], []
    for i in idx:
        views = np.repeat(data.views[i][..., None], model.cfg.channels, axis=-1).astype(np.float64)
        mvec = med[data.scan_pids[i]].astype(np.float64)
        rows.append(explain_mod.integrated_gradients(model, views, mvec, acfg,
                                                     sample_id=data.scan_ids[i]))
        recs_aligned.append(data.records[data.scan_pids[i]])
    manifest_out = explain_mod.export_reports(rows, recs_aligned, out, acfg,
                                              checkpoint_hash=_sha256(Path(args.checkpoint)),
                                              schema=schema, split_used=args.subset)
    _echo_config(out, {"attribution": att_section, "subset": args.subset, "limit": args.limit})
    bad = [s["sample_id"] for s in manifest_out["samples"] if not s["accepted"]]
    if bad:
        print(f"warning: completeness residual above tolerance for {len(bad)} sample(s): "
              f"{bad[:5]}", file=sys.stderr)
    print(f"explain: {len(rows)} samples -> {out} (top features: {manifest_out['feature_ranking'][:3]})")
    return 0


def cmd_ablate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _load_config(args.config)
    data_dir, data, tcfg, plan, schema = _prepare_training(args, cfg)
    train_pids, val_pids = plan.cv_folds[0]
    manifest, recs = _load_dataset(data_dir)

    comp_rows = []
    for name, row_cfg in train_mod.component_configs(tcfg):
        res = train_mod.train_fold(data, train_pids, val_pids, row_cfg,
                                   forbidden_pids=plan.test_participants)
        comp_rows.append((name, res.val_report))
    mask_rows = []
    for name, row_cfg in train_mod.mask_configs(tcfg):
        masked = train_mod.load_scan_data(manifest, recs, data_dir, name, schema)
        res = train_mod.train_fold(masked, train_pids, val_pids, row_cfg,
                                   forbidden_pids=plan.test_participants)
        mask_rows.append((name, res.val_report))

    for fname, rows in (("component_table", comp_rows), ("mask_table", mask_rows)):
        lines = [metrics.TABLE_HEADER] + [rep.table_row(name) for name, rep in rows]
        (out / f"{fname}.txt").write_text("\n".join(lines) + "\n")
        _write_json({"rows": [{"name": name, "report": rep.to_json()} for name, rep in rows]},
                    out / f"{fname}.json")
        print("\n".join(lines))
    _echo_config(out, {"train": tcfg.to_json()})
    return 0


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvbody", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out_required=True):
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override every config seed")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory (synth output)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--n-participants", type=int, help="override gen.n_participants")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("project", help="render 12-view projections for every scan")
    common(sp, out_required=False)  # defaults to the dataset directory
    sp.add_argument("--image-size", type=int, default=32, help="projection resolution")
    sp.set_defaults(fn=cmd_project)

    sp = sub.add_parser("train", help="train the model (single split or --cv)")
    common(sp)
    sp.add_argument("--cv", action="store_true", help="5-fold cross-validation")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a participant subset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", required=True, help="split.json from training")
    sp.add_argument("--subset", default="test", choices=["test", "val", "cv"])
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("explain", help="integrated-gradients attributions + exports")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--subset", default="val", choices=["test", "val", "cv"])
    sp.add_argument("--steps", type=int, help="override attribution steps")
    sp.add_argument("--limit", type=int, default=20, help="max scans to attribute")
    sp.set_defaults(fn=cmd_explain)

    sp = sub.add_parser("ablate", help="component (5-row) and mask (4-row) matrices")
    common(sp)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CONFIG_ERRORS as e:
        print(f"error (config): {e}", file=sys.stderr)
        return 2
    except DATA_ERRORS as e:
        print(f"error (data): {e}", file=sys.stderr)
        return 3
    except NUMERIC_ERRORS as e:
        print(f"error (numeric): {e}", file=sys.stderr)
        return 4
    except MvBodyError as e:  # anything else from the package
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
