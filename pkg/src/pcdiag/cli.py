"""Config-driven command-line harness: dataset generation, training,
diagnosis, targeted attacks, and paired with/without-architecture studies.

Every command is a pure function of (config bytes, input files, seed);
reruns produce byte-identical outputs. Exit codes: 0 ok, 2 config/contract,
3 I/O, 4 training divergence, 5 attack reliability.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import diagnostics as diag
from . import nets
from .errors import (CalibrationError, ConfigError, ContractError,
                     CorruptionError, CountError, DegeneracyError,
                     DimensionError, DivergenceError, FormatError, GuardError,
                     MaskError, ParseError, ReliabilityError, SpecError)

METRIC_CHOICES = ("discarding", "concentration", "rotation", "adversarial",
                  "neighborhood", "all")

# delta sign rule per metric (Table-style conventions): utilities where
# higher is better use with - without; non-robustness/inconsistency use
# without - with, so delta > 0 always means the module helped
_DELTA_RULES = {
    "information_discarding": "with-without",
    "information_concentration": "with-without",
    "adversarial_robustness": "with-without",
    "rotation_non_robustness": "without-with",
    "neighborhood_inconsistency": "without-with",
}

# published reference comparisons (ModelNet40 column) shown for context
# when --paper-refs is set; display only, never an acceptance target
_REFERENCE_COMPARISONS = {
    "arch1": {"adversarial_robustness": (2.878, 2.629, 0.249)},
    "arch2": {"rotation_non_robustness": (4.875, 5.066, 0.191)},
    "arch3": {"adversarial_robustness": (2.526, 2.521, 0.005),
              "neighborhood_inconsistency": (3.184, 3.332, 0.148)},
    "arch4": {"rotation_non_robustness": (3.931, 7.274, 3.343)},
}


def _load_json(path):
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _effective_seed(args, cfg):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    if cfg is None or "seed" not in cfg:
        raise ConfigError("config missing field 'seed' (or pass --seed)")
    return int(cfg["seed"])


def _dataset_config(cfg, seed):
    section = cfg.get("dataset")
    if not isinstance(section, dict) or "build" not in section:
        raise ConfigError("config missing field 'dataset.build'")
    build = dict(section["build"])
    build["seed"] = seed
    return datamod.DatasetConfig.from_dict(build)


def _load_dataset(cfg, seed):
    section = cfg.get("dataset")
    if not isinstance(section, dict):
        raise ConfigError("config missing field 'dataset'")
    if "manifest" in section:
        dataset, _ = datamod.load_manifest(section["manifest"])
        return dataset
    if "build" in section:
        return datamod.build_in_memory(_dataset_config(cfg, seed))
    raise ConfigError("dataset section needs 'manifest' or 'build'")


def _resolve_spec(model_cfg):
    if model_cfg is None:
        model_cfg = {}
    classes = int(model_cfg.get("classes", 6))
    s = model_cfg.get("spec", "baseline")
    if s == "baseline":
        spec = nets.desk_baseline_spec(classes)
    elif s == "multiscale":
        spec = nets.desk_multiscale_spec(classes, extra_scale=False)
    elif isinstance(s, dict):
        spec = nets.spec_from_dict(s)
    else:
        raise ConfigError(f"unknown model spec {s!r}")
    for toggle in model_cfg.get("toggles", []):
        spec = nets.with_architecture(spec, toggle)
    return spec


def _train_config(cfg, seed):
    t = cfg.get("training", {})
    known = {"epochs", "batch", "lr", "optimizer", "rotation_mode"}
    unknown = set(t) - known
    if unknown:
        raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
    return nets.TrainConfig(epochs=int(t.get("epochs", 30)),
                            batch=int(t.get("batch", 16)),
                            lr=float(t.get("lr", 0.01)),
                            optimizer=t.get("optimizer", "adam"),
                            rotation_mode=t.get("rotation_mode", "none"),
                            seed=seed)


def _diag_config(cfg):
    d = cfg.get("diagnosis", {}) if cfg else {}
    try:
        sigma = diag.SigmaOptConfig(**d.get("sigma", {}))
        attack = diag.AttackConfig(**d.get("attack", {}))
    except TypeError as exc:
        raise ConfigError(f"bad diagnosis config: {exc}") from exc
    return diag.DiagnosisConfig(
        samples=int(d.get("samples", 8)), sigma=sigma, attack=attack,
        rotations=int(d.get("rotations", 4)),
        rotation_mode=d.get("rotation_mode", "so3"),
        neighborhood_k=int(d.get("neighborhood_k", 16)))


def _parse_metrics(raw):
    names = [m.strip() for m in raw.split(",")] if isinstance(raw, str) else list(raw)
    for m in names:
        if m not in METRIC_CHOICES:
            raise ConfigError(f"unknown metric {m!r}; choose from {METRIC_CHOICES}")
    if "all" in names:
        return list(diag.METRICS)
    return names


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    cfg = _load_json(args.config)
    seed = _effective_seed(args, cfg)
    dcfg = _dataset_config(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = datamod.build_dataset(dcfg, out)
    n_files = sum(len(v) for v in manifest["splits"].values())
    print(f"wrote {n_files} clouds and manifest.json under {out}")


def cmd_train(args):
    cfg = _load_json(args.config)
    seed = _effective_seed(args, cfg)
    dataset = _load_dataset(cfg, seed)
    spec = _resolve_spec(cfg.get("model"))
    model = nets.build_classifier(spec, seed)
    tcfg = _train_config(cfg, seed)
    log_path = Path(str(args.out) + ".log.csv")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as fh:
        fh.write("epoch,loss,train_acc,test_acc\n")

        def writerow(row):
            fh.write(f"{row['epoch']},{row['loss']!r},"
                     f"{row['train_acc']!r},{row['test_acc']!r}\n")
            fh.flush()

        nets.train(model, dataset, tcfg, epoch_callback=writerow)
    nets.save_checkpoint(model, args.out, tcfg)
    print(f"checkpoint at {args.out}, log at {log_path}")


def _diagnosis_samples(dataset, count):
    clouds = [cloud for cloud, _ in dataset.test] or \
             [cloud for cloud, _ in dataset.train]
    return clouds[:count]


def cmd_diagnose(args):
    cfg = _load_json(args.config) if args.config else None
    seed = _effective_seed(args, cfg)
    model, _ = nets.load_checkpoint(args.ckpt)
    dataset, _ = datamod.load_manifest(args.data)
    metrics = _parse_metrics(args.metrics)
    dcfg = _diag_config(cfg)
    samples = _diagnosis_samples(dataset, dcfg.samples)
    if "concentration" in metrics:
        for i, cloud in enumerate(samples):
            if cloud.fg_mask is None:
                raise MaskError(
                    f"sample {i} has no foreground mask; regenerate the dataset "
                    "with background composition to measure concentration")
    report = diag.diagnose(model, samples, metrics, dcfg, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    _write_csv(out.with_suffix(".csv"), ("model_id", "metric", "value"),
               report.csv_rows())
    print(f"report at {out}")


def cmd_attack(args):
    cfg = _load_json(args.config) if args.config else None
    seed = _effective_seed(args, cfg)
    model, _ = nets.load_checkpoint(args.ckpt)
    dataset, _ = datamod.load_manifest(args.data)
    dcfg = _diag_config(cfg)
    samples = _diagnosis_samples(dataset, dcfg.samples)

    rows = []
    for i, cloud in enumerate(samples):
        true_label = cloud.label
        if args.target == "all":
            targets = [t for t in range(model.classes) if t != true_label]
        else:
            t = int(args.target)
            if t == true_label:
                raise ContractError(
                    f"sample {i}: target {t} equals the true class")
            targets = [t]
        pred = diag._predict(model, cloud)
        for t in targets:
            if t == pred:
                rows.append({"sample": i, "target": t, "success": True, "l2": 0.0})
                continue
            res = diag.targeted_attack(model, cloud, t, dcfg.attack)
            rows.append({"sample": i, "target": t, "success": res.success,
                         "l2": res.l2})

    wins = [r for r in rows if r["success"]]
    fraction = len(wins) / len(rows) if rows else 0.0
    summary = {"success_fraction": fraction,
               "mean_l2": float(np.mean([r["l2"] for r in wins])) if wins else None,
               "seed": seed}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, {"rows": rows, "summary": summary})
    _write_csv(out.with_suffix(".csv"), ("sample", "target", "success", "l2"),
               [(r["sample"], r["target"], r["success"], r["l2"]) for r in rows])
    if fraction < 0.5:
        raise ReliabilityError(
            f"success fraction {fraction:.2f} < 0.5; report kept at {out}")
    print(f"attack report at {out}")


def cmd_compare(args):
    cfg = _load_json(args.config)
    seed = _effective_seed(args, cfg)
    study = cfg.get("study")
    if not isinstance(study, dict) or "arch" not in study:
        raise ConfigError("config missing field 'study.arch'")
    metrics = _parse_metrics(study.get("metrics", ["all"]))
    study_name = study.get("name", study["arch"])

    dataset = _load_dataset(cfg, seed)
    base_spec = _resolve_spec(cfg.get("model"))
    variant_specs = {"with": nets.with_architecture(base_spec, study),
                     "without": base_spec}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = _train_config(cfg, seed)
    dcfg = _diag_config(cfg)
    samples = _diagnosis_samples(dataset, dcfg.samples)

    reports = {}
    for variant, spec in variant_specs.items():
        model = nets.build_classifier(spec, seed)
        log = nets.train(model, dataset, tcfg)
        nets.save_checkpoint(model, out / f"{variant}.ckpt", tcfg)
        _write_csv(out / f"{variant}.log.csv",
                   ("epoch", "loss", "train_acc", "test_acc"),
                   [(r["epoch"], r["loss"], r["train_acc"], r["test_acc"])
                    for r in log])
        report = diag.diagnose(model, samples, metrics, dcfg, seed)
        (out / f"report_{variant}.json").write_text(report.to_json())
        reports[variant] = report

    table = []
    refs = _REFERENCE_COMPARISONS.get(study["arch"], {})
    for m in metrics:
        key = diag._REPORT_KEYS[m]
        vw = reports["with"].metrics[key]
        vo = reports["without"].metrics[key]
        rule = _DELTA_RULES[key]
        delta = vw - vo if rule == "with-without" else vo - vw
        row = {"study": study_name, "metric": key, "with": vw, "without": vo,
               "delta": delta, "delta_rule": rule}
        if args.paper_refs and key in refs:
            pw, po, pd = refs[key]
            row["reference"] = {"with": pw, "without": po, "delta": pd}
        table.append(row)

    _write_json(out / "comparison.json", {"study": study_name, "seed": seed,
                                          "rows": table})
    header = ["study", "metric", "with", "without", "delta", "delta_rule"]
    _write_csv(out / "comparison.csv", header,
               [(r["study"], r["metric"], r["with"], r["without"], r["delta"],
                 r["delta_rule"]) for r in table])
    for r in table:
        print(f"{r['study']} {r['metric']}: with={r['with']:.6g} "
              f"without={r['without']:.6g} delta={r['delta']:+.6g}")


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="pcdiag",
        description="Point-cloud network diagnosis harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diagnose", help="run metrics on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("compare", help="paired with/without-architecture study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--paper-refs", action="store_true", dest="paper_refs")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("attack", help="targeted attacks on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True, help="class index or 'all'")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_attack)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
        return 0
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ReliabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except (ConfigError, ContractError, SpecError, MaskError, CountError,
            DimensionError, CalibrationError, GuardError, DegeneracyError,
            ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, FormatError, CorruptionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
