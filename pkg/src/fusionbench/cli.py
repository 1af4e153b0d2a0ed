"""Config-driven experiment runner.

Verbs::

    fusionbench validate <config.json>
    fusionbench run <config.json> [--output-dir DIR]
    fusionbench compare <run_dir>... --baseline <run_dir> [--out DIR] [--svg]
    fusionbench plot <run_dir>... [--out DIR]
    fusionbench audit <run_dir>

Exit codes: 0 success, 2 invalid config, 3 runtime failure. Relative output
directories are resolved against ``$FUSIONBENCH_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import evalmetrics, perturb, synthdata
from .encoders import EncoderSpec, check_compatible
from .fusion import FUSION_TAGS
from .serialization import read_array, write_array, write_json
from .training import (STRUCTURES, MCTNBundle, MFMBundle, ModelBundle, TrainConfig,
                       TrainingDiverged, save_checkpoint, test, train_gradblend, train_mctn,
                       train_mfm, train_supervised)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "FUSIONBENCH_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message

    def to_json(self):
        return {"error": "config_invalid", "field": self.field, "message": self.message}


class RunError(RuntimeError):
    pass


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def dataset_hash(config):
    return hashlib.sha256(canonical_json(config["dataset"]).encode()).hexdigest()[:16]


# --- config validation -------------------------------------------------------

def load_data(section):
    if "path" in section:
        data = synthdata.load_dataset(section["path"])
    else:
        name = section.get("generator")
        if name not in synthdata.GENERATORS:
            raise ConfigError("dataset.generator",
                              f"unknown generator {name!r}; choose from {sorted(synthdata.GENERATORS)}")
        try:
            data = synthdata.generate(name, **section.get("args", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError("dataset.args", str(exc)) from exc
    noise = section.get("noise_modality")
    if noise:
        data = synthdata.append_noise_modality(data, **noise)
    return data


def _encoder_specs(config, data, seed_offset=0):
    section = config.get("encoders")
    if not isinstance(section, list) or len(section) != data.n_modalities:
        raise ConfigError("encoders", f"need one encoder per modality ({data.n_modalities})")
    specs = []
    for m, (entry, mspec) in enumerate(zip(section, data.specs)):
        entry = dict(entry)
        entry.setdefault("in_shape", list(mspec.shape))
        entry["seed"] = entry.get("seed", m) + seed_offset
        try:
            spec = EncoderSpec.from_json(entry)
            check_compatible(spec, mspec.kind)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"encoders[{m}]", str(exc)) from exc
        if spec.kind != "deep-set" and spec.in_shape != tuple(mspec.shape):
            raise ConfigError(f"encoders[{m}].in_shape",
                              f"{list(spec.in_shape)} does not match modality "
                              f"{mspec.name!r} shape {list(mspec.shape)}")
        specs.append(spec)
    return specs


def build_model(config, data, seed):
    """Instantiate the bundle for one seed, checking the encoder/fusion/head dims."""
    specs = _encoder_specs(config, data, seed)
    fusion = config.get("fusion", {})
    tag = fusion.get("tag")
    if tag not in FUSION_TAGS:
        raise ConfigError("fusion.tag", f"unknown fusion tag {tag!r}; choose from {FUSION_TAGS}")
    head = config.get("head", {})
    structure = config["training"].get("structure", "supervised")
    options = config["training"].get("options", {})
    common = dict(n_out=data.task.size, task_kind=data.task.kind,
                  head_hidden=tuple(head.get("hidden", ())), seed=seed)
    try:
        if structure == "mctn":
            model = MCTNBundle(specs, decoder_hidden=tuple(options.get("decoder_hidden", (32,))),
                               **common)
        elif structure == "mfm":
            model = MFMBundle(specs, tag, fusion_params=fusion.get("params"),
                              private_dim=options.get("private_dim", 4),
                              decoder_hidden=tuple(options.get("decoder_hidden", (32,))),
                              **common)
        else:
            model = ModelBundle(specs, tag, fusion_params=fusion.get("params"), **common)
    except (TypeError, ValueError) as exc:
        raise ConfigError("fusion", str(exc)) from exc
    fused_dim = model.head.net[0].in_features
    if "in_dim" in head and head["in_dim"] != fused_dim:
        raise ConfigError("head.in_dim", f"head.in_dim={head['in_dim']} does not match the "
                                         f"fusion output dim {fused_dim}")
    return model


def validate_config(config):
    """Check every section; returns the generated dataset. Raises :class:`ConfigError`."""
    if not isinstance(config, dict):
        raise ConfigError("", "config must be a JSON object")
    if config.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}")
    for key in ("dataset", "encoders", "fusion", "training", "seeds"):
        if key not in config:
            raise ConfigError(key, "missing section")
    training = config["training"]
    structure = training.get("structure", "supervised")
    if structure not in STRUCTURES:
        raise ConfigError("training.structure", f"unknown structure {structure!r}")
    try:
        TrainConfig.from_json(training.get("config", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError("training.config", str(exc)) from exc
    seeds = config["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "seeds must be unique")
    for i, term in enumerate(config.get("objective", [])):
        allowed = ("task", "cca", "refnet", "mfm", "cycle")
        if term.get("name") not in allowed:
            raise ConfigError(f"objective[{i}].name", f"unknown term {term.get('name')!r}")
        if term.get("weight", 1.0) < 0:
            raise ConfigError(f"objective[{i}].weight", "must be non-negative")
    data = load_data(config["dataset"])
    build_model(config, data, config["seeds"][0])
    rob = config.get("robustness", {})
    try:
        perturb.build_noisy_grid(data.test, data.specs, rob.get("families"),
                                 rob.get("levels", perturb.DEFAULT_LEVELS),
                                 rob.get("multimodal_family", "auto"), rob.get("seed", 0))
    except (ValueError, KeyError) as exc:
        raise ConfigError("robustness", str(exc)) from exc
    return data


# --- run -----------------------------------------------------------------------

def resolve_output(path):
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _train(model, data, config, seed):
    training = config["training"]
    cfg = TrainConfig.from_json({**training.get("config", {}), "seed": seed})
    structure = training.get("structure", "supervised")
    options = training.get("options", {})
    terms = [t for t in config.get("objective", []) if t["name"] in ("task", "cca", "refnet")]
    if structure == "gradblend":
        return train_gradblend(model, data, cfg, weights=options.get("weights"))
    if structure == "mctn":
        return train_mctn(model, data, cfg)
    if structure == "mfm":
        lam = next((t.get("lambda", t.get("weight", 0.1)) for t in config.get("objective", [])
                    if t["name"] == "mfm"), options.get("lambda", 0.1))
        return train_mfm(model, data, cfg, lam=lam)
    return train_supervised(model, data, cfg, terms or None)


def _write_predictions(directory, preds):
    """Raw little-endian prediction arrays plus an index; ``preds`` maps key -> array."""
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, (key, arr) in enumerate(sorted(preds.items())):
        arr = np.asarray(arr)
        arr = arr.astype(np.int64) if np.issubdtype(arr.dtype, np.integer) else arr.astype(np.float64)
        fname = f"{i:04d}.bin"
        index[key] = {"file": fname, **write_array(directory / fname, arr)}
    write_json(directory / "index.json", index)


def read_predictions(directory):
    index = json.loads((directory / "index.json").read_text())
    return {k: read_array(directory / v["file"], v["dtype"], v["shape"]) for k, v in index.items()}


def _grid_key(partition, i, part):
    return f"grid/{partition}/{i}/{part}"


def run_seed(config, data, seed, seed_dir):
    """Train, test and persist one seed; returns the deterministic metrics entry."""
    model = build_model(config, data, seed)
    result = _train(model, data, config, seed)
    rob = config.get("robustness", {})
    performance, complexity, curves = test(model, data, rob, result.train_time_s)
    seed_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, seed_dir / "checkpoint")
    write_json(seed_dir / "history.json", result.history)

    grid = perturb.build_noisy_grid(data.test, data.specs, rob.get("families"),
                                    rob.get("levels", perturb.DEFAULT_LEVELS),
                                    rob.get("multimodal_family", "auto"), rob.get("seed", 0),
                                    rob.get("params"))
    preds = {"labels": data.test.labels}
    pred, scores = model.predict(data.test.modalities)
    preds["clean/pred"] = pred
    if scores is not None:
        preds["clean/scores"] = scores
    for partition in grid.partitions:
        for i, level in enumerate(grid.levels):
            p, s = model.predict(grid.get(partition, level))
            preds[_grid_key(partition, i, "pred")] = p
            if s is not None:
                preds[_grid_key(partition, i, "scores")] = s
    _write_predictions(seed_dir / "predictions", preds)

    curves_dir = seed_dir / "curves"
    curves_dir.mkdir(exist_ok=True)
    for name, curve in curves.items():
        curve.to_csv(curves_dir / f"{name}.csv")
    train_count, inference_count = model.param_counts()
    entry = {
        "status": "ok",
        "performance": performance.to_json(),
        "param_counts": {"train": train_count, "inference": inference_count},
        "robustness": {name: c.to_json() for name, c in curves.items()},
        "robustness_reason": grid.reason,
        "best_epoch": result.history["best_epoch"],
    }
    if result.blend_weights is not None:
        entry["blend_weights"] = list(result.blend_weights.weights)
    write_json(seed_dir / "reports.json", {
        "performance": performance.to_json(),
        "complexity": complexity.to_json(),
        "robustness": {name: c.to_json() for name, c in curves.items()},
        "robustness_reason": grid.reason,
        "task": {"kind": data.task.kind, "size": data.task.size},
    })
    return entry


def summarize(seed_entries):
    """Mean and population std of every performance metric over successful seeds."""
    ok = [e for e in seed_entries.values() if e["status"] == "ok"]
    if not ok:
        return {}
    metrics = ok[0]["performance"]["metrics"]
    out = {}
    for name in sorted(metrics):
        vals = np.array([e["performance"]["metrics"][name] for e in ok], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def run_experiment(config, output_dir=None, config_path=None):
    """Run every seed of ``config`` and persist the results; returns the run directory.

    The manifest is written last, so a directory without one is an unfinished run.
    """
    torch.use_deterministic_algorithms(True)
    data = validate_config(config)
    out = resolve_output(output_dir or config.get("output_dir", "runs/run"))
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    text = canonical_json(config)
    (out / "config.json").write_text(text)
    digest = hashlib.sha256(text.encode()).hexdigest()
    seeds = {}
    timings = {}
    for seed in config["seeds"]:
        seed_dir = out / f"seed_{seed}"
        if seed_dir.exists():
            shutil.rmtree(seed_dir)
        try:
            seeds[str(seed)] = run_seed(config, data, seed, seed_dir)
            timings[str(seed)] = json.loads((seed_dir / "reports.json").read_text())["complexity"]
        except TrainingDiverged as exc:
            seed_dir.mkdir(parents=True, exist_ok=True)
            write_json(seed_dir / "error.json", {"error": "diverged", "message": str(exc)})
            seeds[str(seed)] = {"status": "diverged", "message": str(exc)}
    metrics = {"config_hash": digest, "dataset": dataset_hash(config), "seeds": seeds,
               "summary": summarize(seeds)}
    write_json(out / "metrics.json", metrics)
    if not any(e["status"] == "ok" for e in seeds.values()):
        raise RunError("every seed failed; see seed_*/error.json")
    write_json(manifest_path, {
        "config_hash": digest,
        "seeds": config["seeds"],
        "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()),
        "completed_unix": time.time(),
    })
    return out


# --- reading runs ----------------------------------------------------------------

def load_run(run_dir):
    run_dir = Path(run_dir)
    if not (run_dir / "manifest.json").exists():
        raise RunError(f"{run_dir} has no manifest.json; the run is missing or incomplete")
    config = json.loads((run_dir / "config.json").read_text())
    metrics = json.loads((run_dir / "metrics.json").read_text())
    manifest = json.loads((run_dir / "manifest.json").read_text())
    if config_hash(config) != manifest["config_hash"]:
        raise RunError(f"{run_dir}: stored config does not match its hash")
    reports = {}
    for seed in manifest["seeds"]:
        path = run_dir / f"seed_{seed}" / "reports.json"
        if path.exists():
            reports[str(seed)] = json.loads(path.read_text())
    return {"dir": run_dir, "config": config, "metrics": metrics, "reports": reports,
            "name": config.get("name") or run_dir.name}


def _ok_seeds(run):
    return [k for k, e in run["metrics"]["seeds"].items() if e["status"] == "ok"]


def mean_curves(run):
    """Seed-averaged robustness curve per partition."""
    seeds = _ok_seeds(run)
    first = run["metrics"]["seeds"][seeds[0]]["robustness"]
    curves = {}
    for partition, obj in first.items():
        values = np.mean([run["metrics"]["seeds"][s]["robustness"][partition]["values"]
                          for s in seeds], axis=0)
        curves[partition] = evalmetrics.RobustnessCurve(partition, obj["sigmas"],
                                                        [float(v) for v in values])
    return curves


def _primary(run):
    seeds = _ok_seeds(run)
    kind = run["metrics"]["seeds"][seeds[0]]["performance"]["task_kind"]
    metric = evalmetrics.primary_metric(kind)
    value = float(np.mean([run["metrics"]["seeds"][s]["performance"]["metrics"][metric]
                           for s in seeds]))
    return metric, value


def _train_time(run):
    return float(np.mean([r["complexity"]["train_time_s"] for r in run["reports"].values()]))


def compare(run_dirs, baseline_dir, out_dir, svg=False):
    """Leaderboard of min-max aggregated performance, complexity relative to the
    baseline's training time, and tau / rho against the baseline's curves."""
    baseline = load_run(baseline_dir)
    runs = [load_run(d) for d in run_dirs]
    if all(Path(r["dir"]).resolve() != Path(baseline["dir"]).resolve() for r in runs):
        runs.append(baseline)
    names = [r["name"] for r in runs]
    if len(set(names)) != len(names):
        names = [str(r["dir"]) for r in runs]
        for r, n in zip(runs, names):
            r["name"] = n
    results, directions = {}, {}
    for run in runs:
        task = run["metrics"]["dataset"]
        metric, value = _primary(run)
        results.setdefault(task, {})[run["name"]] = value
        directions[task] = "min" if metric in evalmetrics.LOWER_IS_BETTER else "max"
    if len(runs) >= 2:
        scores = evalmetrics.aggregate_minmax({t: c for t, c in results.items() if len(c) >= 2}
                                              or results, directions)
    else:
        scores = {runs[0]["name"]: 1.0}
    base_curves = mean_curves(baseline)
    base_time = _train_time(baseline)
    rows, rob_rows = [], []
    for run in runs:
        metric, value = _primary(run)
        higher = metric not in evalmetrics.LOWER_IS_BETTER
        if run["metrics"]["dataset"] != baseline["metrics"]["dataset"]:
            raise RunError(f"{run['dir']} uses a different dataset from the baseline")
        taus, rhos = [], []
        for partition, curve in mean_curves(run).items():
            if partition not in base_curves:
                continue
            s = evalmetrics.robustness_scores(curve, base_curves[partition], higher)
            taus.append(s.tau)
            rhos.append(s.rho)
            rob_rows.append([run["name"], partition, s.tau, s.rho])
        time_run = _train_time(run)
        complexity = (evalmetrics.aggregate_complexity(time_run, base_time)
                      if time_run > 0 and base_time > 0 else float("nan"))
        rows.append([run["name"], metric, value, scores.get(run["name"], float("nan")),
                     complexity, float(np.mean(taus)) if taus else float("nan"),
                     float(np.mean(rhos)) if rhos else float("nan")])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "leaderboard.csv", "w") as fh:
        fh.write("model,metric,value,minmax_score,complexity,tau,rho\n")
        for r in rows:
            fh.write(",".join([r[0], r[1]] + [repr(float(x)) for x in r[2:]]) + "\n")
    with open(out / "robustness.csv", "w") as fh:
        fh.write("model,partition,tau,rho\n")
        for r in rob_rows:
            fh.write(f"{r[0]},{r[1]},{r[2]!r},{r[3]!r}\n")
    if svg:
        _tradeoff_svg(rows, out / "tradeoff.svg")
    return rows, rob_rows


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "fusionbench"
    import matplotlib.pyplot as plt

    return plt


def _tradeoff_svg(rows, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, _, _, score, complexity, _, _ in rows:
        ax.scatter(complexity, score)
        ax.annotate(name, (complexity, score), fontsize=8)
    ax.set_xlabel("complexity (-log10 train-time ratio)")
    ax.set_ylabel("min-max performance")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_curves(run_dirs, out_dir=None):
    """One SVG per partition, with one series per run. Returns the written paths."""
    runs = [load_run(d) for d in run_dirs]
    out = Path(out_dir) if out_dir else Path(runs[0]["dir"]) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    plt = _pyplot()
    per_run = [(r["name"], mean_curves(r)) for r in runs]
    partitions = list(per_run[0][1])
    paths = []
    for partition in partitions:
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, curves in per_run:
            if partition in curves:
                c = curves[partition]
                ax.plot(c.sigmas, c.values, marker="o", label=name)
        ax.set_xlim(0.0, 1.0)
        ax.set_xlabel("imperfection level")
        ax.set_ylabel(evalmetrics.primary_metric(
            runs[0]["metrics"]["seeds"][_ok_seeds(runs[0])[0]]["performance"]["task_kind"]))
        ax.set_title(partition)
        ax.legend()
        path = out / f"{partition}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def audit(run_dir):
    """Recompute every persisted metric from stored predictions; returns mismatches."""
    run = load_run(run_dir)
    mismatches = []
    for seed, entry in run["metrics"]["seeds"].items():
        if entry["status"] != "ok":
            continue
        seed_dir = Path(run_dir) / f"seed_{seed}"
        preds = read_predictions(seed_dir / "predictions")
        task = run["reports"][seed]["task"]
        n_classes = task["size"] if task["kind"] == "classification" else None
        labels = preds["labels"]
        perf = evalmetrics.compute_performance(preds["clean/pred"], labels, task["kind"],
                                               preds.get("clean/scores"), n_classes)
        for source in (entry["performance"], run["reports"][seed]["performance"]):
            if perf.to_json() != source:
                mismatches.append({"seed": seed, "item": "performance",
                                   "stored": source, "recomputed": perf.to_json()})
        for partition, curve in entry["robustness"].items():
            metric = evalmetrics.primary_metric(task["kind"])
            values = []
            for i, _ in enumerate(curve["sigmas"]):
                r = evalmetrics.compute_performance(
                    preds[_grid_key(partition, i, "pred")], labels, task["kind"],
                    preds.get(_grid_key(partition, i, "scores")), n_classes)
                values.append(r[metric])
            if values != curve["values"]:
                mismatches.append({"seed": seed, "item": f"robustness/{partition}",
                                   "stored": curve["values"], "recomputed": values})
    if summarize(run["metrics"]["seeds"]) != run["metrics"]["summary"]:
        mismatches.append({"item": "summary"})
    return mismatches


# --- entry point ----------------------------------------------------------------

def _read_config(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError("", f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from exc


def _emit(obj, stream=None):
    (stream or sys.stdout).write(json.dumps(obj, sort_keys=True) + "\n")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fusionbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    p = sub.add_parser("validate", help="check a config without training")
    p.add_argument("config")
    p = sub.add_parser("run", help="train and evaluate every seed of a config")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p = sub.add_parser("compare", help="leaderboard and tradeoff data for several runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--baseline", required=True)
    p.add_argument("--out", default="comparison")
    p.add_argument("--svg", action="store_true")
    p = sub.add_parser("plot", help="robustness curves, one SVG per partition")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out")
    p = sub.add_parser("audit", help="re-derive stored metrics from stored predictions")
    p.add_argument("run")
    args = parser.parse_args(argv)

    try:
        if args.verb == "validate":
            config = _read_config(args.config)
            validate_config(config)
            _emit({"valid": True, "config_hash": config_hash(config)})
        elif args.verb == "run":
            out = run_experiment(_read_config(args.config), args.output_dir)
            _emit({"run_dir": str(out)})
        elif args.verb == "compare":
            rows, _ = compare(args.runs, args.baseline, resolve_output(args.out), args.svg)
            _emit({"leaderboard": [dict(zip(("model", "metric", "value", "minmax_score",
                                              "complexity", "tau", "rho"), r)) for r in rows]})
        elif args.verb == "plot":
            paths = plot_curves(args.runs, args.out)
            _emit({"plots": [str(p) for p in paths]})
        elif args.verb == "audit":
            mismatches = audit(args.run)
            _emit({"consistent": not mismatches, "mismatches": mismatches})
            if mismatches:
                return EXIT_RUNTIME
    except ConfigError as exc:
        _emit(exc.to_json())
        return EXIT_CONFIG
    except (RunError, TrainingDiverged, OSError, KeyError, ValueError) as exc:
        _emit({"error": "runtime_failure", "message": str(exc)})
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
