"""``deeprbf`` command-line interface.

Every config leaf is exposed as ``--<dotted.path> VALUE`` and overrides both
the defaults and any ``--config`` file. Exit codes: 0 success, 2 config error,
3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .baselines import AcConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CONTINUOUS,
    Dataset,
    PoisonSpec,
    make_attacked_set,
    make_backdoor_test,
    make_sign_dataset,
    make_steering_dataset,
    poison_dataset,
    read_rbds,
    split_dataset,
    write_rbds,
)
from .detector import calibrate_beta, calibrate_gamma, detect_batch, detection_records, flag_records
from .errors import CheckpointError, ConfigError, InputError, NumericError, RbdsError
from .evaluation import (
    cleaning_comparison,
    detection_summary,
    environment,
    latency_benchmark,
    sweep_poison_fraction,
)
from .model import TrainConfig, build_model, train
from .numeric import init_parameters
from .presets import build_backbone, vae_monitor
from .seeding import derive_seed
from .steering import SteeringSpec, discretize

logger = logging.getLogger("deeprbf")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
COMMANDS = ("gen-data", "train", "detect", "poison", "clean", "sweep", "bench")


# ---------------------------------------------------------------------------
# helpers


def _out_dir(cfg) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _data_dir(cfg) -> Path:
    return Path(cfg["data"]["dir"]) if cfg["data"]["dir"] else Path(cfg["out_dir"]) / "data"


def _data_path(cfg, key: str, default_name: str) -> Path:
    value = cfg["data"].get(key) if key in cfg["data"] else ""
    return Path(value) if value else _data_dir(cfg) / default_name


def _checkpoint_path(cfg) -> Path:
    value = cfg["model"]["checkpoint"]
    return Path(value) if value else Path(cfg["out_dir"]) / "model.rbck"


def _read(path) -> Dataset:
    try:
        return read_rbds(path)
    except FileNotFoundError:
        raise InputError(f"dataset not found: {path}") from None


def _steering_spec(cfg) -> SteeringSpec:
    return SteeringSpec(cfg["steering"]["theta"], cfg["steering"]["n_classes"])


def class_labels(cfg, ds: Dataset) -> np.ndarray:
    """Class indices for training: steering degrees are discretised, class labels pass through."""
    if ds.label_kind == CONTINUOUS:
        return discretize(ds.labels, _steering_spec(cfg))
    return ds.labels


def num_classes(cfg) -> int:
    return cfg["steering"]["n_classes"] if cfg["task"] == "steering" else cfg["data"]["n_classes"]


def backbone_for(cfg):
    spec = cfg["backbone"]
    if spec == "auto":
        spec = "dave2-small" if cfg["task"] == "steering" else "resnet-small"
    return build_backbone(spec)


def train_config(cfg, seed) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(t["epochs"], t["batch_size"], seed, t["optimizer"], t["lr"], t["patience"])


def poison_spec(cfg, n_p=None, seed=None) -> PoisonSpec:
    p = cfg["poison"]
    return PoisonSpec(
        target=p["target"],
        n_p=p["n_p"] if n_p is None else n_p,
        patch_h=p["patch_h"],
        patch_w=p["patch_w"],
        color=tuple(p["color"]),
        seed=derive_seed(cfg["seed"], "poison") if seed is None else seed,
    )


def _report(cfg, command: str, results: dict, seeds: dict) -> dict:
    return {
        "command": command,
        "config": cfg,
        "seeds": seeds,
        "environment": environment(),
        "results": results,
    }


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _model_factory(cfg):
    nc = num_classes(cfg)
    lam = cfg["rbf"]["lam"]

    def make(head, ds, seed):
        return build_model(head, backbone_for(cfg), nc, seed, ds.images, class_labels(cfg, ds), lam)

    return make


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg) -> dict:
    seed = cfg["seed"]
    ddir = _data_dir(cfg)
    ddir.mkdir(parents=True, exist_ok=True)
    if cfg["task"] == "steering":
        pool = make_steering_dataset(cfg["data"]["n_samples"], derive_seed(seed, "gen"), cfg["steering"]["theta"])
    else:
        pool = make_sign_dataset(cfg["data"]["per_class"], cfg["data"]["n_classes"], derive_seed(seed, "gen"))
    train_ds, val_ds, test_ds = split_dataset(pool, (70, 15, 15), derive_seed(seed, "split"))
    files = {"train": train_ds, "val": val_ds, "test": test_ds}
    if cfg["task"] == "steering":
        files["test_attacked"] = make_attacked_set(test_ds, derive_seed(seed, "attack"))
    counts = {}
    for name, ds in files.items():
        write_rbds(ddir / f"{name}.rbds", ds)
        counts[name] = len(ds)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    doc = _report(cfg, "gen-data", {"pool": len(pool), "counts": counts}, {"master": seed})
    _write_json(_out_dir(cfg) / "gen-data.json", doc)
    return doc


def cmd_train(cfg) -> dict:
    seed = cfg["seed"]
    out = _out_dir(cfg)
    train_ds = _read(_data_path(cfg, "train", "train.rbds"))
    val_path = _data_path(cfg, "val", "val.rbds")
    val_ds = _read(val_path) if val_path.exists() else None
    y = class_labels(cfg, train_ds)
    model = build_model(
        cfg["head"], backbone_for(cfg), num_classes(cfg), derive_seed(seed, "model"),
        train_ds.images, y, cfg["rbf"]["lam"],
    )
    tcfg = train_config(cfg, derive_seed(seed, "shuffle"))
    log = []
    val = (val_ds.images, class_labels(cfg, val_ds)) if val_ds is not None else None
    try:
        result = train(model, train_ds.images, y, tcfg, val=val, on_epoch=log.append)
    finally:
        _write_json(out / "train_log.json", {"log": log})
    meta = {"task": cfg["task"], "steering": cfg["steering"], "head": cfg["head"]}
    save_checkpoint(_checkpoint_path(cfg), model, meta)
    results = {
        "epochs_run": result.stopped_epoch,
        "best_epoch": result.best_epoch,
        "final": log[-1] if log else None,
        "parameter_count": int(sum(a.size for a in model.parameters())),
    }
    if val is not None:
        results["val_accuracy"] = model.accuracy(*val)
    doc = _report(cfg, "train", results, {"master": seed, "model": derive_seed(seed, "model")})
    _write_json(out / "train.json", doc)
    return doc


def _load_model(cfg):
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path)
    return model


def cmd_detect(cfg) -> dict:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    if model.head.kind != "rbf":
        raise ConfigError("head", "detection needs an RBF checkpoint; softmax heads have no rejection class")
    ds_path = Path(cfg["detect"]["dataset"]) if cfg["detect"]["dataset"] else _data_dir(cfg) / (
        "test_attacked.rbds" if cfg["task"] == "steering" else "test.rbds"
    )
    ds = _read(ds_path)
    gamma = cfg["rbf"]["gamma"]
    calibrated = False
    if cfg["detect"]["calibrate"]:
        val_path = _data_path(cfg, "val", "val.rbds")
        gamma = calibrate_gamma(model, _read(val_path).images, cfg["detect"]["target_fpr"])
        gamma = min(max(gamma, 1e-12), 1.0 - 1e-12)
        calibrated = True
    results_list = detect_batch(model, ds.images, gamma)
    (out / "detect_records.jsonl").write_text(detection_records(results_list))
    results = {"gamma": gamma, "gamma_calibrated": calibrated, "n": len(ds),
               "flagged": int(sum(r.anomaly for r in results_list))}
    if ds.mask is not None:
        summary, _ = detection_summary(model, ds, gamma)
        results.update(summary)
    doc = _report(cfg, "detect", results, {"master": cfg["seed"]})
    _write_json(out / "detect.json", doc)
    return doc


def cmd_poison(cfg) -> dict:
    ddir = _data_dir(cfg)
    train_ds = _read(_data_path(cfg, "train", "train.rbds"))
    spec = poison_spec(cfg)
    poisoned, mask = poison_dataset(train_ds, spec)
    write_rbds(ddir / "train_poisoned.rbds", poisoned)
    test_path = _data_path(cfg, "test", "test.rbds")
    counts = {"train_poisoned": len(poisoned), "n_p": int(mask.sum())}
    if test_path.exists():
        backdoor = make_backdoor_test(_read(test_path), poison_spec(cfg, seed=spec.seed))
        write_rbds(ddir / "test_backdoor.rbds", backdoor)
        counts["test_backdoor"] = len(backdoor)
    doc = _report(cfg, "poison", counts, {"master": cfg["seed"], "poison": spec.seed})
    _write_json(_out_dir(cfg) / "poison.json", doc)
    return doc


def cmd_clean(cfg) -> dict:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    if model.head.kind != "rbf":
        raise ConfigError("head", "distance-threshold cleaning needs an RBF checkpoint")
    path = Path(cfg["clean"]["dataset"]) if cfg["clean"]["dataset"] else _data_dir(cfg) / "train_poisoned.rbds"
    ds = _read(path)
    if ds.mask is None:
        raise InputError(f"{path} carries no ground-truth poison mask")
    beta = cfg["rbf"]["beta"]
    if cfg["clean"]["calibrate_beta"]:
        beta = calibrate_beta(model, ds.images, ds.labels, cfg["clean"]["beta_quantile"])
    c = cfg["clean"]
    ac = AcConfig(c["ac_clusters"], c["ac_dims"], c["ac_restarts"], c["ac_max_iter"],
                  derive_seed(cfg["seed"], "ac"))
    metrics, flags = cleaning_comparison(model, ds, ds.mask, beta, ac)
    (out / "clean_rbf.jsonl").write_text(flag_records(flags["rbf"]))
    (out / "clean_ac.jsonl").write_text(flag_records(flags["ac"]))
    results = {"beta": beta, "rbf": metrics["rbf"].to_dict(), "ac": metrics["ac"].to_dict()}
    doc = _report(cfg, "clean", results, {"master": cfg["seed"], "ac": ac.seed})
    _write_json(out / "clean.json", doc)
    return doc


def cmd_sweep(cfg) -> dict:
    out = _out_dir(cfg)
    train_ds = _read(_data_path(cfg, "train", "train.rbds"))
    test_ds = _read(_data_path(cfg, "test", "test.rbds"))
    base = poison_spec(cfg)
    backdoor = make_backdoor_test(test_ds, base)
    tcfg = train_config(cfg, 0)
    configs = {h: tcfg for h in cfg["sweep"]["heads"]}
    result = sweep_poison_fraction(
        cfg["sweep"]["fractions"], train_ds, test_ds, backdoor, _model_factory(cfg),
        configs, base, master_seed=derive_seed(cfg["seed"], "sweep"), cache_dir=out / "sweep_cells",
    )
    (out / "sweep.csv").write_text(result.to_csv())
    doc = _report(cfg, "sweep", result.to_json(), {"master": cfg["seed"]})
    _write_json(out / "sweep.json", doc)
    return doc


def cmd_bench(cfg) -> dict:
    out = _out_dir(cfg)
    model = _load_model(cfg)
    reps = cfg["bench"]["repetitions"]
    rng = np.random.default_rng(derive_seed(cfg["seed"], "bench"))
    x = rng.random((cfg["bench"]["batch"],) + model.backbone.input_shape)
    monitor = vae_monitor(model.backbone.input_shape)
    monitor.params = init_parameters(monitor, derive_seed(cfg["seed"], "monitor"))
    single = latency_benchmark(model, x, reps)
    paired = latency_benchmark(model, x, reps, monitor=monitor)
    results = {
        "single_pass": single,
        "with_monitor": paired,
        "single_pass_faster": single["median_ms"] < paired["median_ms"],
    }
    doc = _report(cfg, "bench", results, {"master": cfg["seed"]})
    _write_json(out / "bench.json", doc)
    return doc


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "detect": cmd_detect,
    "poison": cmd_poison,
    "clean": cmd_clean,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deeprbf", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file; flags below override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    group = parser.add_argument_group("config overrides")
    for path, default in cfgmod.flatten(cfgmod.DEFAULTS).items():
        group.add_argument(f"--{path}", dest=f"cfg:{path}", metavar="VALUE", default=None,
                           help=f"default: {json.dumps(default)}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    defaults = cfgmod.flatten(cfgmod.DEFAULTS)
    try:
        overrides = {}
        for key, raw in vars(args).items():
            if key.startswith("cfg:") and raw is not None:
                path = key[4:]
                try:
                    overrides[path] = cfgmod.parse_value(raw, defaults[path])
                except ValueError as exc:
                    raise ConfigError(path, str(exc)) from None
        cfg = cfgmod.load_config(args.config, overrides)
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, RbdsError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
