"""``backdoor-forge`` command line.

Run layout under ``$BF_RUN_DIR`` (or the config's ``run_root``), one
directory per config digest::

    <digest>/config.json
    <digest>/data/{train,test,train_rma,train_oda}/
    <digest>/models/{clean,bd_rma,bd_oda}.npz (+ *_history.csv, implant_*.json)
    <digest>/mitigate/<mode>/<method>[-<selection>-<def|nodef>]/seed<k>/{metrics.json,history.csv,model.npz}
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig
from .data import load_dataset, save_dataset
from .defense import write_history
from .detector import load_checkpoint, save_checkpoint
from .errors import ConfigError, ImplantError
from .gate import soft_gate
from .props import run_all, sign_flipped_gate

log = logging.getLogger("backdoor_forge")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_IMPLANT, EXIT_PROPS = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _load_config(args) -> RunConfig:
    if args.config is None:
        raise UsageError("--config is required for this command")
    cfg = RunConfig.load(args.config)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", cfg.data)
    return cfg


def _load_split(run_dir: Path, name: str):
    path = run_dir / "data" / name
    if not (path / "annotations.json").exists():
        raise UsageError(f"missing dataset {path}; run gen-data first")
    return load_dataset(path)


def _load_model(path: Path, hint: str):
    if not path.exists():
        raise UsageError(f"missing checkpoint {path}; {hint}")
    return load_checkpoint(path)


def _write_train_history(history, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "loss"])
        w.writeheader()
        for row in history:
            w.writerow({"epoch": row["epoch"], "loss": f"{row['loss']:.10g}"})


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    splits = pipeline.generate(cfg)
    data_dir = cfg.run_dir() / "data"
    for name, ds, seed in (("train", splits.train, cfg["seed"]),
                           ("test", splits.test, cfg["seed"] + pipeline.TEST_SEED_OFFSET)):
        manifest = {"seed": seed, "split": name, "scene": cfg["scene"], "poison": None,
                    "config_digest": cfg.digest}
        save_dataset(ds, data_dir / name, manifest)
    print(data_dir)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run_dir = cfg.run_dir()
    splits = pipeline.Splits(_load_split(run_dir, "train"), _load_split(run_dir, "test"))
    models = run_dir / "models"
    tau = cfg["defense"]["tau"]
    if args.poison == "none":
        history = []
        model, ref = pipeline.train_clean(cfg, splits, history)
        save_checkpoint(model, models / "clean.npz", tau, {"map50_clean": ref, "config_digest": cfg.digest})
        _write_train_history(history, models / "clean_history.csv")
        print(json.dumps({"checkpoint": str(models / "clean.npz"), "map50_clean": ref}))
        return EXIT_OK
    _, header = _load_model(models / "clean.npz", "run `train --poison none` first")
    mode = args.poison
    try:
        model, poisoned, report = pipeline.implant(cfg, splits, mode, header["map50_clean"])
    except ImplantError as exc:
        log.error("implant gate failed: %s", exc)
        return EXIT_IMPLANT
    save_dataset(poisoned, run_dir / "data" / f"train_{mode}",
                 {"seed": cfg["seed"], "split": "train", "scene": cfg["scene"],
                  "poison": poisoned.meta["poison"], "trigger": poisoned.meta["trigger"],
                  "poisoned_images": poisoned.meta["poisoned_images"], "config_digest": cfg.digest})
    path = save_checkpoint(model, models / f"bd_{mode}.npz", tau,
                           {"map50_clean": report["map50_clean"], "mode": mode, "config_digest": cfg.digest})
    _write_json(models / f"implant_{mode}.json", report)
    print(json.dumps({"checkpoint": str(path), "asr": report["asr"], "rmap": report["rmap"]}))
    return EXIT_OK


def _label(method: str, selection: str, def_loss: bool) -> str:
    return "ft" if method == "ft" else f"{method}-{selection}-{'def' if def_loss else 'nodef'}"


def cmd_mitigate(args) -> int:
    cfg = _load_config(args)
    run_dir = cfg.run_dir()
    train, test = _load_split(run_dir, "train"), _load_split(run_dir, "test")
    mode = args.poison
    bd, header = _load_model(run_dir / "models" / f"bd_{mode}.npz", f"run `train --poison {mode}` first")
    pre_map = header["map50_clean"]
    if not pre_map > 0:
        raise UsageError(f"backdoored checkpoint has clean mAP {pre_map}; RmAP is undefined")
    def_loss = args.def_loss == "on"
    label = _label(args.method, args.selection, def_loss)
    seeds = args.seeds if args.seeds else [cfg["seed"]]
    for seed in seeds:
        out = run_dir / "mitigate" / mode / label / f"seed{seed}"
        subset = pipeline.clean_subset(train, cfg["defense"]["subset_fraction"], seed)
        history = []
        model = pipeline.run_defense(cfg, bd, subset, args.method, args.selection, def_loss, seed, history)
        report = pipeline.assess(cfg, model, test, mode, pre_map)
        write_history(history, out / "history.csv")
        save_checkpoint(model, out / "model.npz", cfg["defense"]["tau"], {"label": label, "seed": seed})
        record = pipeline.metrics_record(report, cfg, seed)
        _write_json(out / "metrics.json", record)
        print(json.dumps({"label": label, **record}, sort_keys=True))
    return EXIT_OK


def cmd_props(args) -> int:
    seed = RunConfig.load(args.config)["seed"] if args.config else 0
    gate = sign_flipped_gate if args.inject_gate_bug else soft_gate
    results = run_all(seed=seed, gate=gate, only=args.only)
    for r in results:
        print(r.to_json())
    return EXIT_OK if all(r.passed for r in results) else EXIT_PROPS


def cmd_plot(args) -> int:
    files = sorted(glob.glob(args.results, recursive=True))
    if not files:
        raise UsageError(f"no metrics files match {args.results!r}")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict[str, list[dict]] = {}
    for f in files:
        rec = json.loads(Path(f).read_text())
        label = Path(f).parent.parent.name if Path(f).parent.name.startswith("seed") else Path(f).parent.name
        groups.setdefault(f"{rec['mode']}:{label}", []).append(rec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in ("asr", "tdr", "rmap"):
        labels = [k for k in sorted(groups) if any(metric in r for r in groups[k])]
        if not labels:
            continue
        data = [[r[metric] for r in groups[k] if metric in r] for k in labels]
        fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(labels), 3.2))
        ax.boxplot(data)
        ax.set_xticks(range(1, len(labels) + 1), labels, rotation=30, ha="right")
        ax.set_ylabel(metric.upper() if metric != "rmap" else "RmAP")
        ax.set_ylim(-0.02, max(1.02, max(max(d) for d in data) + 0.02))
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))
    print("\n".join(written))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="backdoor-forge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, config_required=True, help=None):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", required=config_required, help="run configuration (JSON)")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, help="generate the synthetic train/test datasets")
    sp = add("train", cmd_train, help="train the clean reference or a backdoored detector")
    sp.add_argument("--poison", choices=["none", "rma", "oda"], default="none")
    sp = add("mitigate", cmd_mitigate, help="run a defence against a backdoored detector")
    sp.add_argument("--poison", choices=["rma", "oda"], default="rma", help="which backdoor to mitigate")
    sp.add_argument("--method", choices=list(pipeline.METHODS), default="sbm")
    sp.add_argument("--selection", choices=["rs", "fws"], default="fws")
    sp.add_argument("--def-loss", choices=["on", "off"], default="on")
    sp.add_argument("--seeds", type=int, nargs="+", help="clean-subset / optimisation seeds")
    sp = add("props", cmd_props, config_required=False, help="run the proposition checks")
    sp.add_argument("--only", nargs="+", help="subset of suites, e.g. A5 A6")
    sp.add_argument("--inject-gate-bug", action="store_true", help=argparse.SUPPRESS)
    sp = add("plot", cmd_plot, config_required=False, help="box plots of metrics.json files")
    sp.add_argument("--results", required=True, help="glob of metrics.json files")
    sp.add_argument("--out", default="plots")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "only", None):
        from .props import SUITES

        unknown = [s for s in args.only if s not in SUITES]
        if unknown:
            parser.error(f"unknown suites {unknown}; choose from {list(SUITES)}")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
