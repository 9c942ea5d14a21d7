"""``qecw`` command line: datasets, MWPM baselines, training, compression and estimates.

Settings resolve as flags > JSON config (``--config``) > ``QECW_SEED`` > defaults.
Every run writes ``<command>.resolved.json`` (with the source of each value)
into the output directory and appends a line to ``qecw.log`` there.  Failures
print one JSON line on stderr and exit 2 (config), 3 (capacity) or 4 (numerics).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, QecwError

log = logging.getLogger("qecw")


def _train_defaults() -> dict:
    from .models import TrainConfig

    return dataclasses.asdict(TrainConfig())


def defaults() -> dict:
    return {
        "code": {"d": 3, "r": None},  # r defaults to d
        "noise": {"kind": "SD", "p": 0.005},
        "data": {"n_train": 200_000, "n_test": 50_000, "seed": 0, "path": None},
        "model": {"family": "TCN", "scale": "tiny"},
        "train": _train_defaults(),
        "compress": {"mode": "none", "bits": 4, "sparsity": 0.7},
        "estimate": {"device": "VP1802", "f_clk": 300e6},
        "output_dir": "runs",
    }


def _type_ok(default, value) -> bool:
    if value is None or default is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default)) and not (isinstance(value, bool) and not isinstance(default, bool))


def _merge(base: dict, overlay: dict, source: str, prov: dict, prefix: str = ""):
    for key, value in overlay.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge(base[key], value, source, prov, path + ".")
            continue
        if not _type_ok(base[key], value):
            raise ConfigError(f"config key {path!r} expects {type(base[key]).__name__}, got {value!r}")
        base[key] = value
        prov[path] = source


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def resolve(config_path=None, flags: dict | None = None, env=None) -> tuple[dict, dict]:
    """Return (resolved config, provenance per dotted key)."""
    env = os.environ if env is None else env
    cfg = defaults()
    prov: dict[str, str] = {}
    if env.get("QECW_SEED"):
        try:
            seed = int(env["QECW_SEED"])
        except ValueError:
            raise ConfigError(f"QECW_SEED must be an integer, got {env['QECW_SEED']!r}") from None
        _merge(cfg, {"data": {"seed": seed}, "train": {"seed": seed}}, "env", prov)
    if config_path:
        _merge(cfg, load_config(config_path), "config", prov)
    nested: dict = {}
    for dotted, value in (flags or {}).items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    _merge(cfg, nested, "flag", prov)
    if cfg["code"]["r"] is None:
        cfg["code"]["r"] = cfg["code"]["d"]
        prov.setdefault("code.r", "derived")
    return cfg, prov


# -- shared helpers -----------------------------------------------------------------

def _out_dir(cfg) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit_run_record(command: str, cfg: dict, prov: dict, extra: dict):
    out = _out_dir(cfg)
    record = {"command": command, "config": cfg, "sources": dict(sorted(prov.items())), "args": extra}
    (out / f"{command}.resolved.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")
    line = {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), "command": command, "seed": cfg["data"]["seed"],
            "train_seed": cfg["train"]["seed"], "qecw": __version__, "numpy": np.__version__,
            "python": platform.python_version()}
    with open(out / "qecw.log", "a") as fh:
        fh.write(json.dumps(line, sort_keys=True) + "\n")


def _write_json(path: Path, payload) -> str:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    path.write_text(text)
    return text


def _train_config(cfg, **override):
    from .models import TrainConfig

    fields = dict(cfg["train"])
    fields.update({k: v for k, v in override.items() if v is not None})
    return TrainConfig(**fields)


def _dataset(path):
    from .pauli_sim import read_dataset

    if not path:
        raise ConfigError("a dataset path is required (--data or data.path)")
    return read_dataset(path)


def _dem_for(ds=None, source=None, cfg=None):
    from .dem import dem_from_circuit, parse_dem
    from .pauli_sim import memory_z

    if source:
        text = Path(source).read_text()
        if text.lstrip().startswith("{"):
            sub, _ = resolve(source, env={})
            return dem_from_circuit(memory_z(sub["code"]["d"], sub["code"]["r"], sub["noise"]["kind"],
                                             sub["noise"]["p"]))
        return parse_dem(text)
    if ds is not None:
        return dem_from_circuit(memory_z(ds.d, ds.r, ds.noise_kind, ds.p))
    return dem_from_circuit(memory_z(cfg["code"]["d"], cfg["code"]["r"], cfg["noise"]["kind"], cfg["noise"]["p"]))


# -- commands -------------------------------------------------------------------------

def cmd_gen(cfg, args):
    from .pauli_sim import memory_z, sample_shots, write_dataset

    n = cfg["data"]["n_train"]
    nc = memory_z(cfg["code"]["d"], cfg["code"]["r"], cfg["noise"]["kind"], cfg["noise"]["p"])
    ds = sample_shots(nc, n, cfg["data"]["seed"], workers=args.workers)
    out = Path(args.out or _out_dir(cfg) / "shots.qecd")
    write_dataset(ds, out)
    return {"path": str(out), "d": ds.d, "r": ds.r, "noise": ds.noise_kind, "p": ds.p, "seed": ds.seed,
            "shots": ds.n_shots, "label_rate": float(ds.labels.mean()) if n else 0.0}


def cmd_mwpm(cfg, args):
    from .mwpm import evaluate

    ds = _dataset(args.data or cfg["data"]["path"])
    dem = _dem_for(ds, args.dem_from)
    report = evaluate(dem, ds, workers=args.workers, strict_capacity=args.strict_capacity)
    payload = report.to_dict() | {"d": ds.d, "r": ds.r, "noise": ds.noise_kind, "p": ds.p}
    _write_json(_out_dir(cfg) / "mwpm.json", payload)
    return payload


def cmd_train(cfg, args):
    from .models import ModelSpec, build_model, save_model, train

    tc = _train_config(cfg)
    spec = ModelSpec(cfg["model"]["family"], cfg["model"]["scale"], cfg["code"]["d"], cfg["code"]["r"])
    model = build_model(spec, seed=tc.seed, dropout=tc.dropout)
    out = _out_dir(cfg)
    data = None if tc.online else _dataset(args.data or cfg["data"]["path"])
    if tc.online:
        tc = dataclasses.replace(tc, noise=cfg["noise"]["kind"], p=cfg["noise"]["p"])
    result = train(model, tc, data, history_path=out / "history.csv", workers=args.workers)
    ckpt = Path(args.out or out / "model.qeck")
    save_model(model, ckpt, {"train": dataclasses.asdict(tc), "best_epoch": result.best_epoch})
    return {"checkpoint": str(ckpt), "parameters": model.n_parameters(), "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss, "epochs_run": len(result.history)}


def cmd_eval(cfg, args):
    from .models import evaluate_ler, load_model

    model = load_model(args.model)
    ds = _dataset(args.data or cfg["data"]["path"])
    payload = evaluate_ler(model, ds, threshold=cfg["train"]["threshold"]).to_dict()
    _write_json(_out_dir(cfg) / "eval.json", payload)
    return payload


def cmd_compress(cfg, args):
    from .compress import QuantConfig, ptq, qat
    from .models import evaluate_ler, load_model, save_model

    mode = cfg["compress"]["mode"]
    if mode not in ("ptq", "qat"):
        raise ConfigError(f"compress.mode must be 'ptq' or 'qat' for this command, got {mode!r}")
    bits = cfg["compress"]["bits"]
    qc = QuantConfig(bits, bits)
    model = load_model(args.model)
    data = _dataset(args.data or cfg["data"]["path"])
    out = _out_dir(cfg)
    if mode == "ptq":
        q = ptq(model, data, qc)
    else:
        tc = _train_config(cfg, lr=args.lr or 1e-4, warmup=0, decay_end=args.epochs or 50,
                           max_epochs=args.epochs or 50, patience=min(5, args.epochs or 50))
        q = qat(model, data, qc, tc, history_path=out / "qat_history.csv").model
    ckpt = Path(args.out or out / f"{mode}_w{bits}a{bits}.qeck")
    save_model(q, ckpt, {"compress": {"mode": mode, "bits": bits}})
    payload = {"checkpoint": str(ckpt), "mode": mode, "bits": bits}
    if args.test:
        payload["test"] = evaluate_ler(q, _dataset(args.test)).to_dict()
    _write_json(out / f"{mode}.json", payload)
    return payload


def cmd_prune(cfg, args):
    from .compress import prune_global, weight_sparsity
    from .models import evaluate_ler, load_model, save_model

    s = cfg["compress"]["sparsity"]
    model = load_model(args.model)
    data = _dataset(args.data or cfg["data"]["path"]) if (args.data or cfg["data"]["path"]) else None
    out = _out_dir(cfg)
    epochs = args.epochs or 30
    tc = _train_config(cfg, lr=args.lr or 5e-5, warmup=0, decay_end=epochs, max_epochs=epochs,
                       patience=min(5, epochs))
    pruned, pm, _ = prune_global(model, s, data, tc, history_path=out / "prune_history.csv")
    ckpt = Path(args.out or out / f"pruned_s{s}.qeck")
    save_model(pruned, ckpt, {"prune": {"sparsity": s, "threshold": pm.threshold}})
    payload = {"checkpoint": str(ckpt), "sparsity": s, "measured_sparsity": weight_sparsity(pruned),
               "threshold": pm.threshold}
    if args.test:
        payload["test"] = evaluate_ler(pruned, _dataset(args.test)).to_dict()
    _write_json(out / "prune.json", payload)
    return payload


def cmd_estimate(cfg, args):
    from .resource import describe_arch, report_row, rows_to_csv, rows_to_json

    dims = tuple(args.dims) if args.dims else None
    desc = describe_arch(cfg["model"]["family"], cfg["model"]["scale"], cfg["code"]["d"], cfg["code"]["r"], dims)
    row = report_row(desc, cfg["compress"]["sparsity"], cfg["estimate"]["device"], args.bits,
                     cfg["estimate"]["f_clk"])
    out = _out_dir(cfg)
    text = rows_to_csv([row])
    (out / "estimate.csv").write_text(text)
    (out / "estimate.json").write_text(rows_to_json([row]))
    sys.stdout.write(text)
    return None


def cmd_report(cfg, args):
    rows, fields = [], []
    for path in args.inputs:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for name in reader.fieldnames or ():
                if name not in fields:
                    fields.append(name)
            rows.extend({"source": Path(path).name} | row for row in reader)
    out = _out_dir(cfg) / (args.name or "report.csv")
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["source"] + fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return {"report": str(out), "rows": len(rows)}


def cmd_selftest(cfg, args):
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise SelftestFailure(f"{len(failed)} selftest check(s) failed: {', '.join(failed)}")
    return None


class SelftestFailure(QecwError):
    exit_code = 1


# -- argument parsing -----------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--workers", type=int, default=1, help="parallel processes for sampling/decoding")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int, dest="data.seed")
    return p


def _code_flags(p):
    p.add_argument("--d", type=int, dest="code.d")
    p.add_argument("--r", type=int, dest="code.r")
    p.add_argument("--p", type=float, dest="noise.p")
    p.add_argument("--noise", choices=("SD", "SI1000"), dest="noise.kind")


def _model_flags(p):
    p.add_argument("--family", type=str.upper, choices=("MLP", "TCN", "CNN3D", "TRANSFORMER"), dest="model.family")
    p.add_argument("--scale", choices=("tiny", "small", "large"), dest="model.scale")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qecw", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qecw {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("gen", parents=[common], help="sample a memory-Z shot dataset")
    _code_flags(p)
    p.add_argument("--n", type=int, dest="data.n_train", help="number of shots")
    p.add_argument("--out")

    p = sub.add_parser("mwpm", parents=[common], help="MWPM logical error rate on a dataset")
    p.add_argument("--data")
    p.add_argument("--dem-from", dest="dem_from", help="JSON run config or DEM text file")
    p.add_argument("--strict-capacity", action="store_true", dest="strict_capacity")

    p = sub.add_parser("train", parents=[common], help="train a neural decoder")
    _code_flags(p)
    _model_flags(p)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, dest="train.max_epochs")
    p.add_argument("--lr", type=float, dest="train.lr")
    p.add_argument("--batch", type=int, dest="train.batch")
    p.add_argument("--patience", type=int, dest="train.patience")
    p.add_argument("--warmup", type=float, dest="train.warmup")
    p.add_argument("--decay-end", type=float, dest="train.decay_end")
    p.add_argument("--online", action="store_const", const=True, dest="train.online")
    p.add_argument("--train-seed", type=int, dest="train.seed")

    p = sub.add_parser("eval", parents=[common], help="neural decoder LER on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data")

    p = sub.add_parser("compress", parents=[common], help="PTQ or QAT")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--mode", choices=("ptq", "qat"), dest="compress.mode")
    p.add_argument("--bits", type=int, dest="compress.bits")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")

    p = sub.add_parser("prune", parents=[common], help="global magnitude pruning + fine-tune")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--sparsity", type=float, dest="compress.sparsity")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out")

    p = sub.add_parser("estimate", parents=[common], help="FPGA cycle/latency estimate")
    _model_flags(p)
    p.add_argument("--d", type=int, dest="code.d")
    p.add_argument("--r", type=int, dest="code.r")
    p.add_argument("--sparsity", type=float, dest="compress.sparsity")
    p.add_argument("--device", dest="estimate.device")
    p.add_argument("--f-clk", type=float, dest="estimate.f_clk")
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--dims", type=int, nargs=3, metavar=("T", "H", "W"))

    p = sub.add_parser("report", parents=[common], help="concatenate CSV reports")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--name")

    sub.add_parser("selftest", parents=[common], help="gradient, matching and fault-injection oracles")
    return parser


COMMANDS = {"gen": cmd_gen, "mwpm": cmd_mwpm, "train": cmd_train, "eval": cmd_eval, "compress": cmd_compress,
            "prune": cmd_prune, "estimate": cmd_estimate, "report": cmd_report, "selftest": cmd_selftest}


def _flags(ns: argparse.Namespace) -> dict:
    flags = {k: v for k, v in vars(ns).items() if "." in k}
    flags["output_dir"] = ns.output_dir
    if ns.command == "train" and flags.get("data.seed") is not None and flags.get("train.seed") is None:
        flags["train.seed"] = flags["data.seed"]
    return flags


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    ns = build_parser().parse_args(argv)
    try:
        if ns.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg, prov = resolve(ns.config, _flags(ns))
        extra = {k: v for k, v in vars(ns).items() if "." not in k and k not in ("config",)}
        payload = COMMANDS[ns.command](cfg, ns)
        _emit_run_record(ns.command, cfg, prov, extra)
        if payload is not None:
            print(json.dumps(payload, sort_keys=True))
        return 0
    except QecwError as exc:
        code = exc.exit_code
        err = {"error": type(exc).__name__, "exit": code, "message": str(exc)}
    except (FileNotFoundError, IsADirectoryError) as exc:
        code, err = 2, {"error": type(exc).__name__, "exit": 2, "message": str(exc)}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
