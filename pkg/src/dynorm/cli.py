"""``dynorm`` command line: train, eval, gradcheck, params, dump-affine."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments, gradchecks
from . import tensor as T
from .data import Dataset, cifar10_splits, standardize, synth_raw
from .model_zoo import POLICIES, build_toycnn, count_params, mobilenetv2_cost_table, published_figures
from .normalization import DN_VARIANTS, parse_g
from .trainer import Splits, TrainConfig, accuracy, predict, train

log = logging.getLogger("dynorm")

SCHEMA = {
    "model": {"norm": "bn", "r": 4, "g": 1, "width": 1.0},
    "data": {"source": "synth", "path": None, "seed": 0, "classes": 4, "size": 16,
             "n_train": 1000, "n_val": 200, "n_test": 200},
    "train": {"lr": 0.1, "momentum": 0.9, "weight_decay": 4e-5, "epochs": 5, "batch_size": 64,
              "schedule": "cosine", "milestones": [], "factor": 0.1, "seed": 0, "augment": False},
    "output": {"directory": "runs/default"},
}


class ConfigFileError(ValueError):
    pass


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse and validate a run config, filling defaults. Unknown keys are rejected."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigFileError(f"{source}:{e.lineno}: invalid JSON: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigFileError(f"{source}:1: top level must be an object")
    cfg = {}
    for section, defaults in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigFileError(f"{source}:{_line_of(text, section)}: section {section!r} must be an object")
        for key in given:
            if key not in defaults:
                raise ConfigFileError(f"{source}:{_line_of(text, key)}: unknown key {key!r} in section {section!r}")
        cfg[section] = {**defaults, **given}
    for key in raw:
        if key not in SCHEMA:
            raise ConfigFileError(f"{source}:{_line_of(text, key)}: unknown section {key!r}")
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values parse as JSON, else as strings."""
    for item in overrides or []:
        path, sep, value = item.partition("=")
        section, _, key = path.partition(".")
        if not sep or section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigFileError(f"--set {item!r}: expected section.key=value with a known key")
        try:
            cfg[section][key] = json.loads(value)
        except json.JSONDecodeError:
            cfg[section][key] = value
    return cfg


def load_config(path: str, overrides=None) -> dict:
    text = Path(path).read_text()
    cfg = apply_overrides(parse_config(text, str(path)), overrides)
    if os.environ.get("DYNORM_OUT"):
        cfg["output"]["directory"] = os.environ["DYNORM_OUT"]
    return cfg


def model_from(cfg: dict):
    m, d = cfg["model"], cfg["data"]
    classes = 10 if d["source"] == "cifar10" else d["classes"]
    size = 32 if d["source"] == "cifar10" else d["size"]
    return build_toycnn(m["norm"], m["r"], parse_g(m["g"]), m["width"], classes, size)


def train_config_from(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["milestones"] = tuple(t["milestones"])
    return TrainConfig(**t)


def data_from(cfg: dict) -> Splits:
    """Train/val/test splits; val and test reuse the training standardization constants."""
    d = cfg["data"]
    if d["source"] == "synth":
        seed, k, size = d["seed"], d["classes"], d["size"]
        raw = [synth_raw((seed, i), n, k, size) for i, n in enumerate((d["n_train"], d["n_val"], d["n_test"]))]
        train_ds = standardize(*raw[0], k)
        stats = (train_ds.mean, train_ds.std)
        return Splits(train_ds, standardize(*raw[1], k, stats), standardize(*raw[2], k, stats))
    if d["source"] == "cifar10":
        if not d["path"]:
            raise ConfigFileError("data.path is required for cifar10")
        return Splits(*cifar10_splits(d["path"], d["seed"], d["n_train"], d["n_val"], d["n_test"]))
    raise ConfigFileError(f"unknown data.source {d['source']!r}")


def save_state(path: Path, params: dict, buffers: dict) -> None:
    path.write_text(T.dump_named({**params, **buffers}))


def load_state(path) -> tuple[dict, dict]:
    named = T.load_named(Path(path).read_text())
    buffers = {k: v for k, v in named.items() if k.endswith(("/running_mean", "/running_var"))}
    params = {k: v for k, v in named.items() if k not in buffers}
    return params, buffers


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# commands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = model_from(cfg)
    data = data_from(cfg)
    out = Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": __version__,
        "config": cfg,
        "seeds": {"data": cfg["data"]["seed"], "train": cfg["train"]["seed"]},
        "data_constants": {"mean": list(data.train.mean), "std": list(data.train.std)},
        "cost": {k: v for k, v in count_params(spec).to_dict().items() if k != "per_layer"},
    }
    (out / "manifest.json").write_text(_dump_json(manifest))
    result = train(spec, data, train_config_from(cfg), out / "metrics.jsonl")
    save_state(out / "params.txt", result.params, result.buffers)
    m = result.metrics
    print(json.dumps({"test_acc": m.test_acc, "nan_onset_epoch": m.nan_onset_epoch,
                      "output": str(out)}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = model_from(cfg)
    params, buffers = load_state(args.params)
    test = data_from(cfg).test
    bs = args.batch_size or cfg["train"]["batch_size"]
    acc = accuracy(predict(spec, params, buffers, test.images, bs), test.labels)
    print(json.dumps({"batch_size": bs, "test_acc": acc, "n": len(test)}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    if args.layer not in gradchecks.LAYERS:
        print(f"error: unknown layer {args.layer!r}; choose from {', '.join(gradchecks.LAYERS)}",
              file=sys.stderr)
        return 2
    tol = 1e-4
    worst: dict[str, float] = {}
    for seed in range(args.seed, args.seed + args.seeds):
        for group, err in gradchecks.check_layer(args.layer, seed).items():
            worst[group] = max(worst.get(group, 0.0), err)
    ok = all(v < tol for v in worst.values())
    for group, err in worst.items():
        print(f"{args.layer} {group:24s} max_rel_err={err:.3e} {'ok' if err < tol else 'FAIL'}")
    return 0 if ok else 1


def cmd_params(args) -> int:
    g = parse_g(args.g)
    report = {"toy": count_params(build_toycnn(args.norm, args.r, g, args.width, args.classes,
                                               args.image_size)).to_dict()}
    if args.mnv2:
        fig = published_figures(args.norm, args.r, g)
        policies = POLICIES if args.policy is None else (args.policy,)
        table = {}
        for pol in policies:
            rep = mobilenetv2_cost_table(args.norm, args.r, g, pol)
            table[pol] = {"params": rep.params, "mult_adds": rep.mult_adds,
                          "params_M": f"{rep.params / 1e6:.2f}M",
                          "mult_adds_M": f"{rep.mult_adds / 1e6:.2f}M"}
        report["mnv2"] = {"policies": table,
                          "published": None if fig is None else {"params": fig[0], "mult_adds": fig[1]}}
    sys.stdout.write(_dump_json(report))
    return 0


def cmd_dump_affine(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = model_from(cfg)
    dn = [l for l in spec.norm_layers() if l.norm in DN_VARIANTS]
    if not dn:
        print("error: model has no dynamic normalization layers", file=sys.stderr)
        return 2
    params, buffers = load_state(args.params)
    ds: Dataset = getattr(data_from(cfg), args.split)
    classes = sorted(set(ds.labels.tolist())) if not args.classes else [int(c) for c in args.classes.split(",")]
    keep = np.isin(ds.labels, classes)
    images, labels = ds.images[keep], ds.labels[keep]
    taps: dict = {}
    predict(spec, params, buffers, images, cfg["train"]["batch_size"], taps)
    out = Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    selected = [dn[0], dn[-1]] if len(dn) > 1 else [dn[0]]
    rows = []
    for tag, layer in zip(("start", "end"), selected):
        alpha, lam = taps[f"{layer.name}/alpha"], taps[f"{layer.name}/lambda"]
        if alpha.ndim == 1:  # batch-shared variants
            alpha = np.broadcast_to(alpha, (len(labels), alpha.shape[0]))
            lam = np.broadcast_to(lam, alpha.shape)
        (out / f"affine_{tag}_alpha.txt").write_text(T.dumps(alpha))
        (out / f"affine_{tag}_lambda.txt").write_text(T.dumps(lam))
        for k in classes:
            sel = labels == k
            am, lm = alpha[sel].mean(axis=0), lam[sel].mean(axis=0)
            for ch in range(alpha.shape[1]):
                rows.append([layer.name, k, ch, format(float(am[ch]), ".17g"), format(float(lm[ch]), ".17g")])
    with open(out / "affine.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "class", "channel", "alpha_mean", "lambda_mean"])
        w.writerows(rows)
    print(json.dumps({"csv": str(out / "affine.csv"), "rows": len(rows),
                      "layers": [l.name for l in selected]}, sort_keys=True))
    return 0


def cmd_robustness(args) -> int:
    cfg = experiments.SweepConfig(lr=args.lr, epochs=args.epochs, n_train=args.n_train, n_val=args.n_val,
                                  seeds=tuple(range(args.seeds)))
    if args.cifar:
        data = experiments.cifar_splits(args.cifar, cfg.n_train, cfg.n_val)
    else:
        data = experiments.synth_splits(cfg.n_train, cfg.n_val, size=args.size)
    res = experiments.run_sweep(data, cfg)
    checks = res.checks(cfg.margin)
    out = {"seconds": round(res.seconds, 1),
           "accuracy": {f"{n}/{c}": a for (n, c), a in sorted(res.acc.items())},
           "nan_onset": {f"{n}/{c}": e for (n, c), e in sorted(res.nan.items())},
           "checks": {k: {"pass": ok, "detail": d} for k, (ok, d) in checks.items()}}
    sys.stdout.write(_dump_json(out))
    return 0 if all(ok for ok, _ in checks.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynorm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_overrides(sp):
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        return sp

    sp = with_overrides(sub.add_parser("train", help="train a model from a JSON config"))
    sp.add_argument("config")
    sp.set_defaults(func=cmd_train)

    sp = with_overrides(sub.add_parser("eval", help="test accuracy of saved parameters"))
    sp.add_argument("params")
    sp.add_argument("config")
    sp.add_argument("--batch-size", type=int, default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of one layer")
    sp.add_argument("layer")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("params", help="parameter and Mult-Adds counts")
    sp.add_argument("--mnv2", action="store_true", help="also print the MobileNetV2 comparison table")
    sp.add_argument("--norm", default="bn")
    sp.add_argument("-r", type=int, default=4)
    sp.add_argument("-g", default="1")
    sp.add_argument("--policy", choices=POLICIES, default=None)
    sp.add_argument("--width", type=float, default=1.0)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--image-size", type=int, default=32)
    sp.set_defaults(func=cmd_params)

    sp = with_overrides(sub.add_parser("dump-affine", help="per-class mean scale/shift of DN layers"))
    sp.add_argument("params")
    sp.add_argument("config")
    sp.add_argument("--classes", default=None, help="comma-separated class ids")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_dump_affine)

    sp = sub.add_parser("robustness", help="BN vs DN-B sweep over lr and batch size")
    sp.add_argument("--cifar", default=None, help="CIFAR-10 binary directory (synthetic data if omitted)")
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--n-train", type=int, default=10_000)
    sp.add_argument("--n-val", type=int, default=1_000)
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--size", type=int, default=32, help="synthetic image size")
    sp.set_defaults(func=cmd_robustness)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigFileError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
