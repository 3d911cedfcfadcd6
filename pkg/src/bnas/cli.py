"""Command-line driver: search, train, eval, export, inspect.

Every run echoes its effective configuration into the output directory before
doing any work, so a run is reproducible from that file plus the seed.  CLI
flags override config-file values.  ``BNAS_THREADS`` caps the kernel execution
lanes (see bnas.kernels).
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import serialization, svg
from .data import SyntheticSpec, batch_stream, load_cifar10, make_synthetic
from .errors import BnasError, ConfigError
from .ops import PRIMITIVES
from .search import SearchConfig, run_search
from .supernet import DerivedNetwork, NetworkConfig
from .training import OptimConfig, Optimizer, evaluate, train_epoch
from .util import JsonlWriter, make_rng, now_ms, read_jsonl

SEARCH_FIELDS = {f.name for f in dataclasses.fields(SearchConfig)}


def _load_config_file(path):
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    # configs echoed into run directories nest their settings under a section
    # key; flatten so a run reproduces from its own echo
    for section in ("search", "train"):
        if isinstance(cfg.get(section), dict):
            cfg = {**cfg, **cfg[section]}
    return cfg


def _parse_dataset(arg):
    """'synthetic', 'synthetic:spec.json' or 'cifar10:PATH'."""
    if arg is None:
        return ("synthetic", None)
    kind, _, rest = arg.partition(":")
    if kind == "synthetic":
        return ("synthetic", rest or None)
    if kind == "cifar10":
        if not rest:
            raise ConfigError("cifar10 dataset needs a path: cifar10:PATH")
        return ("cifar10", rest)
    raise ConfigError(f"unknown dataset {arg!r}; use synthetic[:SPEC] or cifar10:PATH")


def _build_dataset(dataset, file_cfg, seed):
    kind, arg = dataset
    if kind == "cifar10":
        train, test = load_cifar10(arg)
        return train, test, {"dataset": f"cifar10:{arg}", "classes": 10, "in_channels": 3,
                             "size": 32}
    spec_kwargs = dict(file_cfg.get("synthetic", {}))
    if arg:
        with open(arg, "r", encoding="utf-8") as fh:
            spec_kwargs.update(json.load(fh))
    spec = SyntheticSpec(**spec_kwargs)
    train, test, info = make_synthetic(spec, seed)
    return train, test, {"dataset": "synthetic", "classes": spec.classes,
                         "in_channels": spec.channels, "size": spec.size,
                         "synthetic": dataclasses.asdict(spec),
                         "separability_sigma": info["separability_sigma"]}


def _echo_config(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _search_config(args, file_cfg, ds_meta):
    cfg = {k: v for k, v in file_cfg.items() if k in SEARCH_FIELDS}
    cfg.setdefault("classes", ds_meta["classes"])
    cfg.setdefault("in_channels", ds_meta["in_channels"])
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "seed" not in cfg:
        raise ConfigError("a seed is mandatory for search (--seed or config file)")
    if args.mode:
        cfg["mode"] = args.mode
    if args.k0 is not None:
        cfg["op_set"] = PRIMITIVES[: args.k0]
    elif "op_set" in cfg:
        cfg["op_set"] = tuple(cfg["op_set"])
    if args.cells is not None:
        cfg["cells"] = args.cells
    if args.channels is not None:
        cfg["init_channels"] = args.channels
    return SearchConfig(**cfg)


def _report_plots(records, out_dir):
    evals = [r for r in records if r.get("type") == "eval"]
    rounds = [r for r in records if r.get("type") == "round"]
    by_round = {}
    for r in evals:
        by_round.setdefault(r["round"], []).append(r["accuracy"])
    acc_series = [
        ("mean", [(rd, sum(a) / len(a)) for rd, a in sorted(by_round.items())]),
        ("max", [(rd, max(a)) for rd, a in sorted(by_round.items())]),
    ]
    _write(os.path.join(out_dir, "accuracy_per_round.svg"),
           svg.line_chart(acc_series, "sampled accuracy per round"))
    traj = {}
    for r in rounds:
        for table in r["s"].values():
            for op, val in table.items():
                traj.setdefault(op, {}).setdefault(r["round"], []).append(val)
    s_series = [
        (op, [(rd, sum(v) / len(v)) for rd, v in sorted(vals.items())])
        for op, vals in sorted(traj.items())
    ]
    _write(os.path.join(out_dir, "s_trajectories.svg"),
           svg.line_chart(s_series, "mean selection likelihood per op"))


def cmd_search(args):
    file_cfg = _load_config_file(args.config)
    dataset = _parse_dataset(args.dataset or file_cfg.get("dataset"))
    seed = args.seed if args.seed is not None else file_cfg.get("seed")
    if seed is None:
        raise ConfigError("a seed is mandatory for search (--seed or config file)")
    (train_images, train_labels), _, ds_meta = _build_dataset(dataset, file_cfg, seed)
    config = _search_config(args, file_cfg, ds_meta)
    out_dir = args.out
    _echo_config(out_dir, {"command": "search", **ds_meta,
                           "search": {**dataclasses.asdict(config),
                                      "op_set": list(config.op_set)}})
    with JsonlWriter(os.path.join(out_dir, "report.jsonl")) as report, \
            JsonlWriter(os.path.join(out_dir, "progress.jsonl")) as progress:
        genotype, network = run_search(config, train_images, train_labels,
                                       report=report, progress=progress)
        _write(os.path.join(out_dir, "arch.genotype.json"),
               serialization.export_genotype_json(genotype))
        _write(os.path.join(out_dir, "arch.dot"), serialization.export_dot(genotype))
        with open(os.path.join(out_dir, "supernet.bnas"), "wb") as fh:
            fh.write(serialization.save_checkpoint(network, "full"))
        _report_plots(report.records, out_dir)
    print(f"search done: {os.path.join(out_dir, 'arch.genotype.json')}")
    return 0


def _load_genotype(path):
    with open(path, "r", encoding="utf-8") as fh:
        return serialization.parse_genotype_json(fh.read())


def _derived_net_config(args, file_cfg, ds_meta, genotype):
    meta = genotype.meta
    return NetworkConfig(
        classes=ds_meta["classes"],
        in_channels=ds_meta["in_channels"],
        init_channels=args.channels or file_cfg.get("init_channels")
        or meta.get("init_channels", 16),
        cells=args.cells or file_cfg.get("cells") or 6,
        precision={"full_precision": "full", "bnn": "bnn", "one_bit": "one_bit"}.get(
            args.mode or file_cfg.get("mode") or meta.get("precision", "bnn"),
            meta.get("precision", "bnn")),
        bin_mode=meta.get("bin_mode", "xnor"),
        theta=file_cfg.get("theta", 1e-4),
        divisor=1,
        seed=args.seed if args.seed is not None else file_cfg.get("seed", 0),
    )


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    dataset = _parse_dataset(args.dataset or file_cfg.get("dataset"))
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    (train_images, train_labels), (test_images, test_labels), ds_meta = _build_dataset(
        dataset, file_cfg, seed)
    genotype = _load_genotype(args.genotype)
    net_cfg = _derived_net_config(args, file_cfg, ds_meta, genotype)
    epochs = args.epochs if args.epochs is not None else file_cfg.get("epochs", 20)
    out_dir = args.out
    train_section = {
        "seed": seed, "epochs": epochs,
        "cells": net_cfg.cells, "init_channels": net_cfg.init_channels,
        "lr": file_cfg.get("lr", 0.025), "momentum": file_cfg.get("momentum", 0.9),
        "weight_decay": file_cfg.get("weight_decay", 3e-4),
        "clip_norm": file_cfg.get("clip_norm", 5.0),
        "batch_size": file_cfg.get("batch_size", 96),
        "loss": file_cfg.get("loss", "mse"), "augment": file_cfg.get("augment", False),
    }
    _echo_config(out_dir, {"command": "train", **ds_meta, "seed": seed,
                           "genotype": os.path.abspath(args.genotype),
                           "train": train_section,
                           "network": {**dataclasses.asdict(net_cfg),
                                       "op_set": list(net_cfg.op_set),
                                       "dtype": "float32"}})
    network = DerivedNetwork(genotype, net_cfg)
    optimizer = Optimizer(OptimConfig(
        lr=file_cfg.get("lr", 0.025), momentum=file_cfg.get("momentum", 0.9),
        weight_decay=file_cfg.get("weight_decay", 3e-4),
        clip_norm=file_cfg.get("clip_norm", 5.0), total_epochs=max(epochs, 1),
    ))
    shuffle_rng = make_rng(seed, 30)
    augment_rng = make_rng(seed, 31) if file_cfg.get("augment", False) else None
    with JsonlWriter(os.path.join(out_dir, "progress.jsonl")) as progress:
        for epoch in range(epochs):
            t0 = now_ms()
            lr = optimizer.lr()
            batches = batch_stream(train_images, train_labels, net_cfg.classes,
                                   file_cfg.get("batch_size", 96), rng=shuffle_rng,
                                   augment_rng=augment_rng)
            loss = train_epoch(network, batches, optimizer, lr=lr,
                               loss_kind=file_cfg.get("loss", "mse"))
            optimizer.epoch = epoch + 1
            acc = None
            if test_labels.size:
                acc = evaluate(network, test_images, test_labels)
            progress.write({"phase": "derived", "epoch": epoch + 1, "lr": lr,
                            "loss": loss, "acc": acc, "wall_ms": now_ms() - t0})
    with open(os.path.join(out_dir, "model.bnas"), "wb") as fh:
        fh.write(serialization.save_checkpoint(network, "full"))
    final_acc = evaluate(network, test_images, test_labels) if test_labels.size else None
    metrics = {"epochs": epochs, "test_accuracy": final_acc,
               "weights": network.num_weights()}
    _write(os.path.join(out_dir, "metrics.json"),
           json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(f"train done: accuracy={final_acc}")
    return 0


def cmd_eval(args):
    file_cfg = _load_config_file(args.config)
    dataset = _parse_dataset(args.dataset or file_cfg.get("dataset"))
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    _, (test_images, test_labels), ds_meta = _build_dataset(dataset, file_cfg, seed)
    genotype = _load_genotype(args.genotype)
    net_cfg = _derived_net_config(args, file_cfg, ds_meta, genotype)
    network = DerivedNetwork(genotype, net_cfg)
    with open(args.checkpoint, "rb") as fh:
        serialization.load_checkpoint(fh.read(), network)
    acc = evaluate(network, test_images, test_labels)
    print(json.dumps({"accuracy": acc, "examples": int(test_labels.size)}))
    return 0


def cmd_export(args):
    if args.genotype:
        genotype = _load_genotype(args.genotype)
        if args.format != "dot":
            raise ConfigError("genotype export supports --format dot")
        text = serialization.export_dot(genotype)
        if args.out:
            _write(args.out, text)
        else:
            sys.stdout.write(text)
        return 0
    if not args.checkpoint:
        raise ConfigError("export needs --genotype or --checkpoint")
    with open(args.checkpoint, "rb") as fh:
        records = serialization.read_records(fh.read())
    if args.format == "bitpacked":
        out_records = serialization.bitpacked_records(records)
    elif args.format == "full":
        out_records = records
    else:
        raise ConfigError("checkpoint export supports --format bitpacked or full")
    data = serialization.write_records(out_records)
    out = args.out or (os.path.splitext(args.checkpoint)[0] + f".{args.format}.bnas")
    with open(out, "wb") as fh:
        fh.write(data)
    print(f"wrote {out} ({len(data)} bytes)")
    return 0


def _inspect_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    summary = serialization.checkpoint_summary(data)
    kernels = 0
    packed_forecast = 12
    for t in summary["tensors"]:
        n = int(np.prod(t["dims"])) if t["dims"] else 1
        name = t["name"]
        record_header = 4 + len(name.encode()) + 4 + 4 * len(t["dims"]) + 4
        if name.endswith(".x"):
            kernels += 1
            base = name[:-2]
            packed_forecast += (4 + len((base + ".signs").encode()) + 4 + 4 * len(t["dims"]) + 4
                                + -(-n // 8))
            packed_forecast += 4 + len((base + ".a_hat").encode()) + 4 + 4 + 4 + 4
        elif name.endswith(".a") and any(
                u["name"] == name[:-2] + ".x" for u in summary["tensors"]):
            continue
        else:
            packed_forecast += record_header + t["payload_bytes"]
    elements = sum(int(np.prod(t["dims"])) if t["dims"] else 1 for t in summary["tensors"])
    lines = [f"checkpoint: {path}",
             f"  tensors: {summary['tensor_count']}",
             f"  tensor elements: {elements}",
             f"  payload bytes: {summary['payload_bytes']}",
             f"  packed payload bytes: {summary['packed_payload_bytes']}",
             f"  total bytes: {summary['total_bytes']}"]
    if kernels:
        lines.append(f"  binarized kernels: {kernels}")
        lines.append(f"  bitpacked size forecast: {packed_forecast} bytes")
    lines.append("  per tensor:")
    for t in summary["tensors"]:
        dims = "x".join(map(str, t["dims"])) or "scalar"
        lines.append(f"    {t['name']}  {t['dtype']}  {dims}  {t['payload_bytes']}B")
    return "\n".join(lines)


def _inspect_genotype(path):
    genotype = _load_genotype(path)
    lines = [f"genotype: {path}"]
    for kind in ("normal", "reduce"):
        entries = getattr(genotype, kind)
        lines.append(f"  {kind}: {len(entries)} entries")
        for op, frm, to in entries:
            lines.append(f"    B[{frm}] -> B[{to}]  {op}")
    lines.append(f"  meta: {json.dumps(genotype.meta, sort_keys=True)}")
    return "\n".join(lines)


def _inspect_report(path):
    records = read_jsonl(path)
    rounds = [r for r in records if r.get("type") == "round"]
    evals = [r for r in records if r.get("type") == "eval"]
    if rounds or evals:
        lines = [f"search report: {path}",
                 f"  rounds: {len(rounds)}",
                 f"  sampled evaluations: {len(evals)}"]
        for r in rounds:
            lines.append(f"  round {r['round']} (K -> {r['k_after']}):")
            for key, table in sorted(r["s"].items()):
                cells = ", ".join(f"{op}={val:.4f}" for op, val in sorted(table.items()))
                lines.append(f"    s[{key}]: {cells}")
            lines.append(f"    pruned: {json.dumps(r['pruned'], sort_keys=True)}")
        return "\n".join(lines)
    phases = {}
    for r in records:
        phases.setdefault(r.get("phase", "?"), 0)
        phases[r.get("phase", "?")] += 1
    lines = [f"progress log: {path}"]
    for phase, count in sorted(phases.items()):
        lines.append(f"  {phase}: {count} epochs")
    return "\n".join(lines)


def cmd_inspect(args):
    path = args.path
    if path.endswith(".bnas"):
        print(_inspect_checkpoint(path))
    elif path.endswith(".genotype.json"):
        print(_inspect_genotype(path))
    elif path.endswith(".jsonl"):
        print(_inspect_report(path))
    else:
        raise ConfigError(f"unknown file type for inspect: {path!r}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="bnas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=("full_precision", "bnn", "one_bit"), default=None)
        p.add_argument("--dataset", help="synthetic[:SPEC.json] or cifar10:PATH")
        p.add_argument("--cells", type=int, default=None)
        p.add_argument("--channels", type=int, default=None)

    p = sub.add_parser("search", help="run the pruning search and derive a genotype")
    common(p)
    p.add_argument("--k0", type=int, default=None,
                   help="truncate the default op set to its first K0 entries")
    p.add_argument("--out", default="run", help="output directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train a derived architecture from a genotype")
    common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default="run-train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    common(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="emit dot / bitpacked / full artifacts")
    p.add_argument("--genotype")
    p.add_argument("--checkpoint")
    p.add_argument("--format", choices=("dot", "bitpacked", "full"), default="dot")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("inspect", help="summarize a checkpoint/genotype/report")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BnasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
