"""Command-line interface: ``sodade <command> [options]``.

Every command prints one JSON summary line to stdout,
``{"command": ..., "seed": ..., "primary_metric": ...}``.
Exit codes: 0 success, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._alloc import tune_allocator
from .dataio import (DataError, load_aliases, load_catechol, load_spange, split_solvents,
                     default_split_types, write_catechol, write_spange)
from .downstream import HeadConfig, export_predictions, run_benchmark
from .model import ModelConfig
from .pretrain import (Checkpoint, NumericError, TrainConfig, evaluate_test_table, evaluate_validation,
                       train, write_history)

log = logging.getLogger("sodade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

SECTIONS = {"train": TrainConfig, "model": ModelConfig, "head": HeadConfig}


class UsageError(Exception):
    pass


# --- run configuration ---------------------------------------------------

def _field_types():
    return {sec: {f.name: f for f in fields(cls)} for sec, cls in SECTIONS.items()}


def _resolve_key(key):
    """Map ``key`` or ``section.key`` to (section, field)."""
    table = _field_types()
    if "." in key:
        sec, name = key.split(".", 1)
        if sec not in table or name not in table[sec]:
            raise UsageError(f"unknown config key {key!r}")
        return sec, name
    owners = [sec for sec in table if key in table[sec]]
    if not owners:
        raise UsageError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise UsageError(f"ambiguous config key {key!r}; use one of " + ", ".join(f"{s}.{key}" for s in owners))
    return owners[0], key


def _convert(sec, name, text):
    default = getattr(SECTIONS[sec](), name)
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.replace("x", ",").split(",") if x.strip())
        return text
    except ValueError:
        raise UsageError(f"bad value for {sec}.{name}: {text!r}") from None


def parse_assignments(lines, origin="<flags>"):
    """``key=value`` lines (``#`` comments allowed) -> {(section, field): value}."""
    out = {}
    for i, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{i}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        sec, name = _resolve_key(key.strip())
        out[(sec, name)] = _convert(sec, name, value)
    return out


class RunConfig:
    """Resolved TrainConfig/ModelConfig/HeadConfig: defaults < config file < flags."""

    def __init__(self, file_values=None, flag_values=None):
        merged = {}
        merged.update(file_values or {})
        merged.update(flag_values or {})
        self.values = merged
        try:
            self.train = TrainConfig(**self._section("train"))
            self.model = ModelConfig(**self._section("model"))
            self.head = HeadConfig(**self._section("head"))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None

    def _section(self, sec):
        return {name: v for (s, name), v in self.values.items() if s == sec}

    @classmethod
    def from_sources(cls, path=None, assignments=(), seed=None):
        file_values = parse_assignments(Path(path).read_text().splitlines(), str(path)) if path else {}
        flag_values = parse_assignments(assignments)
        if seed is not None:
            for sec in ("train", "head"):
                flag_values[(sec, "seed")] = seed
        return cls(file_values, flag_values)

    def lines(self):
        out = []
        for sec, obj in (("train", self.train), ("model", self.model), ("head", self.head)):
            for k, v in obj.to_dict().items():
                if isinstance(v, (tuple, list)):
                    v = ",".join(str(x) for x in v)
                out.append(f"{sec}.{k}={v}")
        return out

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n")


# --- helpers -------------------------------------------------------------

def _summary(command, seed, metric, name=None, **extra):
    if isinstance(metric, float) and not math.isfinite(metric):
        metric = None
    rec = {"command": command, "seed": seed, "primary_metric": metric}
    if name:
        rec["metric_name"] = name
    rec.update(extra)
    print(json.dumps(rec, sort_keys=False))


def _existing(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _load_tables(args, need_catechol=False):
    table = load_spange(_existing(args.spange, "spange"))
    reactions = None
    if getattr(args, "catechol", None) or need_catechol:
        aliases = load_aliases(_existing(args.aliases, "aliases")) if getattr(args, "aliases", None) else None
        reactions = load_catechol(_existing(args.catechol, "catechol"), table, aliases)
    return table, reactions


def _types(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else None


def _make_split(table, reactions, args, seed):
    val_types, test_types = default_split_types(table, reactions)
    val_types = _types(args.val_types) or val_types
    test_types = _types(args.test_types) or test_types
    split_seed = args.split_seed if args.split_seed is not None else seed
    log.info("split types: val=%s test=%s seed=%d", ",".join(val_types), ",".join(test_types), split_seed)
    return split_solvents(table, val_types, test_types, split_seed)


def _load_ckpt(path):
    return Checkpoint.load(_existing(path, "ckpt"))


# --- commands ------------------------------------------------------------

def _pretrain_one(args, cfg: RunConfig, table, reactions, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved_config.txt")
    for line in cfg.lines():
        log.info("config %s", line)
    split = _make_split(table, reactions, args, cfg.train.seed)
    model_cfg = cfg.model
    if args.no_type_token:
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "use_type_token": False})
    snap_dir = out / "snapshots"

    def on_snapshot(epoch, ckpt):
        snap_dir.mkdir(exist_ok=True)
        ckpt.save(snap_dir / f"epoch_{epoch:05d}.sodade")

    try:
        ckpt = train(table, split, model_cfg, cfg.train, args.snapshot_every, on_snapshot)
    except NumericError as exc:
        ckpt = getattr(exc, "checkpoint", None)
        if ckpt is not None:
            ckpt.save(out / "last_good.sodade")
        raise
    ckpt.save(out / "model.sodade")
    write_history(ckpt.history, out / "history.csv")
    return ckpt


def cmd_pretrain(args):
    cfg = RunConfig.from_sources(args.config, args.set, args.seed)
    table, reactions = _load_tables(args)
    out = Path(args.out)
    if args.grid:
        grid = Path(args.grid)
        configs = sorted(grid.glob("*.cfg")) + sorted(grid.glob("*.txt"))
        if not configs:
            raise UsageError(f"no *.cfg or *.txt config files in {grid}")
        rows = []
        for path in configs:
            cfg = RunConfig.from_sources(path, args.set, args.seed)
            ckpt = _pretrain_one(args, cfg, table, reactions, out / path.stem)
            rows.append((path.stem, ckpt.best_val, ckpt.best_epoch))
        out.mkdir(parents=True, exist_ok=True)
        with (out / "grid_summary.csv").open("w") as fh:
            fh.write("config,best_val,best_epoch\n")
            for name, val, ep in rows:
                fh.write(f"{name},{val!r},{ep}\n")
        best = min(rows, key=lambda r: r[1])
        _summary("pretrain", args.seed, best[1], "best_val_mse", best_config=best[0])
        return
    ckpt = _pretrain_one(args, cfg, table, reactions, out)
    _summary("pretrain", cfg.train.seed, ckpt.best_val, "best_val_mse", epochs=len(ckpt.history))


def cmd_eval(args):
    ckpt = _load_ckpt(args.ckpt)
    table = load_spange(_existing(args.spange, "spange"))
    if ckpt.split is None:
        raise DataError("checkpoint carries no data split")
    ids = ckpt.split.val_ids if args.split == "val" else ckpt.split.test_ids
    records = table.subset(ids)
    model = ckpt.model()
    if args.split == "val":
        mse = evaluate_validation(model, records, ckpt.schema, ckpt.vocab)
        print(f"validation normalized MSE {mse:.6f}", file=sys.stderr)
        _summary("eval", ckpt.seed, mse, "val_normalized_mse")
        return
    tbl = evaluate_test_table(model, records, ckpt.schema, ckpt.vocab)
    if args.out:
        with Path(args.out).open("w") as fh:
            fh.write("property,mse\n")
            for k, v in tbl.items():
                fh.write(f"{k},{v!r}\n")
    for k, v in tbl.items():
        print(f"{k:>14s} {v:.6g}", file=sys.stderr)
    _summary("eval", ckpt.seed, tbl["Average MSE"], "test_average_mse")


def cmd_fingerprint(args):
    from .fingerprint import Extractor, write_fingerprints

    ckpt = _load_ckpt(args.ckpt)
    table = load_spange(_existing(args.spange, "spange"))
    ex = Extractor(ckpt)
    if args.solvent:
        if args.solvent not in table:
            raise DataError(f"unknown solvent {args.solvent!r}")
        fps = [ex(table[args.solvent])]
        print(" ".join(repr(float(x)) for x in fps[0].vector))
    else:
        fps = ex.all([r for r in table.records if r.n_present > 0])
    if args.out:
        write_fingerprints(fps, args.out)
    norms = [float(np.linalg.norm(fp.vector)) for fp in fps]
    _summary("fingerprint", ckpt.seed, float(np.mean(norms)), "mean_l2_norm", count=len(fps))


def cmd_benchmark(args):
    cfg = RunConfig.from_sources(args.config, args.set, args.seed)
    ckpt = _load_ckpt(args.ckpt)
    table, reactions = _load_tables(args, need_catechol=True)
    mode = "finetuned" if args.mode in ("finetune", "finetuned") else args.mode
    result = run_benchmark(reactions, table, ckpt, cfg.head, args.task, mode, max_folds=args.max_folds)
    if args.out:
        export_predictions(result, args.out)
    line = f"{result.task},{result.mode},{result.aggregate!r}"
    if args.results:
        path = Path(args.results)
        new = not path.exists()
        with path.open("a") as fh:
            if new:
                fh.write("task,mode,mse\n")
            fh.write(line + "\n")
    print(line, file=sys.stderr)
    _summary("benchmark", cfg.head.seed, result.aggregate, "aggregate_mse", task=result.task, mode=result.mode,
             folds=len(result.fold_mse))


def cmd_baseline(args):
    from .baselines import avg_fit_predict, gp_fit_predict, write_comparison
    from .dataio import compute_schema

    table, reactions = _load_tables(args)
    ckpt = _load_ckpt(args.ckpt) if args.ckpt else None
    if ckpt is not None and ckpt.split is not None:
        split = ckpt.split
        seed = ckpt.seed
    else:
        seed = args.seed if args.seed is not None else 0
        split = _make_split(table, reactions, args, seed)
    schema = compute_schema(table, split.train_ids)
    test = table.subset(split.test_ids)
    avg = avg_fit_predict(schema, test) if args.model in ("avg", "all") else None
    gp = None
    if args.model in ("gp", "all"):
        train_ids = sorted(set(split.train_ids) | set(split.val_ids))
        gp = gp_fit_predict(schema, table.subset(train_ids), test)
    sodade = evaluate_test_table(ckpt.model(), test, ckpt.schema, ckpt.vocab) if ckpt is not None else None
    if args.out:
        note = "GP trained on train+validation solvents; ECFP radius 2, 2048 bits; Tanimoto kernel"
        write_comparison(args.out, avg, gp, sodade, note)
    chosen = {"avg": avg, "gp": gp, "all": gp}[args.model]
    extra = {}
    for name, tbl in (("avg", avg), ("gp", gp), ("sodade", sodade)):
        if tbl is not None:
            extra[f"{name}_average_mse"] = tbl["Average MSE"]
            print(f"{name:>7s} average MSE {tbl['Average MSE']:.6g}", file=sys.stderr)
    _summary("baseline", seed, chosen["Average MSE"], f"{'gp' if args.model == 'all' else args.model}_average_mse",
             **extra)


def cmd_trajectory(args):
    from .fingerprint import embedding_trajectory, write_trajectory

    table, reactions = _load_tables(args, need_catechol=bool(args.catechol))
    snap_dir = Path(args.snapshots)
    paths = sorted(snap_dir.glob("*.sodade")) if snap_dir.is_dir() else [_existing(args.snapshots, "snapshots")]
    if not paths:
        raise UsageError(f"no *.sodade snapshots in {snap_dir}")
    snaps = [(p.stem, Checkpoint.load(p)) for p in paths]
    records = [r for r in table.records if r.n_present > 0]
    if args.solvents == "catechol" and reactions:
        names = set()
        for r in reactions:
            names.update(n for n in (r.solvent_a, r.solvent_b) if n)
        records = [r for r in records if r.name in names]
    rows, proj = embedding_trajectory(snaps, records, reactions or ())
    write_trajectory(rows, args.out)
    _summary("trajectory", snaps[0][1].seed, float(proj.explained.sum()), "explained_variance_2d",
             snapshots=len(snaps), solvents=len(records))


def cmd_synth(args):
    from .synthetic import make_reaction_table, make_solvent_table

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table, latents = make_solvent_table(args.n, seed=args.seed)
    reactions = make_reaction_table(table, latents, seed=args.seed)
    write_spange(table, out / "spange.csv")
    write_catechol(reactions, out / "catechol.csv")
    np.savetxt(out / "latents.csv", latents, delimiter=",", header="z1,z2,z3", comments="")
    _summary("synth", args.seed, float(len(table)), "solvents", reactions=len(reactions))


# --- parser --------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p = argparse.ArgumentParser(prog="sodade", description="Solvent property transformer pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_command(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    def data_args(sp, catechol=False):
        sp.add_argument("--spange", help="solvent property table (csv)")
        sp.add_argument("--catechol", required=catechol, help="reaction table (csv)")
        sp.add_argument("--aliases", help="solvent name alias map (csv: from,to)")

    def config_args(sp):
        sp.add_argument("--config", help="key=value run configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable), e.g. train.max_epochs=50")
        sp.add_argument("--seed", type=int, help="seed for training, sampling and heads")

    def split_args(sp):
        sp.add_argument("--val-types", help="comma-separated solvent types for validation")
        sp.add_argument("--test-types", help="comma-separated solvent types for test")
        sp.add_argument("--split-seed", type=int)

    sp = add_command("pretrain", help="pretrain the property transformer")
    data_args(sp)
    config_args(sp)
    split_args(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--snapshot-every", type=int, help="save a snapshot every N epochs")
    sp.add_argument("--grid", help="directory of config files; one run per file")
    sp.add_argument("--no-type-token", action="store_true", help="drop the solvent-type token")
    sp.set_defaults(func=cmd_pretrain)

    sp = add_command("eval", help="evaluate a checkpoint on its validation or test solvents")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--spange")
    sp.add_argument("--split", choices=["val", "test"], default="val")
    sp.add_argument("--out", help="per-property table (test split)")
    sp.set_defaults(func=cmd_eval)

    sp = add_command("fingerprint", help="export learned solvent fingerprints")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--spange")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--solvent")
    g.add_argument("--all", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fingerprint)

    sp = add_command("benchmark", help="cross-validated reaction-yield benchmark")
    sp.add_argument("--ckpt", required=True)
    data_args(sp, catechol=True)
    config_args(sp)
    sp.add_argument("--task", choices=["single", "full"], default="single")
    sp.add_argument("--mode", choices=["frozen", "finetune", "finetuned"], default="frozen")
    sp.add_argument("--out", help="per-row predictions file")
    sp.add_argument("--results", help="append a task,mode,mse line to this file")
    sp.add_argument("--max-folds", type=int, help="only run the first N folds (smoke runs)")
    sp.set_defaults(func=cmd_benchmark)

    sp = add_command("baseline", help="AVG and GP property baselines on the test solvents")
    data_args(sp)
    split_args(sp)
    sp.add_argument("--model", choices=["avg", "gp", "all"], default="all")
    sp.add_argument("--ckpt", help="take the split from this checkpoint and add its column")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="comparison table property,avg_mse,gp_mse,sodade_mse")
    sp.set_defaults(func=cmd_baseline)

    sp = add_command("trajectory", help="PCA trajectories of fingerprints across snapshots")
    sp.add_argument("--snapshots", required=True, help="directory of snapshot checkpoints")
    data_args(sp)
    sp.add_argument("--solvents", choices=["all", "catechol"], default="all")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_trajectory)

    sp = add_command("synth", help="write a synthetic solvent table and reaction table")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sodade {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"sodade {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ad.TrainingError, FloatingPointError) as exc:
        print(f"sodade {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
