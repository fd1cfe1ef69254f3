"""``subbyte-har`` command line.

Exit status: 0 success, 1 usage/configuration error, 2 data error,
3 numeric or training failure.  Failures print one line to stderr::

    subbyte-har: error status=<n> kind=<ExceptionName> message=<text>
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, SubByteError

ENV_DIR = "SUBBYTE_HAR_DIR"
PROG = "subbyte-har"


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def out_root() -> Path:
    return Path(os.environ.get(ENV_DIR, "subbyte_har_out"))


def _out(args, default_name: str) -> Path:
    path = Path(args.out) if args.out else out_root() / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _csv_list(text, cast=int):
    return tuple(cast(v) for v in text.split(",") if v.strip())


def _header(args):
    print(f"# {PROG} {args.command} seed={args.seed}")


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args):
    from .data import save_csv, synth_har
    ds = synth_har(args.n_per_class, args.classes, args.channels, args.length, args.easy_fraction, args.seed)
    path = _out(args, f"synth_seed{args.seed}.csv")
    save_csv(ds, path)
    _header(args)
    print(f"wrote {path} windows={len(ds)} classes={ds.n_classes} shape={ds.channels}x{ds.length}")


def _arch_from_args(args, ds):
    from .kvfile import read_kv
    from .model_space import ArchConfig
    if args.arch:
        d = read_kv(args.arch)
        d.setdefault("n_classes", ds.n_classes)
        d.setdefault("in_channels", ds.channels)
        d.setdefault("length", ds.length)
        return ArchConfig.from_dict(d)
    chans = _csv_list(args.channels)
    n = len(chans)
    pools = _csv_list(args.pools) if args.pools else (2,) * n
    w_bits = _csv_list(args.w_bits) if args.w_bits else (args.bits,) * (n + 1)
    a_bits = _csv_list(args.a_bits) if args.a_bits else (args.bits,) * n
    return ArchConfig(args.template, chans, args.kernel, pools, w_bits, a_bits, ds.n_classes, ds.channels, ds.length)


def _protocol(args):
    from .train import TrainProtocol
    return TrainProtocol(initial_lr=args.lr, batch_size=args.batch_size, weight_decay=args.weight_decay,
                         max_epochs=args.epochs, seed=args.seed)


def cmd_train(args):
    from .data import load_csv
    from .model_space import instantiate
    from .modelfile import save_network
    from .train import train_fixed, train_slimmable
    ds = load_csv(args.data)
    arch = _arch_from_args(args, ds)
    model = instantiate(arch, args.seed)
    _header(args)
    if args.slimmable:
        model = train_slimmable(model, ds, _protocol(args), echo=print)
    else:
        model = train_fixed(model, ds, _protocol(args), echo=print)
    path = _out(args, "model.npz")
    save_network(model, path)
    print(f"wrote {path} arch={arch.digest[:16]}")


def _plan(args):
    from .search import load_plan
    plan = load_plan(args.plan)
    if args.jobs:
        plan.jobs = args.jobs
    if args.out:
        plan.out_dir = Path(args.out)
    return plan


def _print_rows(rows):
    from .search import front_csv
    sys.stdout.write(front_csv(rows))


def cmd_grid(args):
    from .search import run_grid
    plan = _plan(args)
    _header(args)
    rows = run_grid(plan)
    failed = [r for r in rows if not r.ok]
    print(f"# rows={len(rows)} failed={len(failed)} store={plan.store_path}")
    _print_rows(rows)


def cmd_nas(args):
    from .search import run_grid, run_mixed
    plan = _plan(args)
    _header(args)
    rows = run_mixed(plan, run_grid(plan))
    print(f"# mixed rows={len(rows)} store={plan.store_path}")
    _print_rows(rows)


def cmd_compile(args):
    from .engine import compile_model, cost_report, load_theta
    from .modelfile import compiled_to_json, load_compiled, load_network, save_compiled
    src = Path(args.model)
    _header(args)
    if src.suffix == ".sbh":
        cm, adaptive = load_compiled(src)
    else:
        theta = load_theta(args.theta) if args.theta else None
        cm, adaptive = compile_model(load_network(src), _csv_list(args.widths, float), theta), None
        path = _out(args, "model.sbh")
        n = save_compiled(cm, path)
        print(f"wrote {path} bytes={n}")
    if args.dump_json:
        text = json.dumps(compiled_to_json(cm, adaptive), indent=1)
        if args.dump_json == "-":
            print(text)
        else:
            Path(args.dump_json).write_text(text + "\n")
    report = cost_report(cm)
    print("layer,macs,cycle_units,weight_bytes,requant_bytes")
    for c in report.layers:
        print(f"{c.name},{c.macs},{c.cycle_units!r},{c.weight_bytes},{c.requant_bytes}")
    print(f"total,{report.macs},{report.cycle_units!r},{report.memory_bytes},")


def _predict(args, ds):
    from .engine import compile_model, integer_forward
    from .modelfile import load_compiled, load_network
    src = Path(args.model)
    if args.engine == "float":
        if src.suffix == ".sbh":
            raise ConfigurationError("the float engine needs a trained .npz model")
        return load_network(src).scores(ds.x, args.width)
    if src.suffix == ".sbh":
        cm, _ = load_compiled(src)
    else:
        cm = compile_model(load_network(src), (args.width,))
    return integer_forward(cm, cm.quantize_input(ds.x), args.width) * cm.score_scale


def cmd_eval(args):
    from .data import load_csv, metrics
    ds = load_csv(args.data)
    scores = _predict(args, ds)
    pred = scores.argmax(axis=1)
    m = metrics(pred, ds.y, ds.n_classes)
    _header(args)
    print("engine,width,accuracy,balanced_accuracy,macro_f1,n")
    print(f"{args.engine},{args.width!r},{m.accuracy!r},{m.balanced_accuracy!r},{m.macro_f1!r},{len(ds)}")
    if args.out:
        path = _out(args, "eval")
        np.savetxt(path, pred, fmt="%d")
    if args.confusion:
        Path(args.confusion).write_text(m.confusion.to_csv())


def cmd_adaptive(args):
    from .search import build_adaptive, run_grid
    plan = _plan(args)
    _header(args)
    res = build_adaptive(run_grid(plan), plan, echo=print if args.verbose else None)
    c = res.chosen
    print("backbone,w_small,threshold,score,static_score,avg_cost,static_cost,cost_reduction,file_bytes,static_file_bytes")
    print(f"{res.backbone_row.digest[:16]},{res.model.w_small!r},{res.model.threshold!r},{c.score!r},"
          f"{res.static_score!r},{c.avg_cost!r},{res.static_cost!r},{1 - c.avg_cost / res.static_cost!r},"
          f"{res.adaptive_file_bytes},{res.static_file_bytes}")


def cmd_sweep(args):
    from .adaptive import AdaptiveModel, default_thresholds, threshold_sweep, write_sweep
    from .data import load_csv
    from .modelfile import load_compiled
    cm, triple = load_compiled(args.model)
    if triple is None:
        raise DataError(f"{args.model} is not an adaptive model file")
    am = AdaptiveModel(cm, triple[0], triple[1], triple[2])
    thresholds = _csv_list(args.thresholds, float) if args.thresholds else default_thresholds()
    points = threshold_sweep(am, load_csv(args.data), thresholds)
    path = _out(args, "sweep.csv")
    write_sweep(points, path)
    _header(args)
    print(f"wrote {path} points={len(points)}")


def cmd_report(args):
    from .search import ResultsStore, cycle_front, front_csv, memory_front
    store = ResultsStore(args.results)
    rows = store.rows()
    if not rows:
        raise DataError(f"{args.results}: no result rows")
    out = Path(args.out) if args.out else out_root() / "report"
    out.mkdir(parents=True, exist_ok=True)
    _header(args)
    tables = {"all": [r for r in rows if r.ok], "memory_front": memory_front(rows), "cycle_front": cycle_front(rows)}
    for bits in ("1", "2", "4", "8"):
        sub = [r for r in rows if r.ok and r.stage == "grid" and set(r.w_bits.split("/")) == {bits}]
        if sub:
            tables[f"memory_front_{bits}bit"] = memory_front(sub)
            tables[f"cycle_front_{bits}bit"] = cycle_front(sub)
    for name, sel in tables.items():
        (out / f"{name}.csv").write_text(front_csv(sel))
        print(f"{name}: {len(sel)} rows -> {out / (name + '.csv')}")


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog=PROG, description="Sub-byte quantized 1D-CNN search, deployment and adaptive inference.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help_):
        c = sub.add_parser(name, help=help_, description=help_)
        c.add_argument("--seed", type=int, default=0)
        c.add_argument("--out", default=None, help=f"output path (default under ${ENV_DIR})")
        c.set_defaults(fn=fn)
        return c

    c = command("gen-data", cmd_gen_data, "write a synthetic windowed dataset as CSV")
    c.add_argument("--n-per-class", type=int, default=100)
    c.add_argument("--classes", type=int, default=6)
    c.add_argument("--channels", type=int, default=3)
    c.add_argument("--length", type=int, default=64)
    c.add_argument("--easy-fraction", type=float, default=0.7)

    c = command("train", cmd_train, "train one network (fixed precision or slimmable)")
    c.add_argument("--data", required=True)
    c.add_argument("--arch", help="key=value architecture file")
    c.add_argument("--template", default="B", choices=["A", "B"])
    c.add_argument("--channels", default="8,16")
    c.add_argument("--kernel", type=int, default=7)
    c.add_argument("--pools", default=None)
    c.add_argument("--bits", type=int, default=8)
    c.add_argument("--w-bits", default=None)
    c.add_argument("--a-bits", default=None)
    c.add_argument("--epochs", type=int, default=100)
    c.add_argument("--lr", type=float, default=0.01)
    c.add_argument("--batch-size", type=int, default=32)
    c.add_argument("--weight-decay", type=float, default=0.0)
    c.add_argument("--slimmable", action="store_true")

    for name, fn, help_ in (("grid", cmd_grid, "run the quantized grid search of a plan"),
                            ("nas", cmd_nas, "mixed-precision search from the 8-bit memory front"),
                            ("adaptive", cmd_adaptive, "build the big/little adaptive model of a plan")):
        c = command(name, fn, help_)
        c.add_argument("--plan", required=True, help="key=value plan file")
        c.add_argument("--jobs", type=int, default=None)
        if name == "adaptive":
            c.add_argument("--verbose", action="store_true")

    c = command("compile", cmd_compile, "lower a trained model to the integer engine")
    c.add_argument("--model", required=True, help=".npz trained model, or .sbh to inspect")
    c.add_argument("--widths", default="1.0")
    c.add_argument("--theta", default=None, help="key=value cycle-units-per-MAC table")
    c.add_argument("--dump-json", default=None, help="write the lossless JSON form ('-' for stdout)")

    c = command("eval", cmd_eval, "score a model on a dataset")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--engine", choices=["integer", "float"], default="integer")
    c.add_argument("--width", type=float, default=1.0)
    c.add_argument("--confusion", default=None, help="write the confusion matrix CSV here")

    c = command("sweep", cmd_sweep, "threshold sweep of an adaptive model file")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--thresholds", default=None)

    c = command("report", cmd_report, "Pareto tables from a results store")
    c.add_argument("--results", required=True)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        args.fn(args)
        return 0
    except SubByteError as exc:
        return _fail(exc.exit_code, exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(2, exc)
    except (FloatingPointError, ArithmeticError, MemoryError) as exc:
        return _fail(3, exc)


def _fail(status, exc) -> int:
    msg = " ".join(str(exc).split())
    print(f"{PROG}: error status={status} kind={type(exc).__name__} message={msg}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
