"""``bipose`` command-line entry point.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime or divergence,
4 model-file format or corruption.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, config as configmod, model as M, train as T
from .errors import (
    BiposeError,
    ConfigurationError,
    CorruptionError,
    DivergenceError,
    FormatError,
    InvalidInputError,
)
from .evaluation import decode_batch, format_report, write_predictions
from .synthdata import generate, generate_split

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_FORMAT = 0, 1, 2, 3, 4

AP_PROTOCOL = "single-instance-oks"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def _staged(path):
    """Yield a temp path next to ``path``; rename onto ``path`` only on success."""
    if path is None:
        yield None
        return
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".tmp-", suffix=path.name)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _load_run_config(args) -> configmod.RunConfig:
    cfg = configmod.load(args.config) if getattr(args, "config", None) else configmod.RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = configmod.RunConfig(
            replace(cfg.network, seed=seed), cfg.data, replace(cfg.train, seed=seed)
        )
    return cfg


def _print_metrics(metrics: dict):
    print(format_report(metrics), file=sys.stdout)


def cmd_init_config(args) -> int:
    text = configmod.dump(configmod.RunConfig())
    if args.out is None:
        sys.stdout.write(text)
    else:
        M.atomic_write(args.out, text.encode())
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _load_run_config(args)
    data = generate(cfg.data)
    train_cfg = replace(cfg.train, alpha_mix=1.0)
    net_cfg = M.teacher_config(cfg.network)
    with _staged(args.log) as log_tmp:
        teacher = M.build(net_cfg)
        T.fit(teacher, data["train"], replace(train_cfg, log_path=log_tmp), data.get("val"))
        M.save(teacher, args.out, teacher.train_state.record())
    _print_metrics(T.evaluate(teacher, data["val"]) if "val" in data else {})
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load_run_config(args)
    train_cfg = cfg.train
    if args.alpha_mix is not None:
        train_cfg = replace(train_cfg, alpha_mix=args.alpha_mix)
    if args.loss is not None:
        train_cfg = replace(train_cfg, supervised=args.loss)
    if not 0.0 <= train_cfg.alpha_mix <= 1.0:
        raise UsageError("--alpha-mix must lie in [0, 1]")
    teacher = None
    if args.teacher:
        teacher = M.load(args.teacher)
    elif train_cfg.alpha_mix < 1:
        raise UsageError("--teacher is required when --alpha-mix is below 1")
    net_cfg = replace(cfg.network, binarize=True)
    if teacher is not None and teacher.config.heatmap_size != net_cfg.heatmap_size:
        raise ConfigurationError(
            f"teacher heatmaps {teacher.config.heatmap_size} differ from student {net_cfg.heatmap_size}"
        )
    if teacher is not None and teacher.config.joints != net_cfg.joints:
        raise ConfigurationError("teacher and student predict different joint counts")
    data = generate(cfg.data)
    with _staged(args.log) as log_tmp:
        student, _ = T.distill(teacher, net_cfg, data["train"], replace(train_cfg, log_path=log_tmp), data.get("val"))
        M.save(student, args.out, student.train_state.record())
    _print_metrics(T.evaluate(student, data["val"]) if "val" in data else {})
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = M.load_checkpoint(args.checkpoint)
    cfg = _load_run_config(args)
    spec = cfg.data
    if args.split == "test" and spec.test_size == 0:
        spec = replace(spec, test_size=spec.val_size)
    ds = generate_split(spec, args.split)
    if ds.images.shape[2:] != tuple(net.config.input_size):
        raise ConfigurationError(
            f"dataset images {ds.images.shape[2:]} do not match model input {net.config.input_size}"
        )
    metrics = T.evaluate(net, ds)
    cost = M.count_params_and_ops(net)
    metrics.update(
        params=cost.params,
        binary_params=cost.binary_params,
        flops=int(cost.ops.flops),
        bops=int(cost.ops.bops),
        ops=cost.ops.ops,
        protocol=AP_PROTOCOL,
    )
    if args.predictions:
        xy, scores = decode_batch(net.predict(ds.images), 4)
        with _staged(args.predictions) as tmp:
            write_predictions(tmp, xy, scores)
    _print_metrics(metrics)
    return EXIT_OK


def cmd_bench(args) -> int:
    shapes = [bench.parse_shape(s) for s in args.shape] if args.shape else None
    rows = bench.run(shapes, seed=args.seed or 0, repeats=args.repeats)
    text = bench.to_csv(rows)
    if args.out:
        M.atomic_write(args.out, text.encode())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    data = generate(cfg.data)
    if "val" not in data:
        raise ConfigurationError("ablation needs a validation split (val_size > 0)")
    cells = args.cells or list(T.ABLATION_CELLS)
    if args.teacher:
        teacher = M.load(args.teacher)
    else:
        teacher = M.build(M.teacher_config(cfg.network))
        T.fit(teacher, data["train"], replace(cfg.train, alpha_mix=1.0))
    rows = T.ablation(
        teacher, replace(cfg.network, binarize=True), data["train"], data["val"], cfg.train, args.seeds, cells
    )
    lines = ["cell,seed,pck@0.5,pck@0.1,AP"]
    lines += [f"{r['cell']},{r['seed']},{r['pck@0.5']:.6f},{r['pck@0.1']:.6f},{r['AP']:.6f}" for r in rows]
    for cell in cells:
        vals = [r["pck@0.5"] for r in rows if r["cell"] == cell]
        lines.append(f"{cell},mean,{np.mean(vals):.6f},,")
    text = "\n".join(lines) + "\n"
    if args.out:
        M.atomic_write(args.out, text.encode())
    sys.stdout.write(text)
    return EXIT_OK


def cmd_export(args) -> int:
    net, _ = M.load_checkpoint(args.checkpoint)
    sizes = M.save(net, args.out)
    cost = M.count_params_and_ops(net)
    packed = sum(v for k, v in sizes.items() if k in M._binary_weight_names(net))
    print(json.dumps({"path": str(args.out), "bytes": os.path.getsize(args.out), "binary_record_bytes": packed,
                      "params": cost.params, "binary_params": cost.binary_params}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bipose", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="run configuration file")
        sp.add_argument("--seed", type=int, default=None, help="override network and training seeds")

    sp = sub.add_parser("init-config", help="print the default configuration")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_init_config)

    sp = sub.add_parser("train-teacher", help="train the real-valued teacher")
    common(sp, config_required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="line-delimited JSON progress log")
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill", help="train a binary student, optionally against a teacher")
    common(sp, config_required=True)
    sp.add_argument("--teacher", help="teacher checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--alpha-mix", type=float, default=None, help="weight of the supervised term")
    sp.add_argument("--loss", choices=("awing", "mse"), default=None)
    sp.add_argument("--log")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("eval", help="metrics and cost report for a checkpoint")
    common(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--split", choices=("val", "test"), default="val")
    sp.add_argument("--predictions", help="write decoded keypoints as JSON lines")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="packed vs float convolution timing (CSV)")
    sp.add_argument("--shape", action="append", help="c_in x c_out x k x out_h x out_w; repeatable")
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("ablate", help="loss/distillation ablation over seeds")
    common(sp, config_required=True)
    sp.add_argument("--teacher")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--cells", nargs="+", choices=list(T.ABLATION_CELLS))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export", help="strip training state and re-save a model")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bipose: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"bipose: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, CorruptionError) as exc:
        print(f"bipose: model file error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"bipose: {exc}", file=sys.stderr)
        return EXIT_CONFIG if getattr(args, "config", None) and exc.filename == args.config else EXIT_FORMAT
    except InvalidInputError as exc:
        print(f"bipose: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, BiposeError, RuntimeError) as exc:
        print(f"bipose: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
