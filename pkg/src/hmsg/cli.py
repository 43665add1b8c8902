"""Command-line entry point: ``hmsg <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure. Errors
print a single ``hmsg: error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import inspect
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import datasets, pipeline
from .checkpoint import save_checkpoint
from .config import RunConfig, load_config
from .datasets import write_dataset, write_matrix, write_splits
from .evalkit import dump_report, metric_report
from .exceptions import HMSGError, NonFiniteGradient, SamplingCapExceeded
from .subgraph import export_subgraph, generate_all

log = logging.getLogger("hmsg")

# failures of the computation itself rather than of the inputs
RUNTIME_ERRORS = (NonFiniteGradient, SamplingCapExceeded)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads() -> int:
    raw = os.environ.get("HMSG_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HMSG_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("HMSG_THREADS must be >= 0")
    return n


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hmsg", description="Heterogeneous graph embedding with metapath subgraphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_text, checkpoint=False, config=True):
        sp = sub.add_parser(name, help=help_text)
        if config:
            sp.add_argument("--config", required=True, type=Path, help="run configuration file")
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--seed", type=_u64, help="overrides the config seed")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="config setting applied after the file (repeatable)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, type=Path, help="trained checkpoint")
        return sp

    synth = common("synth", "write a synthetic dataset plus a matching config", config=False)
    synth.add_argument("kind", choices=("partition", "block"))
    common("gen-subgraphs", "export one metapath subgraph file per metapath")
    common("train", "train a model; writes model.ckpt, history.csv, splits.json, effective.cfg")
    common("embed", "write embeddings.<type>.f64 for every target type", checkpoint=True)
    common("eval-classify", "linear-probe Macro/Micro-F1 on test nodes", checkpoint=True)
    common("eval-cluster", "K-Means NMI/ARI on test nodes", checkpoint=True)
    common("eval-linkpred", "AUC/AP on held-out test pairs", checkpoint=True)
    return p


def _run_config(args) -> RunConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    cfg = load_config(args.config, overrides)
    return cfg.validate()


def _echo_config(cfg: RunConfig, out: Path) -> str:
    cfg.dataset = str(cfg.dataset_path.resolve())
    text = cfg.to_text()
    (out / "effective.cfg").write_text(text)
    return text


def _synth(args, out: Path) -> None:
    gen = datasets.planted_partition if args.kind == "partition" else datasets.planted_block
    params = inspect.signature(gen).parameters
    kwargs = {}
    for item in args.override:
        key, _, value = (s.strip() for s in item.partition("="))
        if key not in params or key == "seed":
            raise UsageError(f"synth {args.kind}: unknown parameter {key!r}")
        default = params[key].default
        try:
            if isinstance(default, tuple):
                kwargs[key] = tuple(float(v) for v in value.split(","))
            else:
                kwargs[key] = type(default)(value)
        except ValueError:
            raise UsageError(f"synth {args.kind}: cannot read {key}={value!r}") from None
    seed = args.seed or 0
    ds = gen(seed=seed, **kwargs)
    write_dataset(ds, out / "data")
    if args.kind == "partition":
        cfg = "dataset = data\nmetapaths = PAP,PSP,PA,PS\ntarget_type = P\ntask = node-class\n"
    else:
        cfg = "dataset = data\nmetapaths = UIU,IUI,UI,IU\ntask = link-pred\nlink_relation = UI\n"
    name = "node-class.cfg" if args.kind == "partition" else "link-pred.cfg"
    (out / name).write_text(cfg + f"seed = {seed}\n")
    log.info("wrote %s and %s", out / "data", out / name)


def _report(cfg: RunConfig, task: str, metrics, out: Path, cfg_text: str) -> None:
    report = metric_report(task, metrics, cfg.eval_repeats, cfg.seed, cfg_text)
    (out / f"{task}.json").write_text(dump_report(report))


def dispatch(args) -> None:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "synth":
        _synth(args, out)
        return

    cfg = _run_config(args)
    if args.command == "gen-subgraphs":
        ds = pipeline.load_run_dataset(cfg)
        for sg in generate_all(pipeline.message_graph(cfg, ds), pipeline.select_metapaths(cfg, ds.graph)).all():
            export_subgraph(sg, out / f"subgraph.{sg.label or sg.metapath.text}.tsv")
        _echo_config(cfg, out)
        return

    if args.command == "train":
        ds = pipeline.load_run_dataset(cfg)
        _echo_config(cfg, out)
        result = pipeline.train_run(cfg, ds)
        save_checkpoint(out / "model.ckpt", result.model)
        (out / "history.csv").write_text(result.history_csv())
        if cfg.task == "node-class":
            write_splits(out / "splits.json", node_splits=ds.labels)
        else:
            write_splits(out / "splits.json", pairs=ds.pairs)
        log.info("best epoch %d, validation metric %.6g", result.best_epoch, result.best_metric)
        return

    restored = pipeline.restore(cfg, args.checkpoint)
    cfg_text = _echo_config(cfg, out)
    if args.command == "embed":
        for t, z in restored.embeddings().items():
            write_matrix(out / f"embeddings.{t}.f64", z)
    elif args.command == "eval-classify":
        _report(cfg, "eval-classify", pipeline.evaluate_classify(cfg, restored), out, cfg_text)
    elif args.command == "eval-cluster":
        _report(cfg, "eval-cluster", pipeline.evaluate_cluster(cfg, restored), out, cfg_text)
    elif args.command == "eval-linkpred":
        if cfg.task != "link-pred":
            raise HMSGError("eval-linkpred needs a config with task = link-pred")
        _report(cfg, "eval-linkpred", pipeline.evaluate_links(cfg, restored), out, cfg_text)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        threads = _threads()
    except UsageError as exc:
        print(f"hmsg: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    # 0 threads: one BLAS thread and the fixed-order matmul, so runs are bit-reproducible
    ad.set_fast_matmul(threads > 0)
    try:
        with threadpool_limits(limits=max(threads, 1)):
            dispatch(args)
    except UsageError as exc:
        print(f"hmsg: error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"hmsg: runtime error: {exc}", file=sys.stderr)
        return 2
    except HMSGError as exc:
        print(f"hmsg: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"hmsg: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    finally:
        ad.set_fast_matmul(False)
    return 0


if __name__ == "__main__":
    sys.exit(main())
