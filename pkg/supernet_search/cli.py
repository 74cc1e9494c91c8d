# supernet_search/cli.py
"""
Command-line entry point.

    supernet-search search        --space conv-macro --optimizer tanglenas-drnas
                                  --data planted-kernel --out runs/a
    supernet-search spos-train    --space conv-macro --data planted-kernel --out runs/b
    supernet-search evolve        --checkpoint runs/b/supernet.tnas --space conv-macro --out runs/c
    supernet-search random-search --table runs/bench --space conv-macro --samples 100 --out runs/d
    supernet-search discretize    --checkpoint runs/a/supernet.tnas --space conv-macro
    supernet-search benchmark     --space conv-macro --budget 10000 --resume --out runs/bench
    supernet-search report        --in runs/a runs/b --format text
    supernet-search cka           --features-a a.npy --features-b b.npy
    supernet-search memory        --space toy-cell

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric divergence.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from tabulate import tabulate

from supernet_search.analysis import cka_matrix, linear_cka, memory_account
from supernet_search.autodiff import set_default_dtype
from supernet_search.benchmark import BenchmarkTable, enumerate_and_train
from supernet_search.bilevel import train_bilevel
from supernet_search.checkpoint import load_checkpoint, save_checkpoint
from supernet_search.config import (
    DTYPE_ENV,
    LOG_LEVEL_ENV,
    SEARCH_METHODS,
    RunConfig,
    apply_seed,
    load_environment,
    load_run_config,
)
from supernet_search.errors import ConfigurationError, DivergenceError, SupernetSearchError
from supernet_search.idx_loader import load_idx_images
from supernet_search.posthoc_search import (
    EVOLUTION_METHOD,
    RANDOM_SEARCH_METHOD,
    SearchResult,
    TableEvaluator,
    evolutionary_search,
    random_search,
)
from supernet_search.report import FORMATS, build_report, render
from supernet_search.results import (
    RESULTS_FILE,
    append_records,
    run_id_for,
    write_manifest,
)
from supernet_search.samplers import Sampler
from supernet_search.search_space import Architecture, Supernet, discretize
from supernet_search.spaces import SPACE_IDS, build_space, space_config
from supernet_search.spos import train_spos
from supernet_search.synthetic_data import (
    SyntheticTaskSpec,
    lm_dataset,
    synth_char_corpus,
    synth_image_dataset,
)
from supernet_search.training import ArrayDataset, evaluate, resolve_splits

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "supernet.tnas"
DIVERGENCE_FILE = "divergence.json"
DATA_SOURCES = ("planted-kernel", "planted-channel", "char-grammar", "idx:<dir>")
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


@dataclass
class Task:
    """Training pool (the engines split it into train/val), test set and implied space options."""

    name: str
    data: ArrayDataset
    test: Optional[ArrayDataset]
    space_options: Dict[str, Any] = field(default_factory=dict)
    planted: Optional[Architecture] = None


def _idx_pair(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise ConfigurationError(f"No {stem}[.gz] in {directory}")


def load_task(source: str, space_id: str, seed: int,
              options: Optional[Dict[str, Any]] = None) -> Task:
    """
    Resolve a data source name into datasets and the space options they need
    (class count, vocabulary size). Options already set by the user win.

    Raises:
        ConfigurationError: unknown source, or a source that does not fit the space
    """
    options = dict(options or {})
    text_space = space_id == "tiny-lm"
    if source == "char-grammar":
        if not text_space:
            raise ConfigurationError(f"char-grammar data needs the tiny-lm space, not {space_id}")
        corpus = synth_char_corpus(SyntheticTaskSpec(kind="char_grammar", seed=seed))
        options.setdefault("vocab_size", len(corpus.vocabulary))
        context = space_config(space_id, **options).context
        stream = np.concatenate([corpus.train, corpus.val])
        logger.info("Char corpus reference perplexities: unigram %.3f, bigram %.3f",
                    corpus.unigram_perplexity, corpus.bigram_perplexity)
        return Task(source, lm_dataset(stream, context), lm_dataset(corpus.test, context), options)
    if text_space:
        raise ConfigurationError(f"The tiny-lm space needs char-grammar data, not {source}")
    if source in ("planted-kernel", "planted-channel"):
        kind = source.replace("-", "_")
        num_classes = 4 if kind == "planted_kernel" else 10
        task = SyntheticTaskSpec(kind=kind, seed=seed, num_classes=num_classes)
        options.setdefault("num_classes", task.num_classes)
        images = synth_image_dataset(task)
        pool = ArrayDataset(np.concatenate([images.train.inputs, images.val.inputs]),
                            np.concatenate([images.train.labels, images.val.labels]))
        planted = None
        if space_id == "conv-macro":
            planted = task.planted_optimum(space_config(space_id, **options))
        return Task(source, pool, images.test, options, planted)
    if source.startswith("idx:"):
        directory = Path(source[4:])
        train = load_idx_images(*(_idx_pair(directory, stem) for stem in IDX_FILES["train"]))
        test = load_idx_images(*(_idx_pair(directory, stem) for stem in IDX_FILES["test"]))
        options.setdefault("num_classes", 10)
        return Task(source, train, test, options)
    raise ConfigurationError(f"Unknown data source {source!r}; expected one of {DATA_SOURCES}")


def setup_logging(level: Optional[str]) -> None:
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "INFO").upper()
    if not isinstance(logging.getLevelName(name), int):
        raise ConfigurationError(f"Unknown log level {name!r}")
    logging.basicConfig(level=name, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """YAML file and environment first, then explicit command-line flags."""
    method = getattr(args, "optimizer", None)
    config = load_run_config(args.config, space=args.space, method=method)
    if getattr(args, "data", None):
        config.data = args.data
        config.explicit.add("data")
    dtype = getattr(args, "dtype", None)
    if not dtype and "dtype" not in config.explicit:
        dtype = os.environ.get(DTYPE_ENV)
    if dtype:
        config.dtype = dtype
    set_default_dtype(config.dtype)
    if getattr(args, "seed", None) is not None:
        apply_seed(config, args.seed)
    for flag, section, key in (
        ("epochs", "bilevel", "epochs"),
        ("train_fraction", "bilevel", "train_fraction"),
        ("batch_size", "bilevel", "batch_size"),
        ("spos_epochs", "spos", "epochs"),
        ("population", "evolution", "population"),
        ("generations", "evolution", "generations"),
        ("mutation_prob", "evolution", "mutation_prob"),
        ("max_evaluations", "evolution", "max_evaluations"),
        ("workers", "evolution", "workers"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, section, dataclasses.replace(getattr(config, section), **{key: value}))
            config.explicit.add(f"{section}.{key}")
    if getattr(args, "no_progress", False):
        for section in ("bilevel", "spos", "evolution", "benchmark"):
            setattr(config, section, dataclasses.replace(getattr(config, section), progress=False))
    return config


def _prepare_out(out: str, config: RunConfig, seed: int,
                 extra: Optional[Dict[str, Any]] = None) -> Path:
    out_dir = Path(out)
    if (out_dir / RESULTS_FILE).exists():
        raise ConfigurationError(f"{out_dir} already holds results; choose a fresh --out directory")
    write_manifest(out_dir, config.to_dict(), seed, config.space, config.default_keys(), extra)
    return out_dir


def _load_supernet(space_id: str, mode: str, checkpoint: str, options: Dict[str, Any]) -> Supernet:
    supernet = build_space(space_id, mode=mode, **options)
    tensors = load_checkpoint(checkpoint)
    supernet.load_state_tensors({k: v for k, v in tensors.items() if not k.startswith("arch/")})
    return supernet


def cmd_search(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    bilevel = config.bilevel
    task = load_task(config.data, config.space, bilevel.seed, config.space_options)
    _, mode = SEARCH_METHODS[config.method]
    run_id = run_id_for(config.method, config.space, bilevel.seed, config.to_dict())
    extra = {"run_id": run_id, "space_options": task.space_options}
    out_dir = _prepare_out(args.out, config, bilevel.seed, extra)
    supernet = build_space(config.space, mode=mode, seed=bilevel.seed, **task.space_options)
    outcome = train_bilevel(supernet, Sampler(bilevel.sampler), task.data, bilevel, test=task.test,
                            run_id=run_id, method=config.method, out_dir=out_dir)
    tensors = {**supernet.state_tensors(), **outcome.arch_params.state_tensors()}
    save_checkpoint(out_dir / CHECKPOINT_FILE, tensors)

    final = outcome.records[-1] if outcome.records else None
    print(f"\nSearch {run_id} finished")
    print(f"Architecture: {outcome.architecture.to_text()}")
    if final is not None:
        test = f"{final.test_metric:.4f}" if final.test_metric is not None else "n/a"
        print(f"Val metric: {final.val_metric:.4f}   Test metric: {test}   "
              f"Params: {final.param_count}")
    if task.planted is not None:
        print(f"Planted optimum recovered: {outcome.architecture == task.planted}")
    print(f"Artifacts in {out_dir}")
    return 0


def cmd_spos_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    spos = config.spos
    task = load_task(config.data, config.space, spos.seed, config.space_options)
    run_id = run_id_for("spos", config.space, spos.seed, config.to_dict())
    extra = {"run_id": run_id, "space_options": task.space_options}
    out_dir = _prepare_out(args.out, config, spos.seed, extra)
    supernet = build_space(config.space, mode="WE", seed=spos.seed, **task.space_options)
    outcome = train_spos(supernet, task.data, spos, run_id=run_id)
    save_checkpoint(out_dir / CHECKPOINT_FILE, supernet.state_tensors())
    final_loss = outcome.epoch_losses[-1] if outcome.epoch_losses else float("nan")
    print(f"\nSPOS {run_id}: {spos.epochs} epochs, final loss {final_loss:.4f}")
    print(f"Checkpoint: {out_dir / CHECKPOINT_FILE}")
    return 0


def _posthoc(args: argparse.Namespace, method: str) -> int:
    config = resolve_config(args)
    seed = config.evolution.seed
    if bool(args.checkpoint) == bool(args.table):
        raise ConfigurationError(
            "Give exactly one of --checkpoint (trained supernet) or --table (benchmark)"
        )
    task = load_task(config.data, config.space, seed, config.space_options)
    if args.checkpoint:
        supernet = _load_supernet(config.space, "WE", args.checkpoint, task.space_options)
        _, val = resolve_splits(task.data, config.spos.train_fraction, seed)
        space, evaluator = supernet, None
    else:
        table = BenchmarkTable.from_file(args.table, config.space)
        supernet = build_space(config.space, mode="WE", materialize=False, **task.space_options)
        space, val, evaluator = supernet.spec, None, TableEvaluator(table)

    run_id = run_id_for(method, config.space, seed, config.to_dict())
    extra = {"run_id": run_id, "source": args.checkpoint or args.table}
    out_dir = _prepare_out(args.out, config, seed, extra)
    if method == EVOLUTION_METHOD:
        result = evolutionary_search(space, val, config.evolution, evaluator=evaluator,
                                     run_id=run_id)
    else:
        result = random_search(space, val, args.samples, seed=seed, evaluator=evaluator,
                               workers=config.evolution.workers, run_id=run_id)
    if args.checkpoint and task.test is not None:
        test_metric = evaluate(supernet.inherit(result.best).forward, task.test).accuracy
        for record in result.records:
            if record.architecture == result.best.to_text():
                record.test_metric = test_metric
    append_records(out_dir / RESULTS_FILE, result.records)
    _print_search_result(method, result, task.planted)
    return 0


def _print_search_result(method: str, result: SearchResult,
                         planted: Optional[Architecture]) -> None:
    print(f"\n{method}: {result.evaluations} evaluations")
    print(f"Best architecture: {result.best.to_text()}")
    print(f"Best metric: {result.best_metric:.4f}")
    if planted is not None:
        print(f"Planted optimum recovered: {result.best == planted}")


def cmd_evolve(args: argparse.Namespace) -> int:
    return _posthoc(args, EVOLUTION_METHOD)


def cmd_random_search(args: argparse.Namespace) -> int:
    return _posthoc(args, RANDOM_SEARCH_METHOD)


def cmd_discretize(args: argparse.Namespace) -> int:
    options = load_run_config(args.config, space=args.space).space_options
    supernet = build_space(args.space, mode="WE", materialize=False, **options)
    tensors = load_checkpoint(args.checkpoint)
    arch_params = supernet.arch_params()
    found = [name for name in arch_params.names if f"arch/{name}" in tensors]
    if len(found) != len(arch_params.names):
        raise ConfigurationError(
            f"{args.checkpoint} holds no architecture parameters for {args.space}"
        )
    arch_params.load_state_tensors(tensors)
    arch = discretize(arch_params, supernet.spec)
    print(arch.to_text())
    rows = [[dim, label] for dim, label in supernet.spec.describe(arch).items()]
    print(tabulate(rows, headers=["dim", "choice"], tablefmt="github"))
    if hasattr(supernet, "genotype_text"):
        print(supernet.genotype_text(arch))
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    overrides = {
        key: value
        for key, value in (("budget", args.budget), ("epochs", args.bench_epochs),
                           ("sample_fraction", args.sample_fraction),
                           ("workers", args.workers))
        if value is not None
    }
    if args.seeds:
        overrides["seeds"] = tuple(args.seeds)
    if args.no_progress:
        overrides["progress"] = False
    bench = dataclasses.replace(config.benchmark, **overrides)
    task = load_task(config.data, config.space, bench.seeds[0], config.space_options)
    train, val = resolve_splits(task.data, config.bilevel.train_fraction, bench.seeds[0])
    table = enumerate_and_train(config.space, (train, val, task.test), bench, args.out,
                                options=task.space_options, resume=args.resume)
    best, metric = table.best()
    print(f"\nBenchmark {config.space}: {len(table)} rows")
    print(f"Best architecture: {best.to_text()} (mean val {metric:.4f})")
    if task.planted is not None:
        print(f"Planted optimum ranks first: {best == task.planted}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    print(render(build_report(args.inputs), args.format))
    return 0


def _features(path: str) -> Dict[str, np.ndarray]:
    loaded = np.load(path)
    if isinstance(loaded, np.lib.npyio.NpzFile):
        return {key: loaded[key] for key in loaded.files}
    return {Path(path).stem: loaded}


def cmd_cka(args: argparse.Namespace) -> int:
    a, b = _features(args.features_a), _features(args.features_b)
    if len(a) == 1 and len(b) == 1:
        print(f"linear CKA: {linear_cka(next(iter(a.values())), next(iter(b.values()))):.6f}")
        return 0
    matrix = cka_matrix(a, b)
    print(tabulate(matrix, headers="keys", tablefmt="github", floatfmt=".4f"))
    return 0


def cmd_memory(args: argparse.Namespace) -> int:
    rows = []
    for mode in ("WE", "WS"):
        report = memory_account(args.space, mode, image_size=args.image_size,
                                activations=not args.skip_activations)
        rows.append(report.to_dict())
    print(tabulate(rows, headers="keys", tablefmt="github", floatfmt=".3f"))
    return 0


def _add_common(parser: argparse.ArgumentParser, needs_data: bool = True) -> None:
    parser.add_argument("--space", choices=SPACE_IDS, default=None, help="Search space id")
    parser.add_argument("--config", default=None, help="YAML run config")
    parser.add_argument("--seed", type=int, default=None,
                        help="Seed (the environment's TNAS_SEED also works)")
    parser.add_argument("--dtype", choices=("float32", "float64"), default=None,
                        help="Numeric mode")
    parser.add_argument("--no-progress", action="store_true", help="Hide progress bars")
    if needs_data:
        parser.add_argument("--data", default=None, help=f"Data source: {', '.join(DATA_SOURCES)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="supernet-search",
                                     description="Supernet architecture search")
    parser.add_argument("--log-level", default=None,
                        help=f"Logging level (default from {LOG_LEVEL_ENV} or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", help="Single-stage bi-level search")
    _add_common(search)
    search.add_argument("--optimizer", choices=sorted(SEARCH_METHODS), default=None,
                        help="Search method")
    search.add_argument("--epochs", type=int, default=None)
    search.add_argument("--train-fraction", type=float, default=None)
    search.add_argument("--batch-size", type=int, default=None)
    search.add_argument("--out", required=True, help="Output directory")
    search.set_defaults(func=cmd_search)

    spos = sub.add_parser("spos-train", help="Single-path supernet training")
    _add_common(spos)
    spos.add_argument("--epochs", dest="spos_epochs", type=int, default=None)
    spos.add_argument("--out", required=True)
    spos.set_defaults(func=cmd_spos_train)

    for name, func in (("evolve", cmd_evolve), ("random-search", cmd_random_search)):
        posthoc = sub.add_parser(name, help=f"Post-hoc {name} over a trained supernet or a table")
        _add_common(posthoc)
        posthoc.add_argument("--checkpoint", default=None,
                             help="Supernet checkpoint from spos-train")
        posthoc.add_argument("--table", default=None, help="Benchmark directory or results file")
        posthoc.add_argument("--workers", type=int, default=None)
        posthoc.add_argument("--out", required=True)
        if name == "evolve":
            posthoc.add_argument("--population", type=int, default=None)
            posthoc.add_argument("--generations", type=int, default=None)
            posthoc.add_argument("--mutation-prob", type=float, default=None)
            posthoc.add_argument("--max-evaluations", type=int, default=None)
        else:
            posthoc.add_argument("--samples", type=int, default=100)
        posthoc.set_defaults(func=func)

    disc = sub.add_parser("discretize", help="Argmax architecture of a search checkpoint")
    disc.add_argument("--space", choices=SPACE_IDS, required=True)
    disc.add_argument("--checkpoint", required=True)
    disc.add_argument("--config", default=None,
                      help="YAML run config holding the space options used in search")
    disc.set_defaults(func=cmd_discretize)

    bench = sub.add_parser("benchmark", help="Train architectures from scratch into a table")
    _add_common(bench)
    bench.add_argument("--budget", type=int, default=None)
    bench.add_argument("--epochs", dest="bench_epochs", type=int, default=None)
    bench.add_argument("--seeds", type=int, nargs="+", default=None)
    bench.add_argument("--sample-fraction", type=float, default=None)
    bench.add_argument("--workers", type=int, default=None)
    bench.add_argument("--resume", action="store_true")
    bench.add_argument("--out", required=True)
    bench.set_defaults(func=cmd_benchmark)

    report = sub.add_parser("report", help="Tables and curve data from results files")
    report.add_argument("--in", dest="inputs", nargs="+", required=True,
                        help="Run directories or results files")
    report.add_argument("--format", choices=FORMATS, default="text")
    report.set_defaults(func=cmd_report)

    cka = sub.add_parser("cka", help="Linear CKA between .npy feature files (.npz for a matrix)")
    cka.add_argument("--features-a", required=True)
    cka.add_argument("--features-b", required=True)
    cka.set_defaults(func=cmd_cka)

    memory = sub.add_parser("memory", help="Parameter and activation accounting, WE vs WS")
    memory.add_argument("--space", choices=SPACE_IDS, required=True)
    memory.add_argument("--image-size", type=int, default=8)
    memory.add_argument("--skip-activations", action="store_true")
    memory.set_defaults(func=cmd_memory)
    return parser


def _write_divergence(args: argparse.Namespace, error: DivergenceError) -> None:
    out = getattr(args, "out", None)
    if not out:
        return
    path = Path(out) / DIVERGENCE_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"message": str(error), **error.record}, fh, indent=2, default=str)
    print(f"Divergence record written to {path}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        load_environment()
        setup_logging(args.log_level)
        return args.func(args)
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        _write_divergence(args, e)
        print(f"Training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except SupernetSearchError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
