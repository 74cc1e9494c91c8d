#!/usr/bin/env python3
"""
Toy-cell comparison on Fashion-MNIST read from IDX files: bi-level search with
entangled weights against SPOS followed by random search. Takes hours on CPU.

    python scripts/fashion_mnist_cell.py --data-dir ~/data/fashion-mnist --seeds 0 1 2 3
"""
import argparse
import logging
import os

import pandas as pd
from dotenv import load_dotenv
from tabulate import tabulate

from supernet_search.autodiff import set_default_dtype
from supernet_search.bilevel import train_bilevel
from supernet_search.cli import load_task
from supernet_search.config import default_bilevel_config, default_spos_config
from supernet_search.errors import SupernetSearchError
from supernet_search.posthoc_search import random_search
from supernet_search.spaces import build_space
from supernet_search.spos import train_spos
from supernet_search.training import evaluate

load_dotenv()


def run_seed(data_dir: str, seed: int, epochs: int, samples: int) -> list:
    task = load_task(f"idx:{data_dir}", "toy-cell", seed)
    rows = []

    bilevel = default_bilevel_config("toy-cell")
    bilevel.epochs, bilevel.seed, bilevel.sampler.seed, bilevel.progress = epochs, seed, seed, True
    supernet = build_space("toy-cell", seed=seed, **task.space_options)
    outcome = train_bilevel(supernet, None, task.data, bilevel, run_id=f"fmnist-drnas-s{seed}")
    rows.append({
        "seed": seed,
        "method": "tanglenas-drnas",
        "architecture": outcome.architecture.to_text(),
        "test_metric": evaluate(supernet.inherit(outcome.architecture).forward, task.test).accuracy,
    })

    spos = default_spos_config("toy-cell")
    spos.epochs, spos.seed = epochs, seed
    supernet = build_space("toy-cell", seed=seed, **task.space_options)
    trained = train_spos(supernet, task.data, spos, run_id=f"fmnist-spos-s{seed}")
    result = random_search(supernet, trained.val, num_samples=samples, seed=seed)
    rows.append({
        "seed": seed,
        "method": "spos-random",
        "architecture": result.best.to_text(),
        "test_metric": evaluate(supernet.inherit(result.best).forward, task.test).accuracy,
    })
    return rows


def main():
    parser = argparse.ArgumentParser(description="Toy-cell search on Fashion-MNIST")
    parser.add_argument("--data-dir", default=os.environ.get("FASHION_MNIST_DIR"),
                        help="Directory with the four IDX files (default: FASHION_MNIST_DIR)")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--samples", type=int, default=100)
    args = parser.parse_args()

    if not args.data_dir:
        print("Error: no data directory; pass --data-dir or set FASHION_MNIST_DIR in .env")
        return

    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    set_default_dtype("float32")

    rows = []
    try:
        for seed in args.seeds:
            rows.extend(run_seed(args.data_dir, seed, args.epochs, args.samples))
    except SupernetSearchError as e:
        print(f"Error during run: {e}")
        if not rows:
            return

    df = pd.DataFrame(rows)
    print("\n" + tabulate(df, headers="keys", tablefmt="github", showindex=False, floatfmt=".4f"))
    print("\nMean test accuracy:")
    print(df.groupby("method")["test_metric"].agg(["mean", "std", "count"]).to_string())


if __name__ == "__main__":
    main()
