"""Tune engine fit options with the engine itself as the surrogate regressor.

    python scripts/self_tune.py --space data/engine_space.txt --train data/demo_train.csv \
        --target label --n-seed 6 --n-candidates 50 --top-m 3 --out results/self_tune

Equivalent to the hpo subcommand with ``--objective engine --surrogate engine``.
"""

import sys

from picotab.cli import dispatch

if __name__ == "__main__":
    raise SystemExit(dispatch(["hpo", "--objective", "engine", "--surrogate", "engine", *sys.argv[1:]]))
