"""Stationary window counts on the tree against Poisson, sampled through the backward walkers."""
import sys

from _common import run
from sepkit import scenarios

if __name__ == "__main__":
    sys.exit(run(scenarios.poisson_windows, __doc__, levels=(6, 8, 10), depth=12, horizon=200.0,
                 replicas=10_000, seed=1, jobs=1))
