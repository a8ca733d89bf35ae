"""Green-function values, window sups and Dirichlet sums on the binary tree."""
import sys

from _common import run
from sepkit import scenarios

if __name__ == "__main__":
    sys.exit(run(scenarios.constants, __doc__, quick=False))
