"""Exact window variance on the tree for a range of window levels (lumped pair chain)."""
import sys

from _common import run
from sepkit import scenarios


def main(levels, depth, method):
    return scenarios.variance_envelope(levels=levels, depth=depth, method=method)


if __name__ == "__main__":
    sys.exit(run(main, __doc__, levels=(6, 7, 8, 9, 10), depth=40, method="solve"))
