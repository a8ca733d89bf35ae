"""Monte Carlo of the particle flux across the origin from the step configuration on the line."""
import sys

from _common import run
from sepkit import scenarios

if __name__ == "__main__":
    sys.exit(run(scenarios.flux, __doc__, times=(64, 256, 1024), replicas=2000, seed=7, jobs=1))
