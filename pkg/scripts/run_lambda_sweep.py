"""Sweep the backward-compatibility loss weight on the default scenario.

Produces sweep.csv / summary.csv / summary.json under runs/lambda_sweep/.
"""

import sys

from bict.cli import main

if __name__ == "__main__":
    jobs = sys.argv[1] if len(sys.argv) > 1 else "3"
    sys.exit(main(["sweep-lambda", "--out", "runs/lambda_sweep",
                   "--jobs", jobs, "--force"]))
