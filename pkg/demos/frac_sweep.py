"""
How much mass should partial transport move?
============================================

Drives the command line exactly as a user would: generate a training
and a test set, then sweep the transported fraction over 0.4 to 0.9 and
print the resulting table.  Pass a number of epochs as the first
argument (default 100, about 40 seconds) to trade accuracy for speed.
"""

import sys
import tempfile
from pathlib import Path

from madpot.cli import main

epochs = sys.argv[1] if len(sys.argv) > 1 else "100"
root = Path(tempfile.mkdtemp(prefix="madpot-sweep-"))

main(["gen-data", "--out", str(root / "train"), "--normal", "16", "--abnormal", "16", "--seed", "1"])
main(["gen-data", "--out", str(root / "test"), "--normal", "32", "--abnormal", "32", "--seed", "2"])

# one training run per value, all from the same seed; rows are value,ac_auc,as_auc
main(
    [
        "sweep", "--param", "frac", "--values", "0.4:0.9:0.1",
        "--data", str(root / "train"), "--eval-data", str(root / "test"),
        "--epochs", epochs, "--seed", "1",
    ]
)
