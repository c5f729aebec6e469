#!/usr/bin/env python3
"""Compare the three pretraining objectives (MSE, symmetric NCE, the
patch-wise contrastive loss) under one config via the CLI's ablate
subcommand.
"""

import sys
import tempfile
from pathlib import Path

from irvis.cli import main as cli_main

DEFAULT_CONFIG = """\
epochs=4
warmup_epochs=1
base_lr=0.003
n_pairs=16
batch_size=4
n_probe=16
"""


def main():
    if len(sys.argv) > 1:
        return cli_main(["ablate", "--config", sys.argv[1]])
    with tempfile.TemporaryDirectory() as d:
        cfg = Path(d) / "ablate.cfg"
        cfg.write_text(DEFAULT_CONFIG)
        return cli_main(["ablate", "--config", str(cfg)])


if __name__ == "__main__":
    sys.exit(main())
