"""Sweep colour quality on every standard scene and print the table.

Run: python3 demos/03_rate_sweep.py [width height]

The same table is what ``rprr experiment`` writes as CSV; here it is built
in-process at 320x240 by default, which takes about 15 seconds.
"""

import sys

from rprr.experiment import ExperimentConfig, check_thresholds, run_rows, summarize

w, h = (int(sys.argv[1]), int(sys.argv[2])) if len(sys.argv) == 3 else (320, 240)
cfg = ExperimentConfig(scenes=["standard"], width=w, height=h,
                       thresholds={"psnr_monotone": True, "max_byte_ratio": 0.67})
rows = run_rows(cfg)
print(summarize(rows, check_thresholds(rows, cfg.thresholds)))
print("At small sizes the fixed ICP exchange outweighs the pixels saved;")
print("try `python3 demos/03_rate_sweep.py 640 480` to see the ratio drop.")
