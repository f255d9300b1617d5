"""Pose-guided Gaussian splatting for novel view synthesis of articulated figures."""

import os

# numba's bundled scheduler; the TBB layer needs a newer TBB than many systems ship
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
