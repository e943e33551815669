"""SMA-Net sequence classifier built on a small numpy autodiff core."""

import os

# single-threaded BLAS: the training loop must be deterministic and one-core
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
