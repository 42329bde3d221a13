import os

# Pin BLAS threading before numpy loads anywhere; the determinism
# contracts (identical logs/checkpoints across runs) assume
# single-threaded reductions.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)
