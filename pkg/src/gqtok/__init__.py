"""Group-wise lookup-free image tokenizer toolkit."""

import os

# Cap BLAS parallelism before numpy is first imported; reduction order (and
# with it bit-level reproducibility) depends on the thread count.
_threads = os.environ.get("GQTOK_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
