# Pin BLAS to one thread before numpy loads: the factorizations in this
# package are small enough that thread fan-out only adds overhead, and
# single-threaded kernels keep replicate workers from oversubscribing.
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
