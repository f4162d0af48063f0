import os
import sys

# Pin BLAS to one thread before numpy loads: float64 runs must not depend on
# reduction partitioning.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")


def pytest_runtest_logreport(report):
    # One visible verdict line per acceptance criterion, even under capture.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        verdict = "PASS" if report.passed else "FAIL"
        sys.stderr.write(f"\n[acceptance] {verdict} {name}\n")
        sys.stderr.flush()
