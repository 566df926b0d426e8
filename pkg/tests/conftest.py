import numpy as np
import pytest
import torch

from mpmri_series.phantom import PhantomSpec, generate_studies, write_dicom_tree


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_spec():
    return PhantomSpec(num_studies=2, image_shape=(16, 16, 4), num_dwi_bvalues=3, seed=3)


@pytest.fixture(scope="session")
def small_studies(small_spec):
    return generate_studies(small_spec)


@pytest.fixture(scope="session")
def phantom_tree(tmp_path_factory, small_studies):
    out = tmp_path_factory.mktemp("tree") / "phantom"
    write_dicom_tree(small_studies, out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


class _Criterion:
    def __init__(self, number, title, limit_s):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.detail = ""

    def line(self, ok, elapsed):
        status = "PASS" if ok else "FAIL"
        return f"[{status}] criterion {self.number}: {self.title} ({elapsed:.1f}s, limit {self.limit_s:.0f}s) {self.detail}"


@pytest.fixture
def criterion(request):
    """Context manager that prints and records one PASS/FAIL line per acceptance criterion.

    A criterion fails if its body raises or runs past its time limit.
    """
    import contextlib
    import time

    verdicts = request.config.stash.setdefault(_VERDICTS, [])

    @contextlib.contextmanager
    def run(number, title, limit_s):
        c = _Criterion(number, title, limit_s)
        start = time.perf_counter()
        ok = False
        try:
            yield c
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            timely = elapsed < limit_s
            line = c.line(ok and timely, elapsed)
            print(line)
            verdicts.append(line)
        assert timely, f"criterion {number} took {elapsed:.1f}s, limit {limit_s}s"

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, [])
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for line in sorted(verdicts, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
