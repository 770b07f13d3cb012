import os

os.environ.setdefault("IMO_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from imo.core import kernels  # noqa: E402

_ACCEPTANCE = []


@pytest.fixture
def acceptance_log():
    """Append ``(criterion, passed, detail)``; printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# the overfit fixture: 8 phantoms, default desk config, seed 1, every case in the train split
OVERFIT_CONFIG = "n = 8\ntrain_fraction = 1.0\ndata_seed = 1\nseed = 1\nmax_steps = 2000\n"


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Generate and train through the CLI once; later tests read the artifacts."""
    import time

    from imo.cli import main

    root = tmp_path_factory.mktemp("overfit")
    cfg = root / "overfit.txt"
    cfg.write_text(OVERFIT_CONFIG + f"data = {root / 'data'}\nout = {root / 'out'}\nckpt = {root / 'out' / 'model.imoc'}\n")
    assert main(["gen-data", "--config", str(cfg)]) == 0
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg)]) == 0
    return {"root": root, "config": cfg, "ckpt": root / "out" / "model.imoc", "data": root / "data",
            "history": root / "out" / "history.csv", "train_seconds": time.perf_counter() - t0}
