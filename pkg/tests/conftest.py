import time

import pytest

from shufbench.dataset import generate_synthetic, load_arrays
from shufbench.shuffle import Strategy, StrategyConfig
from shufbench.storage import PROFILES
from shufbench.trainer import Batch, TrainConfig, reference_objective, run_training


@pytest.fixture
def dense_small(tmp_path):
    path = tmp_path / "dense.shfd"
    generate_synthetic(path, 200, 8, "dense", seed=3)
    return path


@pytest.fixture
def sparse_small(tmp_path):
    path = tmp_path / "sparse.shfd"
    generate_synthetic(path, 300, 40, "sparse", nnz_per_record=6, seed=5)
    return path


CONVERGENCE_STRATEGIES = (Strategy.NONE, Strategy.BMF, Strategy.LIRS_INSTANCE, Strategy.LIRS_PAGE)
SEEDS = range(10)


@pytest.fixture(scope="session")
def convergence_runs(tmp_path_factory):
    """One separable dataset, ten shuffle seeds per strategy; recorded on optane."""
    t0 = time.perf_counter()
    path = tmp_path_factory.mktemp("conv") / "standard.shfd"
    generate_synthetic(path, 50_000, 100, "dense", margin=0.05, seed=0)
    data = load_arrays(path)
    header, y, X = data
    train = TrainConfig(learning_rate=1.0, lam=1e-3, max_epochs=30, target_rfvd=1e-2)
    f_star = reference_objective(Batch(y, X, header.num_features), train.loss, train.lam)
    runs = {}
    for s in CONVERGENCE_STRATEGIES:
        for seed in SEEDS:
            runs[s, seed] = run_training(path, StrategyConfig(s, 50, seed=seed), train, PROFILES["optane"],
                                         cache_pages=1024, workdir=path.parent, f_star=f_star, eval_data=data)
    return runs, time.perf_counter() - t0


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and call.excinfo is not None and not detail:
        detail = call.excinfo.exconly().splitlines()[0]
    item.config._criteria[marker.args[0]] = ("PASS" if rep.passed else "FAIL", rep.duration, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._criteria
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, duration, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({duration:.1f}s)  {detail}")
