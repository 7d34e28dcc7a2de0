import pytest

from rtgbid.experiment import DeskConfig, run_seed


def pytest_configure(config):
    config.rtgbid_verdicts = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.rtgbid_verdicts
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(verdicts):
        terminalreporter.write_line(verdicts[key])


@pytest.fixture
def verdict(request):
    """``verdict(n, ok, detail)`` records and prints one PASS/FAIL line for criterion ``n``."""

    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.rtgbid_verdicts[(n, request.node.name)] = line
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def desk_config():
    return DeskConfig()


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory, desk_config):
    """The default desk benchmark: every seed iterated, baselines trained, all methods evaluated."""
    root = tmp_path_factory.mktemp("desk")
    results = [run_seed(seed, desk_config, out_dir=str(root / f"seed{seed}")) for seed in desk_config.seeds]
    return root, results
