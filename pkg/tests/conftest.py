"""Shared preset runs. Each heavy preset runs once per session."""
import pytest

from ghostlab.expcli import preset, run_fig3, run_fig4, run_figS1, run_figS2

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def fig3_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig3")
    cfg = preset("fig3")
    return cfg, run_fig3(cfg, out), out


@pytest.fixture(scope="session")
def fig4_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("fig4")
    cfg = preset("fig4")
    return cfg, run_fig4(cfg, out), out


@pytest.fixture(scope="session")
def figS1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("figS1")
    cfg = preset("figS1")
    return cfg, run_figS1(cfg, out), out


@pytest.fixture(scope="session")
def figS2_runs(tmp_path_factory):
    """Low preset rate at ranks 1 and 10, highest preset rate at every rank."""
    cfg = preset("figS2")
    low = cfg.replace(alphas=[min(cfg.alphas)], ranks=[1, 10])
    high = cfg.replace(alphas=[max(cfg.alphas)])
    return (cfg,
            run_figS2(low, tmp_path_factory.mktemp("figS2_low")),
            run_figS2(high, tmp_path_factory.mktemp("figS2_high")))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
