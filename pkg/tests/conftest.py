import numpy as np
import pytest

from recgap.data import InteractionLog

ACCEPTANCE_LINES: list[str] = []


def random_log(rng, n_users=8, n_items=10, n_events=40, t_max=50, zipf=None) -> InteractionLog:
    users = [f"u{rng.integers(n_users):02d}" for _ in range(n_events)]
    if zipf:
        w = 1.0 / np.arange(1, n_items + 1) ** zipf
        items = [f"i{x:03d}" for x in rng.choice(n_items, size=n_events, p=w / w.sum())]
    else:
        items = [f"i{rng.integers(n_items):03d}" for _ in range(n_events)]
    ts = rng.integers(0, t_max, size=n_events)
    return InteractionLog(users, items, ts)


def csv_bytes(rows) -> bytes:
    return ("user_id,item_id,timestamp\n" + "".join(f"{u},{i},{t}\n" for u, i, t in rows)).encode()


@pytest.fixture
def toy_log():
    # N_u1 = {a, b}, N_u2 = {b, c}, N_u3 = {c}
    return InteractionLog(["u1", "u1", "u2", "u2", "u3"], ["a", "b", "b", "c", "c"], [1, 2, 3, 4, 5])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def synthetic_results(n_match, n_datasets=5, L=3, val="loo", beta=0.0):
    """Results table with exactly ``n_match`` of ``n_datasets * 14`` matching (dataset, k) cells."""
    from recgap.experiment import DatasetResult, ExperimentGrid, GridResults, DEFAULT_K_VALUES
    from recgap.offline import Val

    tags = [f"d{j}" for j in range(n_datasets)]
    grid = ExperimentGrid(tags, DEFAULT_K_VALUES, (beta,), (Val(val),))
    out, cell = {}, 0
    for tag in tags:
        recall = np.zeros((1, 1, len(DEFAULT_K_VALUES), L))
        for j in range(len(DEFAULT_K_VALUES)):
            recall[0, 0, j, 0 if cell < n_match else L - 1] = 0.5
            cell += 1
        ictr = np.linspace(0.3, 0.1, L)  # model 0 wins online everywhere
        out[tag] = DatasetResult(tag, [f"m{m}" for m in range(L)], recall, ictr,
                                 np.full(L, 100))
    return GridResults(grid, out)
