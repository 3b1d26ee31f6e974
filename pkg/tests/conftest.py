import numpy as np
import pytest

from fauno.simcore import Link
from fauno.topology import DeviceProfile, Node, Topology


def profile(name="dev", cores=1, freq=50.0, queue_cap=10, client=False, tx_power=40.0):
    return DeviceProfile(name, cores, freq, queue_cap, tx_power, receives_client_tasks=client)


def make_topology(edges, profiles, manager=0, bandwidth=4e6):
    nodes = [Node(i, p, float(i), 0.0) for i, p in enumerate(profiles)]
    links = {(a, b): Link(a, b, bandwidth) for a, b in edges}
    return Topology(nodes, links, manager)


def star(n_leaves, hub=None, leaf=None):
    hub = hub or profile("hub", cores=4, freq=100.0)
    leaf = leaf or profile("leaf", client=True)
    return make_topology([(0, i) for i in range(1, n_leaves + 1)], [hub] + [leaf] * n_leaves)


def line(n, prof=None):
    prof = prof or profile(client=True)
    return make_topology([(i, i + 1) for i in range(n - 1)], [prof] * n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def max_rel_err(analytic, numeric, floor=1e-4):
    """Largest |a - n| / max(|a|, |n|, floor).

    The floor keeps float64 round-off in a central difference of an O(1) loss
    (about 1e-10 absolute at h = 1e-5) from dominating entries near zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (edited in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


# one line per acceptance criterion, echoed in the terminal summary so it survives output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for text in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(text)
