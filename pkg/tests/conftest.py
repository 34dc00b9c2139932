import numpy as np
import pytest


def make_blobs(n_per=100, dim=10, sep=12.0, sigma=1.0, seed=0, n_blobs=3):
    """Gaussian blobs whose centres are ``sep`` apart along orthogonal axes (>= 10 sigma)."""
    rng = np.random.default_rng(seed)
    centres = np.zeros((n_blobs, dim))
    for i in range(n_blobs):
        centres[i, i] = sep / np.sqrt(2.0)
    x = np.concatenate([rng.normal(c, sigma, (n_per, dim)) for c in centres])
    y = np.repeat(np.arange(n_blobs), n_per)
    return x, y


@pytest.fixture(scope="session")
def blobs():
    return make_blobs()


def trustworthiness(x_high, x_low, k=15):
    """Direct rank-list formula.

    T(k) = 1 - 2 / (n k (2n - 3k - 1)) * sum_i sum_{j in U_k(i)} (r(i, j) - k)
    where U_k(i) are the low-dimensional k-neighbours of i that are not among its
    high-dimensional k-neighbours and r(i, j) is j's rank around i in the input space.
    """
    n = len(x_high)

    def dist(x):
        return np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))

    dh, dl = dist(x_high), dist(x_low)
    np.fill_diagonal(dh, np.inf)
    np.fill_diagonal(dl, np.inf)
    order_h = np.argsort(dh, axis=1, kind="stable")
    ranks = np.empty_like(order_h)
    rows = np.arange(n)[:, None]
    ranks[rows, order_h] = np.arange(1, n + 1)[None, :]
    nn_low = np.argsort(dl, axis=1, kind="stable")[:, :k]
    penalty = 0.0
    for i in range(n):
        r = ranks[i, nn_low[i]]
        penalty += np.sum(np.maximum(r - k, 0))
    return 1.0 - 2.0 / (n * k * (2 * n - 3 * k - 1)) * penalty


def knn_accuracy(x, y, k=5):
    """Leave-one-out kNN classification accuracy."""
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = y[nn]
    pred = np.array([np.bincount(v, minlength=y.max() + 1).argmax() for v in votes])
    return float((pred == y).mean())


ACCEPTANCE_LINES: list[str] = []


class Criterion:
    """Collects the measured checks of one acceptance criterion and renders a single verdict line."""

    def __init__(self, name):
        self.name = name
        self.checks = []
        self.done = False

    def check(self, label, ok, value):
        self.checks.append((label, bool(ok), value))
        return ok

    def line(self, error=None):
        ok = error is None and self.checks and all(c[1] for c in self.checks)
        parts = [f"{label}={value}{'' if good else ' (x)'}" for label, good, value in self.checks]
        if error is not None:
            parts.append(f"error={type(error).__name__}: {error}")
        return f"[{'PASS' if ok else 'FAIL'}] {self.name}: " + "; ".join(parts), ok


    def finish(self, error=None):
        text, ok = self.line(error)
        self.done = True
        ACCEPTANCE_LINES.append(text)
        print("\n" + text)
        return text, ok


@pytest.fixture
def criterion(request):
    """Yields a collector; the verdict line is emitted when the test body returns or raises."""
    crit = Criterion(request.node.name.removeprefix("test_"))
    yield crit
    if not crit.done:
        crit.finish()


@pytest.hookimpl(wrapper=True)
def pytest_pyfunc_call(pyfuncitem):
    crit = pyfuncitem.funcargs.get("criterion")
    try:
        result = yield
    except BaseException as exc:
        if isinstance(crit, Criterion):
            crit.finish(exc)
        raise
    if isinstance(crit, Criterion):
        text, ok = crit.finish()
        if not ok:
            pytest.fail(text, pytrace=False)
    return result


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for text in dict.fromkeys(ACCEPTANCE_LINES):
            terminalreporter.write_line(text)
