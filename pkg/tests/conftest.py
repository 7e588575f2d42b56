import numpy as np
import pytest

from sharpcos.data import Dataset, write_cifar_file


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def make_dataset(n: int, seed: int = 0, split: str = "train") -> Dataset:
    """Class-dependent coloured noise, quantised to bytes so it survives a file round trip."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    images = rng.random((n, 3, 32, 32)) * 0.4
    for i, c in enumerate(labels):
        images[i, c % 3] += 0.05 * c
        images[i, :, (c * 3):(c * 3) + 3, :] += 0.3
    images = np.rint(np.clip(images, 0, 1) * 255) / 255
    return Dataset(images, labels, split)


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    """A tiny archive in the binary CIFAR-10 layout (one train batch + test batch)."""
    d = tmp_path_factory.mktemp("cifar")
    write_cifar_file(make_dataset(200, 0), d / "data_batch_1.bin")
    write_cifar_file(make_dataset(100, 1, "test"), d / "test_batch.bin")
    return d


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split()[0])):
            terminalreporter.write_line(line)
