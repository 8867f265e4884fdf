import pytest

from cmpnet.data import generate_dataset, load_dataset

_acceptance_lines = []


@pytest.fixture
def acceptance():
    """Record a pass/fail line for the acceptance summary."""

    def report(name, passed, detail=""):
        _acceptance_lines.append(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_dataset(out, seed=1, num_classes=8, per_class_train=64, per_class_test=16, size=32)
    return out


@pytest.fixture(scope="session")
def default_data(default_data_dir):
    return load_dataset(default_data_dir)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_small")
    generate_dataset(out, seed=3, num_classes=4, per_class_train=8, per_class_test=4, size=16)
    return out
