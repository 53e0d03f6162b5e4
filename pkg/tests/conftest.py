import numpy as np
import pytest

from ppkt import synthdata as sd
from ppkt.models import ModelConfig, ParamStore, init_teacher
from ppkt.numerics import make_rng

TINY = ModelConfig(embed_dim=8, teacher_channels=(4, 4, 6), student_widths=(5, 7), voxel_size=0.2)


def store_of(**arrays):
    """ParamStore holding copies of the given arrays, all trainable."""
    s = ParamStore()
    for k, v in arrays.items():
        s.add(k, np.array(v, dtype=np.float64))
    return s


def jitter_biases(params, seed=5):
    """Positive biases keep tiny ReLU nets away from all-dead rows during finite differences."""
    rng = make_rng(seed)
    for name, p in params.items():
        if name.endswith(".b"):
            p.value[...] = rng.uniform(0.05, 0.3, p.value.shape)
    return params


@pytest.fixture(scope="session")
def small_frames():
    return sd.generate_dataset(2, 4, 11)


@pytest.fixture(scope="session")
def tiny_teacher():
    return jitter_biases(init_teacher(ParamStore(), TINY, make_rng(0)))


# acceptance report: one PASS/FAIL line per criterion, printed after the run


def pytest_addoption(parser):
    parser.addoption("--reference-dir", default=None,
                     help="reuse reference artifacts (datasets, checkpoints) from this directory")


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])


class Report:
    def __init__(self, config):
        self.lines = config.acceptance_lines
        self.seconds = {}

    def record(self, criterion, passed, detail, seconds=None):
        if seconds is not None:
            self.seconds[criterion] = seconds
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        self.lines[str(criterion)] = line
        print(line)
        return passed


@pytest.fixture(scope="session")
def report(pytestconfig):
    return Report(pytestconfig)
