import numpy as np
import pytest
import torch

from smplgait.core import GaitSample, read_manifest
from smplgait.data import PreprocessConfig
from smplgait.model import ModelConfig
from smplgait.synth import SynthConfig, generate_dataset

DESK_PRE = PreprocessConfig(32, 24)
DESK_MODEL = ModelConfig(input_size=(32, 24), channels=(16, 16, 32, 32, 64, 64),
                         hpp_scales=(1, 2, 4, 8), part_dim=64)
TINY_MODEL = ModelConfig(input_size=(32, 24), channels=(4, 4, 8, 8, 8, 8),
                         stn_hidden=(16, 16), hpp_scales=(1, 2, 4, 8), part_dim=8)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 subjects x 3 sequences, two views; rendered once per session."""
    root = tmp_path_factory.mktemp("small_ds")
    cfg = SynthConfig(num_subjects=8, sequences_per_subject=3, frames_range=(25, 40),
                      views=((0.0, 10.0), (90.0, 10.0)), seed=3)
    generate_dataset(cfg, root, input_size=DESK_PRE.size)
    return read_manifest(root)


def random_sample(rng, length=12, size=(32, 24), subject=0, seq="x"):
    frames = (rng.random((length,) + tuple(size)) > 0.5).astype(np.uint8) * 255
    smpls = rng.normal(size=(length, 85))
    return GaitSample(subject, 0, seq, frames, smpls)


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = "tests/test_acceptance.py::test_criterion_"
    if marker not in report.nodeid.replace("\\", "/"):
        return
    name = report.nodeid.split("::")[-1]
    _ACCEPTANCE[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda n: int(n.split("_")[2])):
        status = "PASS" if _ACCEPTANCE[name] == "passed" else _ACCEPTANCE[name].upper()
        terminalreporter.write_line(f"{status:7s} {name}")
