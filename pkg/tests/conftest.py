import hashlib

import numpy as np
import pytest
import torch

from swimvg.config import profile
from swimvg.data import GenConfig, make_split
from swimvg.model import SwimVG
from swimvg.trainer import collate


def tensor_digest(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def frozen_digest(model: SwimVG) -> str:
    return tensor_digest(p for p in model.parameters() if not p.requires_grad)


@pytest.fixture
def toy_cfg():
    return profile("toy")


@pytest.fixture(scope="session")
def small_split():
    cfg = profile("toy")
    return make_split(GenConfig.from_model_config(cfg), 64, 32, 3)


@pytest.fixture
def toy_batch(small_split):
    return collate(small_split["train"][:8])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


CRITERIA_LINES: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}: {detail}"
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda l: int(l.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
