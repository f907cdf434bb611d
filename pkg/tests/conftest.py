import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from sodade.dataio import default_split_types, split_solvents
from sodade.model import ModelConfig
from sodade.pretrain import TrainConfig, train
from sodade.synthetic import make_reaction_table, make_solvent_table

DATA = Path(__file__).parent / "data"

TINY = ModelConfig(d_model=8, heads=2, layers=1, ffn_dim=16)
FAST = TrainConfig(max_epochs=2, samples_per_solvent=2, batch_size=64)

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def synth():
    table, latents = make_solvent_table(200, seed=0)
    return table, latents


@pytest.fixture(scope="session")
def synth_reactions(synth):
    table, latents = synth
    return make_reaction_table(table, latents, seed=0)


@pytest.fixture(scope="session")
def synth_split(synth, synth_reactions):
    table, _ = synth
    val_types, test_types = default_split_types(table, synth_reactions)
    return split_solvents(table, val_types, test_types, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_ckpt(synth, synth_split):
    table, _ = synth
    return train(table, synth_split, TINY, FAST)


ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


@pytest.fixture
def record_criterion(request):
    """record(n, ok, detail): ok is a bool or a status string such as "NOT EVALUATED"."""

    def record(n, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"criterion {n}: {status} | {detail}"
        request.config.stash[ACCEPTANCE][n] = line
        print(line)

    return record
