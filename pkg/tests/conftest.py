"""Shared fixtures: synthetic IDX corpora and small helpers.

The suite runs against real digit/fashion IDX files when the BRFL_DATA_DIR
environment variable points at them; otherwise it generates the deterministic
synthetic stand-in corpora once per session and uses those.
"""

from __future__ import annotations

import os
from pathlib import Path

import pytest

from brfl.sim import dataset_paths
from brfl.synth import write_corpus

SYNTH_TRAIN = 12000
SYNTH_TEST = 2000
SYNTH_SEED = 1234


def _has_real_data(path: str | None) -> bool:
    if not path:
        return False
    try:
        dataset_paths(path, "mnist")
        dataset_paths(path, "fashion")
    except FileNotFoundError:
        return False
    return True


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("synth-corpora")
    write_corpus(root, "mnist", SYNTH_TRAIN, SYNTH_TEST, SYNTH_SEED)
    write_corpus(root, "fashion", SYNTH_TRAIN, SYNTH_TEST, SYNTH_SEED)
    return root


@pytest.fixture(scope="session")
def data_root(synth_root) -> tuple[Path, str]:
    """(directory, source label) for the corpora the experiments run on."""
    env = os.environ.get("BRFL_DATA_DIR")
    if _has_real_data(env):
        return Path(env), "real IDX corpora"
    return synth_root, "synthetic stand-in corpora"
