import json
from pathlib import Path

import numpy as np
import pytest

from swarmopt.geometry import load_environment

REPO_ROOT = Path(__file__).resolve().parents[1]
ENV_DIR = REPO_ROOT / "envs"


def box_halfspaces(xlo, xhi, ylo, yhi, zlo, zhi, passage=None):
    A = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
    b = [xhi, -xlo, yhi, -ylo, zhi, -zlo]
    mask = passage if passage is not None else [1] * 6
    return {"A": A, "b": b, "passage_mask": mask}


@pytest.fixture(scope="session")
def toy2_env():
    return load_environment(str(ENV_DIR / "toy2_crossing.json"))


@pytest.fixture(scope="session")
def box1_env():
    return load_environment(str(ENV_DIR / "box1.json"))


@pytest.fixture(scope="session")
def quad4_env():
    return load_environment(str(ENV_DIR / "quad4_two_formations.json"))


@pytest.fixture()
def tmp_env_file(tmp_path):
    def write(data: dict, name: str = "env.json") -> str:
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)

    return write


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
