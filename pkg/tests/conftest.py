import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parent.parent
SCENES = REPO / "scenes"


@pytest.fixture(scope="session")
def scenes_dir() -> Path:
    return SCENES


@pytest.fixture(scope="session")
def pen_scene_path() -> Path:
    return SCENES / "pen.json"


@pytest.fixture(scope="session")
def pen_eval_scene_path() -> Path:
    return SCENES / "pen_eval.json"


@pytest.fixture(scope="session")
def pen_tree_path() -> Path:
    return SCENES / "pen_grasp.bt"


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, pen_eval_scene_path):
    """A 3-video dataset shared by evaluation/CLI tests."""
    from kgservo.dataset import generate_dataset

    out = tmp_path_factory.mktemp("dataset") / "ds"
    generate_dataset(pen_eval_scene_path, out, n_videos=3, seed=5)
    return out
