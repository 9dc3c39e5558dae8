import numpy as np
import pytest

from racon import gaits, retrieval


@pytest.fixture(scope="session")
def walk_clips():
    return gaits.generate_synthetic_clips("walk", 200, 7)


@pytest.fixture(scope="session")
def turn_clips():
    return gaits.generate_synthetic_clips("turn", 200, 8, id_start=2_000_000)


@pytest.fixture(scope="session")
def zombie_clips():
    return gaits.generate_synthetic_clips("zombie", 60, 9, id_start=4_000_000)


@pytest.fixture(scope="session")
def walk_db(walk_clips):
    return retrieval.build_database(walk_clips, "walk")


@pytest.fixture(scope="session")
def turn_db(turn_clips):
    return retrieval.build_database(turn_clips, "turn")


@pytest.fixture(scope="session")
def zombie_db(zombie_clips):
    return retrieval.build_database(zombie_clips, "zombie")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
