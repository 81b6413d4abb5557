from pathlib import Path

import numpy as np
import pytest

pytest.register_assert_rewrite("flexmol.testing")

from flexmol import testing  # noqa: E402
from flexmol.molio import Bond, BondType, Molecule, write_jsonl  # noqa: E402


def pytest_addoption(parser):
    parser.addoption(
        "--full-suite",
        action="store_true",
        help="Run the full suite of tests. This includes the slow training runs.",
    )


def pytest_runtest_setup(item):
    if "full_suite" in item.keywords and not item.config.getoption("--full-suite"):
        pytest.skip("need --full-suite option to run this test")


@pytest.fixture(autouse=True)
def cache_dir(tmp_path, monkeypatch) -> Path:
    """
    Isola o cache de features de cada teste.
    """
    path = tmp_path / "cache"
    monkeypatch.setenv("FLEXMOL_CACHE_DIR", str(path))
    return path


@pytest.fixture
def water() -> Molecule:
    coords = [[0.0, 0.0, 0.0], [0.9572, 0.0, 0.0], [-0.2400, 0.9266, 0.0]]
    return Molecule("water", [8, 1, 1], bonds=[(0, 1, "single"), (0, 2, "single")], conformers=[coords])


@pytest.fixture
def propane_chain() -> Molecule:
    """
    Cadeia linear de 4 átomos: 0-1-2-3.
    """
    bonds = [Bond(0, 1), Bond(1, 2, BondType.DOUBLE), Bond(2, 3)]
    coords = np.array([[0.0, 0, 0], [1.5, 0, 0], [3.0, 0, 0], [4.5, 0, 0]])
    return Molecule("chain4", [6, 6, 6, 8], bonds=bonds, conformers=[coords])


@pytest.fixture
def paired() -> list[Molecule]:
    return testing.random_dataset(6, seed=1)


@pytest.fixture
def model():
    return testing.tiny_model()


@pytest.fixture
def paired_file(tmp_path, paired) -> Path:
    path = tmp_path / "paired.jsonl"
    write_jsonl(path, paired)
    return path
