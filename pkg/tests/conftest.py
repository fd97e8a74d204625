from pathlib import Path

import pytest

from hypernymy.hierarchy import load_hierarchy

DATA = Path(__file__).parent / "data"
TOY = DATA / "toy"
REAL = DATA / "imagenet1k"


def graph_args(root: Path) -> list[str]:
    args = ["--edges", str(root / "edges.txt"), "--leaf-map", str(root / "leaves.txt")]
    if (root / "lemmas.txt").exists():
        args += ["--lemmas", str(root / "lemmas.txt")]
    return args


@pytest.fixture(scope="session")
def toy_graph():
    return load_hierarchy(TOY / "edges.txt", TOY / "leaves.txt", TOY / "lemmas.txt")


@pytest.fixture(scope="session")
def real_graph():
    return load_hierarchy(REAL / "edges.txt", REAL / "leaves.txt", REAL / "lemmas.txt", n_leaves=1000)
