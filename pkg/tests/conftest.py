import pytest

from pyeiph.core_model import *
from pyeiph.synth import golden_fixture


def _make_set(cells, width=4096, height=4096, slide_id="t"):
    """
    cells: (x, y, w, h, grade) tuples, ids follow the list order
    """
    meta = SlideMeta(slide_id, width, height)
    return AnnotationSet(
        meta, tuple(CellAnnotation(i, BoundingBox(*c[:4]), c[4]) for i, c in enumerate(cells))
    )


@pytest.fixture
def make_set():
    return _make_set


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    return tmp_path_factory.mktemp("fixtures")


@pytest.fixture(scope="session")
def mini(fixture_root):
    return golden_fixture("mini", fixture_root)


@pytest.fixture(scope="session")
def gradient(fixture_root):
    return golden_fixture("gradient", fixture_root)


@pytest.fixture(scope="session")
def sparse_rare(fixture_root):
    return golden_fixture("sparse-rare", fixture_root)
