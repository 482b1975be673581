import numpy as np
import pytest

from gencap.core_model import PartGeometry, Template, TemplateSet
from gencap.scene_gen import standard_constellation_set


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def constellation():
    return standard_constellation_set()


def make_template(name, points):
    return Template(id=name, parts=tuple(PartGeometry(float(x), float(y)) for x, y in points))


@pytest.fixture
def square_template():
    return make_template("sq", [(1, 1), (-1, 1), (-1, -1), (1, -1)])


@pytest.fixture
def triangle_template():
    return make_template("tri", [(-1, -2 / 3), (1, -2 / 3), (0, 4 / 3)])


@pytest.fixture
def pair_set(square_template, triangle_template):
    return TemplateSet((square_template, triangle_template))
