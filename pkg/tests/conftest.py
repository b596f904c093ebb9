import numpy as np
import pytest

from meanfield_bd.model import ModelSpec


@pytest.fixture
def logistic():
    """d=1 carrying-capacity model: growth 1, capacity 100."""
    return ModelSpec(d=1, lam=[2.0], mu=[1.0], gamma=[[0.0]], w=[[0.01]], r0=[1.0])


@pytest.fixture
def two_type_switch():
    """d=2 symmetric type switching, critical rates, no interaction."""
    g = 0.7
    return ModelSpec(
        d=2, lam=[1.0, 1.0], mu=[1.0, 1.0],
        gamma=[[-g, g], [g, -g]], w=np.zeros((2, 2)), r0=[1.0, 0.0],
    )
