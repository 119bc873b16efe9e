import numpy as np
import pytest

from splitflow.fields import Condition, ConstantShiftField, MlpField
from splitflow.scenes import Attribute, Scene
from splitflow.training import TrainConfig, train


def cond(*values, null=False):
    return Condition(np.asarray(values, dtype=float), is_null=null)


def two_cluster_scene():
    return Scene((2, 1, 1), [Attribute("cluster", [(0, 0)], [[-2.0, 0.0], [2.0, 0.0]])], spread=0.5)


@pytest.fixture(scope="session")
def small_trained():
    """A quickly trained field on a 2x2x2 two-attribute scene, shared by the unit tests."""
    scene = Scene((2, 2, 2), [Attribute("a", [(0, 0)], [[1.0, 0.0], [-1.0, 0.5]]),
                              Attribute("b", [(1, 1)], [[0.0, 1.0], [0.5, -1.0]])],
                  spread=0.2, background=np.full((2, 2, 2), 0.3))
    fld = MlpField.create(scene.shape, scene.cond_dim, (32, 32), "tanh", seed=0)
    trained, _ = train(fld, scene, TrainConfig(steps=400, batch_size=64, seed=0))
    return scene, trained


@pytest.fixture
def shift_field():
    """Constant-shift field over 2 channels on a 1x3 grid with a one-hot 3-dim condition."""
    shifts = [np.full((2, 1, 3), 0.5) * np.array([1.0, -1.0])[:, None, None],
              np.full((2, 1, 3), -0.25),
              np.arange(6.0).reshape(2, 1, 3) / 10.0]
    return ConstantShiftField.from_shifts(shifts, null_shift=np.full((2, 1, 3), 0.1))
