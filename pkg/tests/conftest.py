import math

import numpy as np
import pytest

from selfcal.kinecore import ROOT, DHLink, MountTransform, RobotModel
from selfcal.simlab import desk_rig


def planar_arm(lengths=(1.0, 1.0), parent=ROOT, prefix="j", base=None):
    """Planar revolute arm in the root xy-plane."""
    frames = []
    if base is not None:
        frames.append(base)
        parent = base.name
    for i, a in enumerate(lengths, start=1):
        frames.append(DHLink(f"{prefix}{i}", parent, a=a))
        parent = f"{prefix}{i}"
    return frames


def random_tree(rng, n_frames=8):
    """A random frame tree mixing DH links and mounts (each frame hangs off an earlier one)."""
    frames = []
    names = [ROOT]
    for i in range(n_frames):
        parent = names[rng.integers(len(names))]
        name = f"f{i}"
        if rng.uniform() < 0.6:
            frames.append(DHLink(name, parent, *rng.uniform(-0.3, 0.3, 2), *rng.uniform(-math.pi, math.pi, 2),
                                 "revolute" if rng.uniform() < 0.8 else "fixed"))
        else:
            q = rng.normal(size=4)
            frames.append(MountTransform(name, parent, tuple(rng.uniform(-0.2, 0.2, 3)), tuple(q / np.linalg.norm(q))))
        names.append(name)
    return RobotModel(tuple(frames))


@pytest.fixture(scope="session")
def rig():
    return desk_rig()
