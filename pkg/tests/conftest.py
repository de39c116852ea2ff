import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tendon_forge.limbdyn import LimbModel, Marker, MuscleSpec, load_demo_model  # noqa: E402
from tendon_forge.muscle import MuscleParams  # noqa: E402

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def demo_model():
    return load_demo_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def two_link_arm(lower=-np.pi, upper=np.pi, gravity=0.0):
    """Unit-length two-link arm with a tip marker."""
    return LimbModel(
        lengths=[1.0, 1.0], masses=[1.0, 1.0], inertias=[1 / 12, 1 / 12],
        lower=[lower, lower], upper=[upper, upper], gravity=gravity,
        markers=[Marker("elbow", 0, (1.0, 0.0)), Marker("tip", 1, (1.0, 0.0))],
    )


def lever_model(r=0.05, mirrored=False, gravity=0.0, reach=0.3):
    """One link hinged at the origin.

    The muscle inserts on the link at radius r perpendicular to it, right at
    the joint, and runs back to a base site ``reach`` behind the joint, so at
    q = 0 the tendon is perpendicular to the lever arm.
    """
    p = MuscleParams(f0=50.0)
    muscles = [MuscleSpec("up", p, ((-1, (-reach, r)), (0, (0.0, r))))]
    if mirrored:
        muscles.append(MuscleSpec("down", p, ((-1, (-reach, -r)), (0, (0.0, -r)))))
    return LimbModel(
        lengths=[0.5], masses=[1.0], inertias=[0.02], lower=[-1.5], upper=[1.5],
        gravity=gravity, muscles=muscles, markers=[Marker("tip", 0, (0.5, 0.0))],
    )
