import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def mean29():
    from ricpr.pose import load_mean_shape

    return load_mean_shape()


@pytest.fixture(scope="session")
def faces():
    from ricpr.synthetic import make_faces

    return make_faces(60, seed=11)


@pytest.fixture(scope="session")
def small_model(faces):
    """A short cascade trained on the first 50 synthetic faces."""
    from ricpr.cascade import CascadeConfig, train_cascade

    train = faces[:50]
    cfg = CascadeConfig(stages=10, ferns=8, augment=5)
    res = train_cascade([f.image for f in train], [f.shape for f in train], [f.box for f in train], cfg, seed=4)
    return res.model


@pytest.fixture(scope="session")
def small_gallery(faces):
    from ricpr.texture import Gallery, histogram_matrix

    train = faces[:50]
    return Gallery(
        matrices=np.stack([histogram_matrix(f.image, f.box) for f in train]),
        points=np.stack([f.shape.points for f in train]),
        occluded=np.stack([f.shape.occluded for f in train]),
        boxes=np.array([f.box.to_list() for f in train]),
        record_ids=[str(i) for i in range(len(train))],
    )


def random_shape(rng, scale=50.0, offset=100.0):
    from ricpr.shapes import AnnotatedShape

    return AnnotatedShape(rng.normal(size=(29, 2)) * scale + offset, rng.random(29) < 0.3)


# one PASS/FAIL/SKIP line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
