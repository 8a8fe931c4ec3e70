import numpy as np
import pytest
from hypothesis import strategies as st

from pseudolabel.datamodel import Annotation, Dataset, Detection, FewShotSplit
from pseudolabel.geometry import Box, ImageExtent

coord = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
size = st.floats(1e-2, 1e3, allow_nan=False, allow_infinity=False)
size0 = st.floats(0.0, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, positive=True):
    return Box(draw(coord), draw(coord), draw(size if positive else size0), draw(size if positive else size0))


def random_box(rng, lo=0.0, hi=100.0, min_size=1.0, max_size=50.0):
    return Box(float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)),
               float(rng.uniform(min_size, max_size)), float(rng.uniform(min_size, max_size)))


def make_dataset(n_images=2, categories=(1, 2, 3), anns=()):
    images = {i: ImageExtent(100, 100) for i in range(1, n_images + 1)}
    return Dataset(images, {c: f"c{c}" for c in categories}, list(anns))


def simple_split(base=(1,), novel=(2, 3), K=1, shots=None):
    if shots is None:
        shots = [Annotation(100 + i, 1, Box(0, 0, 10, 10), c, source="fewshot")
                 for i, c in enumerate(sorted(novel)) for _ in range(K)]
        shots = [Annotation(100 + i, s.image_id, s.box, s.category, source="fewshot")
                 for i, s in enumerate(shots)]
    return FewShotSplit(frozenset(base), frozenset(novel), K, tuple(shots))


def det(id, category=2, score=0.9, image_id=1, box=(0, 0, 10, 10)):
    return Detection(id, image_id, Box(*box), category, score)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_eval_instance(rng, max_dets=20, max_gt=10, categories=(1, 2, 3), n_images=3,
                         with_ignores=True):
    """Small detection problem: detections near ground truth, random boxes, optional ignores."""
    gts = []
    for i in range(int(rng.integers(0, max_gt + 1))):
        ignore = with_ignores and rng.random() < 0.2
        gts.append(Annotation(i + 1, int(rng.integers(1, n_images + 1)), random_box(rng, 0, 60, 5, 40),
                              int(rng.choice(categories)), is_ignore=ignore))
    dets = []
    for i in range(int(rng.integers(0, max_dets + 1))):
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            s = rng.uniform(0.0, 0.3)
            x, y = g.box.x + s * g.box.w * rng.normal(), g.box.y + s * g.box.h * rng.normal()
            w, h = g.box.w * (1 + s * rng.normal()) + 1e-3, g.box.h * (1 + s * rng.normal()) + 1e-3
            box = Box(x, y, abs(w), abs(h))
            image, cat = g.image_id, (g.category if rng.random() < 0.8 else int(rng.choice(categories)))
        else:
            box = random_box(rng, 0, 60, 5, 40)
            image, cat = int(rng.integers(1, n_images + 1)), int(rng.choice(categories))
        score = float(rng.random())
        if rng.random() < 0.3:
            score = round(score, 1)  # exact ties
        dets.append(Detection(i + 1, image, box, cat, score))
    return dets, gts


# PASS/FAIL lines recorded by test_acceptance.py, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
