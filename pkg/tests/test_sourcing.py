import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pseudolabel.datamodel import Detection
from pseudolabel.errors import ValidationError
from pseudolabel.geometry import Box
from pseudolabel.sourcing import CandidateSet, source_candidates

from conftest import det, simple_split

SPLIT = simple_split(base=(1,), novel=(2, 3))


def random_dets(rng, n, categories=(1, 2, 3), n_images=20):
    return [Detection(i, int(rng.integers(1, n_images + 1)), Box(0, 0, 5, 5),
                      int(rng.choice(categories)), float(np.round(rng.uniform(0, 1), 3)))
            for i in range(n)]


def sort_oracle(dets, q, cap):
    """Rank with a single full sort over (class, -score, image, position)."""
    keyed = sorted(((d.category, -d.score, d.image_id, pos), d) for pos, d in enumerate(dets)
                   if d.category in SPLIT.novel_categories and d.score > q)
    out, seen = [], {}
    for key, d in keyed:
        seen[d.category] = seen.get(d.category, 0) + 1
        if cap is None or seen[d.category] <= cap:
            out.append(d.id)
    return out


class TestThreshold:
    def test_strict_inequality(self):
        dets = [det(1, score=0.79), det(2, score=0.80), det(3, score=0.81)]
        out = source_candidates(dets, SPLIT, q=0.8)
        assert [d.id for d in out] == [3]

    def test_base_class_excluded(self):
        out = source_candidates([det(1, category=1, score=0.99)], SPLIT, q=0.8)
        assert len(out) == 0

    def test_records_parameters(self):
        out = source_candidates([], SPLIT, q=0.7, cap=5)
        assert out.threshold_q == 0.7 and out.per_class_cap == 5
        assert isinstance(out, CandidateSet)

    @pytest.mark.parametrize("q", [-0.1, 1.5])
    def test_q_out_of_range(self, q):
        with pytest.raises(ValidationError):
            source_candidates([], SPLIT, q=q)

    def test_bad_cap(self):
        with pytest.raises(ValidationError):
            source_candidates([], SPLIT, cap=0)


class TestCap:
    def test_cap_against_sort_oracle(self, rng):
        dets = [Detection(i, int(rng.integers(1, 50)), Box(0, 0, 5, 5), 2,
                          float(np.round(rng.uniform(0.8, 1.0), 3))) for i in range(2000)]
        out = source_candidates(dets, SPLIT, q=0.0, cap=1000)
        assert len(out) == 1000
        assert [d.id for d in out] == sort_oracle(dets, 0.0, 1000)
        kept = sorted((d.score for d in out), reverse=True)
        assert kept == sorted((d.score for d in dets), reverse=True)[:1000]

    def test_ties_break_by_image_then_position(self):
        dets = [det(1, score=0.9, image_id=5), det(2, score=0.9, image_id=2),
                det(3, score=0.9, image_id=2), det(4, score=0.95, image_id=9)]
        out = source_candidates(dets, SPLIT, q=0.5, cap=3)
        assert [d.id for d in out] == [4, 2, 3]

    def test_mixed_classes_random(self, rng):
        dets = random_dets(rng, 500)
        for cap in (None, 1, 7, 1000):
            out = source_candidates(dets, SPLIT, q=0.3, cap=cap)
            assert [d.id for d in out] == sort_oracle(dets, 0.3, cap)


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), q=st.floats(0, 1), cap=st.one_of(st.none(), st.integers(1, 20)))
    def test_subset_novel_above_q_and_idempotent(self, seed, q, cap):
        dets = random_dets(np.random.default_rng(seed), 80)
        out = source_candidates(dets, SPLIT, q, cap)
        ids = {d.id for d in dets}
        assert all(d.id in ids and d.score > q and d.category in SPLIT.novel_categories for d in out)
        for c in SPLIT.novel_categories:
            assert cap is None or sum(d.category == c for d in out) <= cap
        again = source_candidates(out, SPLIT, q, cap)
        assert again.candidates == out.candidates

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), q1=st.floats(0, 1), q2=st.floats(0, 1))
    def test_monotone_in_q(self, seed, q1, q2):
        lo, hi = sorted((q1, q2))
        dets = random_dets(np.random.default_rng(seed), 80)
        assert {d.id for d in source_candidates(dets, SPLIT, hi)} <= \
            {d.id for d in source_candidates(dets, SPLIT, lo)}
