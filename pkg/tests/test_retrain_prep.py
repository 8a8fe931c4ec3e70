import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pseudolabel.datamodel import Annotation, load_dataset, save_annotations
from pseudolabel.errors import IntegrityError, ValidationError
from pseudolabel.geometry import Box
from pseudolabel.retrain_prep import (
    IGNORED,
    NEGATIVE,
    POSITIVE,
    RoiAssignment,
    assemble_retrain_set,
    assign_roi,
    assign_rpn,
    emit_ignore_regions,
    pseudo_annotations,
)
from pseudolabel.sourcing import source_candidates
from pseudolabel.synthworld.world import WorldConfig, generate_world, novel_detections, simulate_detector
from pseudolabel.verifier import VerificationOutcome, build_knn, k_for_shots, verify

from conftest import det, make_dataset, random_box, simple_split

GT = Annotation(1, 1, Box(0, 0, 10, 10), 2)


def ignore_at(box, id=50):
    return Annotation(id, 1, box, 3, is_ignore=True, source="ignore")


def random_scene(rng):
    """Boxes clustered in a small area so every outcome occurs often."""
    gts = [Annotation(i, 1, random_box(rng, 0, 30, 5, 30), int(rng.integers(1, 4)))
           for i in range(int(rng.integers(0, 4)))]
    ignores = [ignore_at(random_box(rng, 0, 30, 5, 30), 100 + i) for i in range(int(rng.integers(0, 3)))]
    # Half the proposals are jittered copies of a scene box to land near the thresholds.
    anchors = [a.box for a in gts + ignores]
    if anchors and rng.random() < 0.5:
        b = anchors[int(rng.integers(len(anchors)))]
        proposal = Box(b.x + rng.normal(0, 2), b.y + rng.normal(0, 2), b.w * rng.uniform(0.7, 1.3),
                       b.h * rng.uniform(0.7, 1.3))
    else:
        proposal = random_box(rng, 0, 30, 5, 30)
    bg = float(rng.choice([0.5, 0.3, 0.4]))
    fg = max(bg, float(rng.choice([0.5, 0.6, 0.7])))
    return proposal, gts, ignores, fg, bg


def outcome(a: RoiAssignment):
    return (a.outcome, a.category)


class TestAssignRoi:
    def test_ignore_screens_first(self):
        proposal = Box(0, 0, 10, 10)
        ign = ignore_at(Box(0, 0, 10, 16.6667))  # IoU 0.6 with the proposal
        gt = Annotation(1, 1, Box(0, 0, 10, 11.1), 2)  # IoU 0.9
        assert assign_roi(proposal, [gt], [ign]).outcome == IGNORED

    def test_positive(self):
        proposal = Box(0, 0, 10, 10)
        gt = Annotation(1, 1, Box(0, 0, 10, 100 / 7), 4)  # IoU 0.7
        a = assign_roi(proposal, [gt], [])
        assert a.outcome == POSITIVE and a.category == 4
        assert a.matched_iou == pytest.approx(0.7)

    def test_negative(self):
        assert assign_roi(Box(50, 50, 5, 5), [GT], [ignore_at(Box(80, 80, 5, 5))]).outcome == NEGATIVE

    def test_empty_scene(self):
        a = assign_roi(Box(0, 0, 5, 5), [], [])
        assert a.outcome == NEGATIVE and a.matched_iou == 0.0

    def test_ignore_exactly_half_does_not_screen(self):
        ign = ignore_at(Box(0, 0, 10, 20))  # IoU exactly 0.5
        assert assign_roi(Box(0, 0, 10, 10), [], [ign]).outcome == NEGATIVE
        assert assign_rpn(Box(0, 0, 10, 10), [], [ign]).outcome == NEGATIVE

    def test_band_between_thresholds_ignored(self):
        gt = Annotation(1, 1, Box(0, 0, 10, 25), 2)  # IoU 0.4
        assert assign_roi(Box(0, 0, 10, 10), [gt], [], fg_iou=0.5, bg_iou=0.3).outcome == IGNORED
        assert assign_roi(Box(0, 0, 10, 10), [gt], [], fg_iou=0.5, bg_iou=0.5).outcome == NEGATIVE

    def test_tie_prefers_first_annotation(self):
        a = Annotation(1, 1, Box(0, 0, 10, 10), 2)
        b = Annotation(2, 1, Box(0, 0, 10, 10), 3)
        assert assign_roi(Box(0, 0, 10, 10), [a, b], []).category == 2

    def test_bad_thresholds(self):
        with pytest.raises(ValidationError):
            assign_roi(Box(0, 0, 1, 1), [], [], fg_iou=0.3, bg_iou=0.5)

    def test_assignment_validates(self):
        with pytest.raises(ValidationError):
            RoiAssignment("maybe", 0.5)
        with pytest.raises(ValidationError):
            RoiAssignment(POSITIVE, 1.5, 2)


class TestAssignRpn:
    def test_ignore_is_foreground(self):
        ign = ignore_at(Box(0, 0, 10, 11))
        assert assign_rpn(Box(0, 0, 10, 10), [], [ign]).outcome == POSITIVE
        assert assign_rpn(Box(0, 0, 10, 10), [], [ign]).category is None
        assert assign_roi(Box(0, 0, 10, 10), [], [ign]).outcome == IGNORED

    @pytest.mark.parametrize("seed", range(300))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        proposal, gts, ignores, fg, bg = random_scene(rng)
        roi = assign_roi(proposal, gts, ignores, fg, bg)
        rpn = assign_rpn(proposal, gts, ignores, fg, bg)
        assert outcome(roi) == oracles.assign_roi(proposal, gts, ignores, fg, bg)
        assert outcome(rpn) == oracles.assign_rpn(proposal, gts, ignores, fg, bg)
        if roi.outcome == IGNORED and any(oracles.iou(proposal, g.box) > 0.5 for g in ignores):
            assert rpn.outcome == POSITIVE

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_agree_without_ignores(self, seed):
        proposal, gts, _, fg, bg = random_scene(np.random.default_rng(seed))
        roi, rpn = assign_roi(proposal, gts, [], fg, bg), assign_rpn(proposal, gts, [], fg, bg)
        assert roi.outcome == rpn.outcome
        assert roi.matched_iou == rpn.matched_iou


class TestEmit:
    def test_all_verified_gives_nothing(self):
        dets = [det(1), det(2)]
        assert emit_ignore_regions(dets, VerificationOutcome(verified=dets)) == []

    def test_sub_threshold_detection_becomes_ignore(self):
        low = det(7, score=0.5)
        out = emit_ignore_regions([low, det(8)], [det(8)])
        assert len(out) == 1
        assert out[0].is_ignore and not out[0].is_pseudo
        assert out[0].box == low.box and out[0].category == low.category

    def test_world_set_difference(self):
        cfg = WorldConfig(n_images=80, n_test_images=0, K=3)
        world = generate_world(cfg, 4)
        sim = simulate_detector(world, cfg.noise({"miss_rate": 0.2, "confusion_offdiag": 0.3}), 4)
        novel = novel_detections(sim.detections, world.split)
        cands = source_candidates(sim.detections, world.split, 0.8)
        outcome_ = verify(cands.candidates, build_knn(world.split, world.true_embeddings, k_for_shots(3)),
                          sim.embeddings)
        ignores = emit_ignore_regions(novel, outcome_)
        verified_keys = {(d.image_id, d.box, d.category) for d in outcome_.verified}
        ignore_keys = {(a.image_id, a.box, a.category) for a in ignores}
        expected = {(d.image_id, d.box, d.category) for d in novel} - verified_keys
        assert ignore_keys == expected
        assert not ignore_keys & verified_keys
        assert len(ignores) + len(outcome_.verified) == len(novel)
        assert any(a.box in {d.box for d in novel if d.score <= 0.8} for a in ignores)


class TestAssemble:
    def scene(self):
        split = simple_split(base=(1,), novel=(2, 3), K=1)
        base = [Annotation(i, 1, Box(0, 0, 5, 5), 1) for i in range(1, 6)]
        # Novel-class annotations in the base table are not given to a few-shot learner.
        hidden = [Annotation(20, 2, Box(1, 1, 5, 5), 2)]
        return make_dataset(2, (1, 2, 3), base + hidden), split

    def test_base_and_shots_only(self):
        ds, split = self.scene()
        out = assemble_retrain_set(ds, split, [], [])
        assert len(out.annotations) == 5 + 2
        assert {a.id for a in out.annotations} == {1, 2, 3, 4, 5, 100, 101}

    def test_counts_and_renumbering(self):
        ds, split = self.scene()
        pseudo = pseudo_annotations([det(1, image_id=2), det(2, image_id=2)])
        ignores = emit_ignore_regions([det(3), det(4), det(5)], [])
        out = assemble_retrain_set(ds, split, pseudo, ignores)
        assert len(out.annotations) == 5 + 1 * 2 + 2 + 3
        ids = [a.id for a in out.annotations]
        assert len(set(ids)) == len(ids)
        assert sum(a.is_pseudo for a in out.annotations) == 2
        assert sum(a.is_ignore for a in out.annotations) == 3

    def test_unknown_image(self):
        ds, split = self.scene()
        with pytest.raises(IntegrityError):
            assemble_retrain_set(ds, split, pseudo_annotations([det(1, image_id=9)]), [])

    def test_roundtrip(self, tmp_path):
        ds, split = self.scene()
        out = assemble_retrain_set(ds, split, pseudo_annotations([det(1)]),
                                   emit_ignore_regions([det(2)], []))
        save_annotations(out, tmp_path / "r.json")
        back = load_dataset(tmp_path / "r.json")
        assert back.annotations == out.annotations
        assert back.images == out.images
