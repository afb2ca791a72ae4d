import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molarscan.boxes import BBox
from molarscan.detection import (
    Angulation,
    Detection,
    Quadrant,
    composite_class,
    composite_index,
    decode,
    dedupe_per_quadrant,
    iou,
    nms,
)
from molarscan.errors import InputError, VocabularyError
from molarscan.imaging import LetterboxTransform

from oracles import pixel_iou

boxes = st.builds(
    lambda x, y, w, h: BBox(x, y, x + w, y + h),
    st.integers(0, 40), st.integers(0, 40), st.integers(1, 30), st.integers(1, 30),
)


def det(box, q=Quadrant.UR, a=Angulation.VERTICAL, conf=0.5):
    return Detection(BBox(*box), q, a, conf)


def raw_column(cx, cy, w, h, cls, score):
    raw = np.zeros((20, 1))
    raw[:4, 0] = cx, cy, w, h
    raw[4 + cls, 0] = score
    return raw


class TestCompositeClass:
    @pytest.mark.parametrize(
        "idx, expected",
        [
            (0, (Quadrant.UR, Angulation.VERTICAL)),
            (6, (Quadrant.UL, Angulation.HORIZONTAL)),
            (15, (Quadrant.LR, Angulation.DISTOANGULAR)),
        ],
    )
    def test_ordering(self, idx, expected):
        assert composite_class(idx) == expected

    def test_round_trip(self):
        assert [composite_index(*composite_class(i)) for i in range(16)] == list(range(16))

    def test_out_of_range(self):
        with pytest.raises(InputError):
            composite_class(16)

    def test_vocabulary(self):
        assert Angulation.parse("Mesioangular") is Angulation.MESIOANGULAR
        assert Quadrant.parse("ll") is Quadrant.LL
        with pytest.raises(VocabularyError, match="buccoangular"):
            Angulation.parse("buccoangular")


class TestIou:
    def test_identical(self):
        assert iou(BBox(0, 0, 3, 4), BBox(0, 0, 3, 4)) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)) == 0.0

    def test_half_overlap(self):
        assert iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)
        assert pixel_iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(a=boxes, b=boxes)
    def test_matches_pixel_count(self, a, b):
        assert iou(a, b) == pytest.approx(pixel_iou(a.to_list(), b.to_list()), abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(a=boxes, b=boxes)
    def test_symmetric_and_bounded(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0
        assert iou(a, a) == 1.0


class TestDecode:
    def test_empty(self):
        assert decode(np.zeros((20, 0)), 0.25, LetterboxTransform.identity(832)) == []

    def test_single_column(self):
        (d,) = decode(raw_column(100, 100, 50, 40, 3, 0.9), 0.25, LetterboxTransform.identity(832))
        assert d.box == BBox(75, 80, 125, 120)
        assert (d.quadrant, d.angulation) == (Quadrant.UR, Angulation.DISTOANGULAR)
        assert d.confidence == 0.9

    def test_threshold(self):
        assert decode(raw_column(100, 100, 50, 40, 3, 0.9), 0.95) == []
        assert len(decode(raw_column(100, 100, 50, 40, 3, 0.9), 0.9)) == 1

    def test_maps_through_letterbox(self):
        t = LetterboxTransform(0.5, 0, 208, 1664, 832, 832)
        (d,) = decode(raw_column(416, 416, 832, 416, 0, 0.8), 0.25, t)
        assert d.box == BBox(0, 0, 1664, 832)

    def test_batch_axis_accepted(self):
        assert len(decode(raw_column(100, 100, 50, 40, 3, 0.9)[None], 0.25)) == 1

    def test_malformed(self):
        with pytest.raises(InputError):
            decode(np.zeros((19, 3)), 0.25)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), t1=st.floats(0, 1), t2=st.floats(0, 1))
    def test_monotone_in_threshold(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        raw = np.vstack([rng.uniform(50, 700, (2, 30)), rng.uniform(5, 80, (2, 30)), rng.random((16, 30))])
        lo, hi = sorted((t1, t2))
        assert len(decode(raw, hi)) <= len(decode(raw, lo))


def random_dets(rng, n):
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, 60, 2)
        w, h = rng.uniform(5, 30, 2)
        q, a = composite_class(int(rng.integers(0, 3)))
        out.append(Detection(BBox(x, y, x + w, y + h), q, a, float(np.round(rng.random(), 2))))
    return out


class TestNms:
    def test_single(self):
        d = det((0, 0, 10, 10))
        assert nms([d]) == [d]

    def test_duplicate_suppressed(self):
        a, b = det((0, 0, 10, 10), conf=0.9), det((0, 0, 10, 10), conf=0.8)
        assert nms([b, a], 0.45) == [a]

    def test_class_aware(self):
        a = det((0, 0, 10, 10), q=Quadrant.UR, conf=0.9)
        b = det((0, 0, 10, 10), q=Quadrant.UL, conf=0.8)
        assert nms([a, b], 0.45) == [a, b]

    def test_tie_prefers_smaller_box(self):
        big, small = det((0, 0, 10, 10), conf=0.7), det((0, 0, 9, 9), conf=0.7)
        assert nms([big, small], 0.45) == [small]

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 100_000), n=st.integers(0, 25), thr=st.floats(0.05, 0.95))
    def test_properties(self, seed, n, thr):
        dets = random_dets(np.random.default_rng(seed), n)
        kept = nms(dets, thr)
        assert all(any(k is d for d in dets) for k in kept)
        confs = [k.confidence for k in kept]
        assert confs == sorted(confs, reverse=True)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert a.class_index != b.class_index or iou(a.box, b.box) < thr
        assert nms(kept, thr) == kept


class TestDedupe:
    def test_distinct_quadrants(self):
        dets = [det((0, 0, 1, 1), q=q) for q in Quadrant]
        assert dedupe_per_quadrant(dets) == dets

    def test_max_rule(self):
        low, high = det((0, 0, 1, 1), conf=0.7), det((2, 2, 3, 3), conf=0.9)
        assert dedupe_per_quadrant([low, high]) == [high]

    def test_tie_keeps_first(self):
        a, b = det((0, 0, 1, 1), conf=0.8), det((2, 2, 3, 3), conf=0.8)
        assert dedupe_per_quadrant([a, b]) == [a]

    def test_empty(self):
        assert dedupe_per_quadrant([]) == []

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 100_000), n=st.integers(0, 30))
    def test_at_most_four(self, seed, n):
        rng = np.random.default_rng(seed)
        dets = [
            Detection(BBox(0, 0, 1, 1), *composite_class(int(rng.integers(0, 16))), float(rng.random()))
            for _ in range(n)
        ]
        assert len(dedupe_per_quadrant(dets)) <= 4


def test_detection_json_round_trip():
    d = det((1, 2, 3, 4), q=Quadrant.LL, a=Angulation.MESIOANGULAR, conf=0.91)
    data = d.to_json()
    assert data == {"box": [1, 2, 3, 4], "quadrant": "LL", "angulation": "mesioangular", "confidence": 0.91}
    assert Detection.from_json(data) == d
