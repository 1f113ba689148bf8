"""Dataset schema, sidecar files, statistics, subsampling, and geometry."""

import json

import numpy as np
import pytest

from ayce.data import (
    DETECTION_SCORE_THRESHOLD,
    FEATURE_WIDTH,
    Corpus,
    Dataset,
    ObjectRecord,
    RawDetection,
    TrackRecord,
    compute_stats,
    corpus_parts,
    filter_detections,
    iou,
    load_dataset,
    load_detections,
    save_dataset,
    save_detections,
    subsample_frames,
    validate_track,
    word_count,
)
from ayce.errors import (
    CaptionCountError,
    EmptyDatasetError,
    FeatureWidthError,
    SchemaError,
)

from conftest import make_dataset, make_track


def _raw_track(track_id="t1", n_frames=3):
    return {
        "id": track_id,
        "frames": list(range(n_frames)),
        "boxes": [[5.0, 6.0, 20.0, 10.0]] * n_frames,
        "nl": ["A red sedan turns left.",
               "Red sedan turning left.",
               "The red car goes left."],
    }


class TestValidateTrack:
    def test_happy_path(self):
        rec = validate_track(_raw_track(), 0)
        assert rec.id == "t1"
        assert rec.n_frames == 3
        assert len(rec.captions) == 3

    def test_two_captions_rejected(self):
        raw = _raw_track()
        raw["nl"] = raw["nl"][:2]
        with pytest.raises(CaptionCountError):
            validate_track(raw, 0)

    def test_four_captions_rejected(self):
        raw = _raw_track()
        raw["nl"] = raw["nl"] + ["extra sentence here."]
        with pytest.raises(CaptionCountError):
            validate_track(raw, 0)

    def test_boxes_frames_length_mismatch(self):
        raw = _raw_track()
        raw["boxes"] = raw["boxes"][:2]
        with pytest.raises(SchemaError):
            validate_track(raw, 0)

    def test_nonpositive_box_size(self):
        raw = _raw_track()
        raw["boxes"][1] = [5.0, 6.0, 0.0, 10.0]
        with pytest.raises(SchemaError):
            validate_track(raw, 0)

    def test_missing_id(self):
        raw = _raw_track()
        del raw["id"]
        with pytest.raises(SchemaError):
            validate_track(raw, 0)

    def test_empty_frames(self):
        raw = _raw_track()
        raw["frames"] = []
        raw["boxes"] = []
        with pytest.raises(SchemaError):
            validate_track(raw, 0)


def test_duplicate_track_ids_rejected():
    a = make_track("same")
    b = make_track("same")
    with pytest.raises(SchemaError):
        Dataset(tracks=[a, b])


def test_dataset_roundtrip(tmp_path, tiny_dataset):
    path = tmp_path / "dataset.json"
    save_dataset(tiny_dataset, path)
    loaded = load_dataset(path)
    assert loaded.n == tiny_dataset.n
    for orig, back in zip(tiny_dataset.tracks, loaded.tracks):
        assert back.id == orig.id
        assert back.frame_refs == orig.frame_refs
        assert back.boxes == orig.boxes
        assert back.captions == orig.captions


def test_dataset_save_is_stable(tmp_path, tiny_dataset):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_dataset(tiny_dataset, p1)
    save_dataset(tiny_dataset, p2)
    assert p1.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# detections


def _objects(n, cls=0):
    return [ObjectRecord(cls=cls, box=(0.1, 0.2, 0.05, 0.04),
                         feat=np.full(FEATURE_WIDTH, 0.5, dtype=np.float32))
            for _ in range(n)]


def test_detections_roundtrip(tmp_path):
    dets = {"t1": {0: _objects(2), 2: _objects(1, cls=3)},
            "t0": {1: _objects(1)}}
    path = tmp_path / "detections.jsonl"
    save_detections(dets, path)
    loaded = load_detections(path)
    assert set(loaded) == {"t0", "t1"}
    assert set(loaded["t1"]) == {0, 2}
    assert loaded["t1"][0][0].cls == 0
    assert loaded["t1"][2][0].cls == 3
    np.testing.assert_array_equal(loaded["t1"][0][0].feat,
                                  dets["t1"][0][0].feat)


def test_load_detections_rejects_wrong_feature_width(tmp_path):
    line = {"track_id": "t1", "frame": 0,
            "objects": [{"cls": 0, "box": [0.1, 0.1, 0.2, 0.2],
                         "feat": [0.0] * 100}]}
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(line) + "\n")
    with pytest.raises(FeatureWidthError):
        load_detections(path)

def test_load_detections_rejects_out_of_range_box(tmp_path):
    line = {"track_id": "t1", "frame": 0,
            "objects": [{"cls": 0, "box": [0.5, 0.5, 1.2, 0.2],
                         "feat": [0.0] * FEATURE_WIDTH}]}
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(line) + "\n")
    with pytest.raises(SchemaError):
        load_detections(path)


class TestFilterDetections:
    def _raw(self, score, cls=0):
        return RawDetection(cls=cls, box=(0.1, 0.1, 0.2, 0.2),
                            feat=np.zeros(FEATURE_WIDTH), score=score)

    def test_threshold_keeps_at_and_above(self):
        records = [self._raw(0.84), self._raw(DETECTION_SCORE_THRESHOLD),
                   self._raw(0.99)]
        kept = filter_detections(records, allowed_classes={0})
        assert len(kept) == 2

    def test_class_filter(self):
        records = [self._raw(0.9, cls=0), self._raw(0.9, cls=7),
                   self._raw(0.9, cls=8)]
        kept = filter_detections(records, allowed_classes=set(range(8)))
        assert [k.cls for k in kept] == [0, 7]

    def test_order_preserved(self):
        records = [self._raw(0.9, cls=c) for c in (3, 1, 2)]
        kept = filter_detections(records, allowed_classes=set(range(8)))
        assert [k.cls for k in kept] == [3, 1, 2]

    def test_survivors_lose_score(self):
        kept = filter_detections([self._raw(0.9)], allowed_classes={0})
        assert not hasattr(kept[0], "score")

    def test_bad_feature_width(self):
        bad = RawDetection(cls=0, box=(0.1, 0.1, 0.2, 0.2),
                           feat=np.zeros(10), score=0.9)
        with pytest.raises(FeatureWidthError):
            filter_detections([bad], allowed_classes={0})


# ---------------------------------------------------------------------------
# statistics


def test_word_count():
    assert word_count("A red sedan turns left.") == 5
    assert word_count("stop") == 1


def test_compute_stats_exact_means():
    tracks = [
        make_track("a", n_frames=1, captions=("one two", "one two three",
                                              "one two three four")),
        make_track("b", n_frames=3, captions=("one two three four five",
                                              "one two three four five six",
                                              "one two three four five six seven")),
    ]
    stats = compute_stats(Dataset(tracks=tracks))
    assert stats.n_tracks == 2
    assert stats.frame_mean == 2.0
    assert stats.frame_min == 1
    assert stats.frame_max == 3
    # word counts 2..7 -> mean 4.5
    assert stats.word_mean == 4.5
    assert stats.word_min == 2
    assert stats.word_max == 7
    assert stats.distinct_types_mean is None


def test_compute_stats_distinct_attributes():
    tracks = [make_track("a"), make_track("b")]
    attrs = {
        # distinct: 2 types (case-insensitive), 1 color, 2 actions (None skipped)
        "a": [{"type": "sedan", "color": "red", "action": "turns left"},
              {"type": "SUV", "color": "RED", "action": None},
              {"type": "Sedan", "color": None, "action": "stops"}],
        # distinct: 1 / 2 / 3
        "b": [{"type": "van", "color": "blue", "action": "stops"},
              {"type": "van", "color": "gray", "action": "turns right"},
              {"type": "VAN", "color": "Blue", "action": "reverses"}],
    }
    stats = compute_stats(Dataset(tracks=tracks), caption_attributes=attrs)
    assert stats.distinct_types_mean == 1.5
    assert stats.distinct_colors_mean == 1.5
    assert stats.distinct_actions_mean == 2.5


def test_compute_stats_empty_dataset():
    with pytest.raises(EmptyDatasetError):
        compute_stats(Dataset(tracks=[]))


# ---------------------------------------------------------------------------
# subsampling


def test_subsample_identity_below_cap():
    assert subsample_frames(5, cap=10) == [0, 1, 2, 3, 4]
    assert subsample_frames(10, cap=10) == list(range(10))


def test_subsample_requires_rng_above_cap():
    with pytest.raises(ValueError):
        subsample_frames(11, cap=10, rng=None)


def test_subsample_properties():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        picked = subsample_frames(200, cap=80, rng=rng)
        assert len(picked) == 80
        assert len(set(picked)) == 80
        assert picked == sorted(picked)
        assert 0 <= picked[0] and picked[-1] < 200


def test_subsample_deterministic_per_seed():
    a = subsample_frames(500, cap=80, rng=np.random.default_rng(7))
    b = subsample_frames(500, cap=80, rng=np.random.default_rng(7))
    assert a == b


# ---------------------------------------------------------------------------
# geometry


def test_iou_identical():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0


def test_iou_disjoint():
    assert iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0


def test_iou_half_overlap():
    # boxes 10x10 shifted by 5 in x: inter 50, union 150
    assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3)


def test_iou_symmetry():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = tuple(rng.uniform(0, 50, 2)) + tuple(rng.uniform(1, 30, 2))
        b = tuple(rng.uniform(0, 50, 2)) + tuple(rng.uniform(1, 30, 2))
        assert iou(a, b) == pytest.approx(iou(b, a), abs=0)
        assert 0.0 <= iou(a, b) <= 1.0


# ---------------------------------------------------------------------------
# corpus plumbing


def test_corpus_parts_on_disk_corpus(tiny_dataset):
    corpus = Corpus(dataset=tiny_dataset, detections={}, crops_root=None,
                    image_size=(320, 240))
    dataset, detections, crops, size = corpus_parts(corpus)
    assert dataset is tiny_dataset
    assert detections == {}
    assert crops is None
    assert size == (320, 240)


def test_corpus_parts_on_generated_corpus(small_corpus):
    dataset, detections, crops, size = corpus_parts(small_corpus)
    assert dataset.n == 8
    assert set(detections) == {t.id for t in dataset.tracks}
    assert set(crops) == {t.id for t in dataset.tracks}
    assert size == tuple(small_corpus.spec.canvas_size)
