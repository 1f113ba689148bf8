"""Shared fixtures: hand-built tracks and small generated corpora."""

import sys

import numpy as np
import pytest

from ayce.data import Dataset, TrackRecord
from ayce.synthetic import SyntheticSpec, generate_synthetic


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the per-check verdict lines collected by the release gate."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance checks")
        for line in lines:
            terminalreporter.write_line(line)

CAPTION_POOL = [
    ("A red sedan turns left.", "Red sedan turning left at the light.",
     "The red car makes a left turn."),
    ("A blue van goes straight.", "Blue van driving straight ahead.",
     "The blue van keeps going straight."),
    ("A white truck stops.", "White truck coming to a stop.",
     "The white truck halts at the corner."),
    ("A black suv speeds up.", "Black suv accelerating quickly.",
     "The black suv picks up speed."),
    ("A green coupe slows down.", "Green coupe braking gently.",
     "The green coupe reduces its speed."),
    ("A gray bus pulls over.", "Gray bus moving to the curb.",
     "The gray bus stops at the roadside."),
]


def make_track(track_id, n_frames=4, captions=None, box=(10.0, 20.0, 40.0, 30.0)):
    """A minimal valid track with constant boxes and three captions."""
    if captions is None:
        captions = CAPTION_POOL[sum(track_id.encode()) % len(CAPTION_POOL)]
    return TrackRecord(
        id=track_id,
        frame_refs=tuple(range(n_frames)),
        boxes=tuple(tuple(box) for _ in range(n_frames)),
        captions=tuple(captions),
    )


def make_dataset(n_tracks=4, n_frames=4):
    tracks = [
        make_track(f"t{i:03d}", n_frames=n_frames,
                   captions=CAPTION_POOL[i % len(CAPTION_POOL)])
        for i in range(n_tracks)
    ]
    return Dataset(tracks=tracks)


@pytest.fixture
def tiny_dataset():
    return make_dataset(n_tracks=4)


@pytest.fixture(scope="session")
def small_corpus():
    """8 generated tracks with detections and crops, in memory."""
    spec = SyntheticSpec(
        n_tracks=8,
        frame_len={"kind": "uniform", "low": 3, "high": 6},
        crop_size=(24, 20),
        distractors={"kind": "uniform", "low": 1, "high": 2},
    ).validate()
    return generate_synthetic(spec, seed=1234)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(99)
