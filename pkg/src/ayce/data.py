"""Dataset schema, loading/validation, detection sidecar ingestion, statistics.

The on-disk layout of a corpus directory is:

    dataset.json          tracks with frames, pixel boxes, 3 captions each
    detections.jsonl      per (track, frame) detected objects, already filtered
    crops/<id>/<i>.png    tracked-vehicle crop per frame index
    caption_attributes.json   optional: per-caption attribute labels

dataset.json schema::

    { "tracks": [ { "id": str,
                    "frames": [str|int, ...],
                    "boxes": [[x, y, w, h], ...],          # pixels
                    "nl": [s1, s2, s3],
                    "attributes": {"color": str, "type": str, "action": str}?
                  } ] }

detections.jsonl holds one JSON object per line::

    { "track_id": str, "frame": int,
      "objects": [ {"cls": number, "box": [4 floats in [0,1]], "feat": [256 floats]} ] }

where "frame" is the integer index into the track's frame list.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CaptionCountError,
    EmptyDatasetError,
    FeatureWidthError,
    SchemaError,
)

FEATURE_WIDTH = 256
# one class index + four box coordinates + the appearance feature
OBJECT_RECORD_WIDTH = 1 + 4 + FEATURE_WIDTH

DETECTION_SCORE_THRESHOLD = 0.85
FRAME_CAP = 80
DEFAULT_IMAGE_SIZE = (640, 480)


@dataclass(frozen=True)
class TrackAttributes:
    color: str
    vehicle_type: str
    action: str


@dataclass(frozen=True)
class TrackRecord:
    """One single-vehicle tracking sequence with its three captions."""

    id: str
    frame_refs: tuple
    boxes: tuple  # of (x, y, w, h) pixel tuples, one per frame
    captions: tuple  # exactly 3 strings
    attributes: TrackAttributes | None = None

    @property
    def n_frames(self):
        return len(self.frame_refs)


@dataclass(eq=False)
class ObjectRecord:
    """A detected object: class index, normalized box, 256-d appearance feature.

    A reserved sentinel class index marks the tracked vehicle itself; for that
    record the feature slot is all zeros at ingestion time and is filled from
    crop pixels later.
    """

    cls: int
    box: tuple  # (x, y, w, h), all in [0, 1]
    feat: np.ndarray

    def flattened(self):
        """The 261-wide numeric row: [cls, x, y, w, h, feat...]."""
        out = np.empty(OBJECT_RECORD_WIDTH, dtype=np.float64)
        out[0] = float(self.cls)
        out[1:5] = self.box
        out[5:] = self.feat
        return out


@dataclass(eq=False)
class RawDetection:
    """Detector output before confidence filtering."""

    cls: int
    box: tuple
    feat: np.ndarray
    score: float


@dataclass
class Dataset:
    tracks: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for t in self.tracks:
            if t.id in seen:
                raise SchemaError("duplicate track id", track_id=t.id, field="id")
            seen.add(t.id)

    @property
    def n(self):
        return len(self.tracks)

    def track_by_id(self, track_id):
        for t in self.tracks:
            if t.id == track_id:
                return t
        raise KeyError(track_id)


@dataclass
class DatasetStats:
    n_tracks: int
    frame_mean: float
    frame_min: int
    frame_max: int
    word_mean: float
    word_min: int
    word_max: int
    distinct_types_mean: float | None = None
    distinct_colors_mean: float | None = None
    distinct_actions_mean: float | None = None

    def to_dict(self):
        out = {
            "n_tracks": self.n_tracks,
            "frames": {"mean": self.frame_mean, "min": self.frame_min, "max": self.frame_max},
            "words": {"mean": self.word_mean, "min": self.word_min, "max": self.word_max},
        }
        if self.distinct_types_mean is not None:
            out["distinct_attributes"] = {
                "types": self.distinct_types_mean,
                "colors": self.distinct_colors_mean,
                "actions": self.distinct_actions_mean,
            }
        return out


@dataclass
class Corpus:
    """A dataset plus the sidecar pieces the visual branch consumes."""

    dataset: Dataset
    detections: dict  # track_id -> {frame index -> [ObjectRecord]}
    crops_root: Path | None = None
    image_size: tuple = DEFAULT_IMAGE_SIZE


def corpus_parts(corpus):
    """Unpack any corpus-shaped object to (dataset, detections, crops, size).

    Accepts both the on-disk Corpus (crops under crops_root) and in-memory
    corpora that carry crop arrays and a generation spec directly.
    """
    crops = getattr(corpus, "crops_root", None)
    if crops is None:
        crops = getattr(corpus, "crops", None)
    image_size = getattr(corpus, "image_size", None)
    if image_size is None:
        gen_spec = getattr(corpus, "spec", None)
        if gen_spec is not None:
            image_size = gen_spec.canvas_size
        else:
            image_size = DEFAULT_IMAGE_SIZE
    return corpus.dataset, corpus.detections, crops, tuple(image_size)


# ---------------------------------------------------------------------------
# validation helpers


def _expect(cond, message, track_id=None, field_name=None):
    if not cond:
        raise SchemaError(message, track_id=track_id, field=field_name)


def validate_track(obj, index):
    """Check one raw dataset.json track entry and build a TrackRecord."""
    if not isinstance(obj, dict):
        raise SchemaError(f"track entry {index} is not an object")
    track_id = obj.get("id")
    _expect(isinstance(track_id, str) and track_id, "id must be a non-empty string",
            track_id=track_id if isinstance(track_id, str) else f"<entry {index}>",
            field_name="id")
    frames = obj.get("frames")
    boxes = obj.get("boxes")
    nl = obj.get("nl")
    _expect(isinstance(frames, list) and len(frames) >= 1,
            "frames must be a non-empty list", track_id=track_id, field_name="frames")
    _expect(isinstance(boxes, list) and len(boxes) == len(frames),
            "boxes must match frames in length", track_id=track_id, field_name="boxes")
    if not isinstance(nl, list) or len(nl) != 3:
        raise CaptionCountError(
            f"expected exactly 3 captions, got {len(nl) if isinstance(nl, list) else type(nl).__name__}",
            track_id=track_id, field="nl")
    for j, s in enumerate(nl):
        _expect(isinstance(s, str) and s.strip(),
                f"caption {j} must be a non-empty string", track_id=track_id, field_name="nl")
    clean_boxes = []
    for j, b in enumerate(boxes):
        _expect(isinstance(b, (list, tuple)) and len(b) == 4,
                f"box {j} must have 4 numbers", track_id=track_id, field_name="boxes")
        x, y, w, h = (float(v) for v in b)
        _expect(w > 0 and h > 0, f"box {j} must have positive width and height",
                track_id=track_id, field_name="boxes")
        clean_boxes.append((x, y, w, h))
    attributes = None
    raw_attrs = obj.get("attributes")
    if raw_attrs is not None:
        _expect(isinstance(raw_attrs, dict), "attributes must be an object",
                track_id=track_id, field_name="attributes")
        for key in ("color", "type", "action"):
            _expect(isinstance(raw_attrs.get(key), str),
                    f"attributes.{key} must be a string", track_id=track_id,
                    field_name="attributes")
        attributes = TrackAttributes(
            color=raw_attrs["color"],
            vehicle_type=raw_attrs["type"],
            action=raw_attrs["action"],
        )
    return TrackRecord(
        id=track_id,
        frame_refs=tuple(frames),
        boxes=tuple(clean_boxes),
        captions=tuple(nl),
        attributes=attributes,
    )


# ---------------------------------------------------------------------------
# dataset I/O


def load_dataset(path):
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or not isinstance(raw.get("tracks"), list):
        raise SchemaError(f"{path}: top level must be an object with a 'tracks' list")
    tracks = [validate_track(entry, i) for i, entry in enumerate(raw["tracks"])]
    return Dataset(tracks=tracks)


def save_dataset(dataset, path):
    """Write dataset.json. Key order and formatting are fixed so identical
    datasets serialize to identical bytes."""
    entries = []
    for t in dataset.tracks:
        entry = {
            "id": t.id,
            "frames": list(t.frame_refs),
            "boxes": [list(b) for b in t.boxes],
            "nl": list(t.captions),
        }
        if t.attributes is not None:
            entry["attributes"] = {
                "color": t.attributes.color,
                "type": t.attributes.vehicle_type,
                "action": t.attributes.action,
            }
        entries.append(entry)
    payload = json.dumps({"tracks": entries}, indent=2, sort_keys=True)
    _atomic_write_text(path, payload + "\n")


def _atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# detection sidecar


def load_detections(path):
    """Read detections.jsonl into {track_id: {frame index: [ObjectRecord]}}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            track_id = rec.get("track_id")
            frame = rec.get("frame")
            if not isinstance(track_id, str) or not isinstance(frame, int):
                raise SchemaError(f"line {line_no}: needs string track_id and int frame")
            objects = []
            for obj in rec.get("objects", ()):
                feat = np.asarray(obj["feat"], dtype=np.float32)
                if feat.shape != (FEATURE_WIDTH,):
                    raise FeatureWidthError(
                        f"track {track_id} frame {frame}: feature width "
                        f"{feat.shape} != ({FEATURE_WIDTH},)")
                box = tuple(float(v) for v in obj["box"])
                if len(box) != 4 or any(v < 0 or v > 1 for v in box):
                    raise SchemaError("detection box must be 4 numbers in [0,1]",
                                      track_id=track_id, field="objects.box")
                objects.append(ObjectRecord(cls=int(obj["cls"]), box=box, feat=feat))
            out.setdefault(track_id, {})[frame] = objects
    return out


def save_detections(detections, path):
    lines = []
    for track_id in sorted(detections):
        frames = detections[track_id]
        for frame in sorted(frames):
            objects = [
                {
                    "cls": int(o.cls),
                    "box": [float(v) for v in o.box],
                    "feat": [float(v) for v in o.feat],
                }
                for o in frames[frame]
            ]
            lines.append(json.dumps(
                {"track_id": track_id, "frame": frame, "objects": objects},
                sort_keys=True))
    _atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def filter_detections(records, allowed_classes, threshold=DETECTION_SCORE_THRESHOLD):
    """Keep raw detections with score >= threshold and an allowed class.

    Order is preserved. Scores are dropped from the survivors.
    """
    kept = []
    for det in records:
        feat = np.asarray(det.feat)
        if feat.shape != (FEATURE_WIDTH,):
            raise FeatureWidthError(
                f"feature width {feat.shape} != ({FEATURE_WIDTH},)")
        if det.score >= threshold and det.cls in allowed_classes:
            kept.append(ObjectRecord(cls=det.cls, box=tuple(det.box),
                                     feat=feat.astype(np.float32)))
    return kept


# ---------------------------------------------------------------------------
# statistics


def word_count(caption):
    return len(caption.split())


def compute_stats(dataset, caption_attributes=None):
    """Corpus statistics: frame counts, caption word counts, and (when a
    per-caption attribute mapping is supplied) mean distinct attributes per
    caption triplet.

    caption_attributes maps track id -> list of 3 dicts with keys
    "color"/"type"/"action", values strings or None (None = the caption does
    not mention that attribute). Distinctness is counted case-insensitively
    over the present values.
    """
    if dataset.n == 0:
        raise EmptyDatasetError("compute_stats needs at least one track")
    frame_counts = [t.n_frames for t in dataset.tracks]
    words = [word_count(c) for t in dataset.tracks for c in t.captions]
    stats = DatasetStats(
        n_tracks=dataset.n,
        frame_mean=sum(frame_counts) / len(frame_counts),
        frame_min=min(frame_counts),
        frame_max=max(frame_counts),
        word_mean=sum(words) / len(words),
        word_min=min(words),
        word_max=max(words),
    )
    if caption_attributes:
        per_slot = {"type": [], "color": [], "action": []}
        for t in dataset.tracks:
            entries = caption_attributes.get(t.id)
            if entries is None:
                continue
            if len(entries) != 3:
                raise SchemaError("caption attributes must list 3 entries",
                                  track_id=t.id, field="caption_attributes")
            for slot in per_slot:
                values = {e[slot].lower() for e in entries if e.get(slot)}
                per_slot[slot].append(len(values))
        if per_slot["type"]:
            stats.distinct_types_mean = sum(per_slot["type"]) / len(per_slot["type"])
            stats.distinct_colors_mean = sum(per_slot["color"]) / len(per_slot["color"])
            stats.distinct_actions_mean = sum(per_slot["action"]) / len(per_slot["action"])
    return stats


# ---------------------------------------------------------------------------
# frame subsampling


def subsample_frames(n_frames, cap=FRAME_CAP, rng=None):
    """Uniform without-replacement frame selection, sorted ascending.

    Tracks at or under the cap keep every frame. rng is only consulted on the
    subsampling branch.
    """
    if n_frames <= cap:
        return list(range(n_frames))
    if rng is None:
        raise ValueError("rng required when n_frames exceeds the cap")
    picked = rng.choice(n_frames, size=cap, replace=False)
    picked.sort()
    return [int(i) for i in picked]


# ---------------------------------------------------------------------------
# geometry


def iou(box_a, box_b):
    """Intersection over union of two (x, y, w, h) boxes (any consistent unit)."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    ix = max(ax, bx)
    iy = max(ay, by)
    ix2 = min(ax + aw, bx + bw)
    iy2 = min(ay + ah, by + bh)
    iw = max(0.0, ix2 - ix)
    ih = max(0.0, iy2 - iy)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# corpus loading


def load_corpus(data_dir, image_size=None):
    """Load dataset.json + detections.jsonl + crops/ from one directory.

    The source image size comes from (in order): the image_size argument, the
    canvas_size recorded in a generator spec sidecar, or the default.
    """
    data_dir = Path(data_dir)
    dataset = load_dataset(data_dir / "dataset.json")
    det_path = data_dir / "detections.jsonl"
    detections = load_detections(det_path) if det_path.exists() else {}
    crops_root = data_dir / "crops"
    if not crops_root.is_dir():
        crops_root = None
    meta_size = image_size
    if meta_size is None:
        spec_path = data_dir / "gen_spec.json"
        if spec_path.exists():
            with open(spec_path, "r", encoding="utf-8") as fh:
                meta_size = json.load(fh).get("canvas_size")
    if meta_size is None:
        meta_size = DEFAULT_IMAGE_SIZE
    return Corpus(dataset=dataset, detections=detections,
                  crops_root=crops_root, image_size=tuple(meta_size))


def load_caption_attributes(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: top level must map track id -> 3 entries")
    return raw


def save_caption_attributes(mapping, path):
    _atomic_write_text(path, json.dumps(mapping, indent=2, sort_keys=True) + "\n")
