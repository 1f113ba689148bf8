"""Deterministic synthetic corpus generator.

Each generated track is one vehicle moving across a fixed canvas along an
action-specific trajectory. Its three captions are rendered from attribute
labels (color, vehicle type, action) through templates; controlled
inconsistency probabilities let a caption swap an attribute for a wrong value
or omit it, which is what makes caption triplets disagree the way real
annotators do. Crops procedurally encode the attributes in pixels: glyph
silhouette = type, fill = color, rotation over time + background scroll =
trajectory; the bounding boxes carry the trajectory as well.

All randomness flows through per-track child generators seeded as
(seed, track index, component), so the dataset/caption part of a corpus is
bit-identical whether or not detections and crops are materialized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import data as D
from .errors import SyntheticSpecError

CANVAS_SIZE = D.DEFAULT_IMAGE_SIZE  # (width, height) pixels

COLORS = {
    "black": (32, 32, 36),
    "white": (236, 236, 232),
    "red": (196, 38, 38),
    "blue": (42, 70, 196),
    "gray": (128, 128, 132),
    "green": (40, 156, 64),
    "brown": (126, 88, 48),
    "yellow": (222, 198, 44),
}

VEHICLE_TYPES = (
    "sedan", "suv", "pickup", "van", "hatchback", "coupe", "bus", "truck",
)

ACTIONS = (
    "turns left",
    "turns right",
    "goes straight",
    "stops",
    "speeds up",
    "slows down",
    "makes a u-turn",
    "changes lane",
    "merges into traffic",
    "pulls over",
    "waits at the intersection",
    "reverses",
)

# detector classes 0..7 are ordinary objects; the tracked vehicle gets the
# reserved index one past the largest allowed class
ALLOWED_CLASSES = frozenset(range(8))
SENTINEL_CLASS = 8

# caption templates keyed by which attribute slots the caption mentions
TEMPLATES = {
    ("action", "color", "type"): (
        "A {color} {type} {action}.",
        "The {color} {type} {action}.",
        "A {color} {type} {action} near the intersection.",
        "A {color} colored {type} {action} on the road.",
        "There is a {color} {type} that {action}.",
        "{color} {type} {action}.",
    ),
    ("color", "type"): (
        "A {color} {type} drives through the scene.",
        "A {color} {type} travels along the road.",
        "The {color} {type} moves with the traffic.",
    ),
    ("action", "type"): (
        "A {type} {action}.",
        "The {type} {action} on the road.",
    ),
    ("action", "color"): (
        "A {color} vehicle {action}.",
        "The {color} car {action}.",
    ),
    ("type",): (
        "A {type} drives down the road.",
        "The {type} moves through the scene.",
    ),
    ("color",): (
        "A {color} vehicle moves along the road.",
    ),
    ("action",): (
        "A vehicle {action}.",
        "The car {action} in the video.",
    ),
    (): (
        "A vehicle drives through the scene.",
    ),
}

# swap/drop probabilities solved so the expected per-triplet distinct counts
# match the corpus statistics being imitated (2.07 types, 1.85 colors,
# 2.63 actions; misses 0.76% / 4.68% / 1.53%)
CALIBRATED_SWAP = {"type": 0.405383, "color": 0.327894, "action": 0.737227}
CALIBRATED_DROP = {"type": 0.0076, "color": 0.0468, "action": 0.0153}

_TYPE_SIZES = {
    # base pixel (width, height) of the tracked box per vehicle type
    "sedan": (72, 34),
    "suv": (68, 44),
    "pickup": (78, 38),
    "van": (64, 48),
    "hatchback": (58, 34),
    "coupe": (66, 28),
    "bus": (110, 46),
    "truck": (104, 50),
}


@dataclass
class SyntheticSpec:
    """Knobs of the generator; see the module docstring for semantics."""

    n_tracks: int = 32
    frame_len: dict = dc_field(default_factory=lambda: {"kind": "uniform", "low": 4, "high": 10})
    swap_prob: dict = dc_field(default_factory=lambda: {"type": 0.0, "color": 0.0, "action": 0.0})
    drop_prob: dict = dc_field(default_factory=lambda: {"type": 0.0, "color": 0.0, "action": 0.0})
    crop_size: tuple = (48, 40)  # (width, height) of written crop images
    distractors: dict = dc_field(default_factory=lambda: {"kind": "uniform", "low": 1, "high": 3})
    canvas_size: tuple = CANVAS_SIZE

    def validate(self):
        if self.n_tracks < 1:
            raise SyntheticSpecError("n_tracks must be >= 1")
        for mapping, label in ((self.swap_prob, "swap_prob"), (self.drop_prob, "drop_prob")):
            for slot in ("type", "color", "action"):
                p = mapping.get(slot, 0.0)
                if not 0.0 <= p <= 1.0:
                    raise SyntheticSpecError(f"{label}[{slot}]={p} outside [0,1]")
        for dist, label in ((self.frame_len, "frame_len"), (self.distractors, "distractors")):
            kind = dist.get("kind")
            if kind == "uniform":
                if not (isinstance(dist.get("low"), int) and isinstance(dist.get("high"), int)):
                    raise SyntheticSpecError(f"{label}: uniform needs integer low/high")
                if dist["low"] > dist["high"] or dist["low"] < 0:
                    raise SyntheticSpecError(f"{label}: bad uniform range")
            elif kind == "lognormal":
                if not dist.get("sigma", 0) > 0:
                    raise SyntheticSpecError(f"{label}: lognormal needs sigma > 0")
                if dist.get("max", 1) < 1:
                    raise SyntheticSpecError(f"{label}: lognormal max must be >= 1")
            else:
                raise SyntheticSpecError(f"{label}: unknown distribution kind {kind!r}")
        if self.frame_len["kind"] == "uniform" and self.frame_len["low"] < 1:
            raise SyntheticSpecError("frame_len low must be >= 1")
        w, h = self.crop_size
        cw, ch = self.canvas_size
        if w < 8 or h < 8 or cw < 64 or ch < 64:
            raise SyntheticSpecError("crop/canvas sizes too small")
        return self

    def to_dict(self):
        return {
            "n_tracks": self.n_tracks,
            "frame_len": dict(self.frame_len),
            "swap_prob": dict(self.swap_prob),
            "drop_prob": dict(self.drop_prob),
            "crop_size": list(self.crop_size),
            "distractors": dict(self.distractors),
            "canvas_size": list(self.canvas_size),
        }

    @classmethod
    def from_dict(cls, raw):
        kwargs = {}
        for key in ("n_tracks", "frame_len", "swap_prob", "drop_prob", "distractors"):
            if key in raw:
                kwargs[key] = raw[key]
        for key in ("crop_size", "canvas_size"):
            if key in raw:
                kwargs[key] = tuple(raw[key])
        return cls(**kwargs).validate()


def calibrated_stats_spec(n_tracks=1000):
    """Spec calibrated to the corpus statistics being imitated: lognormal
    frame lengths with mean ~81 clipped to [1, 3620], and the solved
    swap/drop probabilities."""
    return SyntheticSpec(
        n_tracks=n_tracks,
        frame_len={"kind": "lognormal", "mean": 3.7894, "sigma": 1.1, "max": 3620},
        swap_prob=dict(CALIBRATED_SWAP),
        drop_prob=dict(CALIBRATED_DROP),
        crop_size=(110, 90),
        distractors={"kind": "uniform", "low": 0, "high": 4},
    ).validate()


@dataclass
class SyntheticCorpus:
    dataset: D.Dataset
    detections: dict  # track id -> {frame index -> [ObjectRecord]}
    crops: dict  # track id -> uint8 array (n_frames, crop_h, crop_w, 3)
    caption_attributes: dict  # track id -> [3 dicts of slot -> value|None]
    spec: SyntheticSpec


# ---------------------------------------------------------------------------
# low-level pieces


def _draw_count(dist, rng):
    if dist["kind"] == "uniform":
        return int(rng.integers(dist["low"], dist["high"] + 1))
    # lognormal
    x = rng.lognormal(mean=dist["mean"], sigma=dist["sigma"])
    return int(np.clip(round(x), 1, dist["max"]))


def _speed_profile(action, u):
    """Per-segment speed multiplier along the normalized path position u."""
    if action == "stops":
        return np.clip(1.0 - 2.2 * u, 0.0, None)
    if action == "speeds up":
        return 0.4 + 1.8 * u
    if action == "slows down":
        return 1.2 - 0.9 * u
    if action == "pulls over":
        return np.clip(1.0 - 1.4 * u, 0.05, None)
    if action == "waits at the intersection":
        return np.full_like(u, 0.02)
    return np.ones_like(u)


def _turn_profile(action, u):
    """Heading offset (radians) along the path."""
    ramp = np.clip((u - 0.25) / 0.5, 0.0, 1.0)
    if action == "turns left":
        return -0.5 * np.pi * ramp
    if action == "turns right":
        return 0.5 * np.pi * ramp
    if action == "makes a u-turn":
        return np.pi * ramp
    if action == "changes lane":
        bump = np.exp(-((u - 0.5) ** 2) / 0.02)
        return 0.45 * bump
    if action == "merges into traffic":
        return 0.35 * np.clip(1.0 - u * 1.5, 0.0, 1.0)
    if action == "pulls over":
        return 0.3 * ramp
    return np.zeros_like(u)


def _trajectory(action, n_frames, box_size, canvas, rng):
    """Center positions (n,2) in pixels and headings (n,) for one track."""
    phi0 = rng.uniform(0.0, 2.0 * np.pi)
    if n_frames == 1:
        cw, ch = canvas
        margin_x = box_size[0] / 2 + 2
        margin_y = box_size[1] / 2 + 2
        x = rng.uniform(margin_x, cw - margin_x)
        y = rng.uniform(margin_y, ch - margin_y)
        return np.array([[x, y]]), np.array([phi0])
    u = np.linspace(0.0, 1.0, n_frames - 1)
    speeds = _speed_profile(action, u)
    headings_seg = phi0 + _turn_profile(action, u)
    if action == "reverses":
        speeds = -speeds
    steps = np.stack([speeds * np.cos(headings_seg), speeds * np.sin(headings_seg)], axis=1)
    raw = np.vstack([np.zeros((1, 2)), np.cumsum(steps, axis=0)])
    headings = np.concatenate([headings_seg[:1], headings_seg])
    cw, ch = canvas
    margin_x = box_size[0] / 2 + 2
    margin_y = box_size[1] / 2 + 2
    avail_w = cw - 2 * margin_x
    avail_h = ch - 2 * margin_y
    extent = raw.max(axis=0) - raw.min(axis=0)
    # scale the unit-speed path into the canvas; near-stationary paths get a
    # fixed pixels-per-unit scale instead of exploding
    scale = 8.0
    if extent[0] > 1e-9:
        scale = min(scale, avail_w / extent[0])
    if extent[1] > 1e-9:
        scale = min(scale, avail_h / extent[1])
    scaled = raw * scale
    span = scaled.max(axis=0) - scaled.min(axis=0)
    # rounding can push span past avail by an ulp; the +2px margin absorbs it
    x0 = rng.uniform(margin_x, max(margin_x, cw - margin_x - span[0])) - scaled[:, 0].min()
    y0 = rng.uniform(margin_y, max(margin_y, ch - margin_y - span[1])) - scaled[:, 1].min()
    positions = scaled + np.array([x0, y0])
    return positions, headings


# glyph membership tests on canonical coordinates (x right, y down, |x|,|y|<=1)


def _glyph_mask(vehicle_type, xx, yy):
    if vehicle_type == "sedan":
        return (np.abs(xx) <= 0.78) & (np.abs(yy) <= 0.30) | \
               (np.abs(xx) <= 0.36) & (np.abs(yy) <= 0.55)
    if vehicle_type == "suv":
        return (np.abs(xx) <= 0.68) & (np.abs(yy) <= 0.52)
    if vehicle_type == "pickup":
        body = (np.abs(xx) <= 0.78) & (np.abs(yy) <= 0.28)
        cab = (xx >= -0.78) & (xx <= -0.2) & (np.abs(yy) <= 0.56)
        return body | cab
    if vehicle_type == "van":
        return (np.abs(xx / 0.7) ** 4 + np.abs(yy / 0.52) ** 4) <= 1.0
    if vehicle_type == "hatchback":
        wedge = 0.55 - 0.35 * (xx + 0.75) / 1.5
        return (np.abs(xx) <= 0.75) & (np.abs(yy) <= wedge)
    if vehicle_type == "coupe":
        return ((xx / 0.8) ** 2 + (yy / 0.34) ** 2) <= 1.0
    if vehicle_type == "bus":
        body = (np.abs(xx) <= 0.85) & (np.abs(yy) <= 0.42)
        stripe = (np.abs(xx) <= 0.72) & (yy >= -0.3) & (yy <= -0.12)
        return body & ~stripe
    if vehicle_type == "truck":
        cab = (xx >= -0.88) & (xx <= -0.44) & (np.abs(yy) <= 0.5)
        trailer = (xx >= -0.32) & (xx <= 0.88) & (np.abs(yy) <= 0.4)
        return cab | trailer
    raise SyntheticSpecError(f"unknown vehicle type {vehicle_type!r}")


def _render_crop(vehicle_type, rgb, heading, position, crop_size, bg_params):
    """One crop: rotated colored glyph over a scrolling smooth background."""
    w, h = crop_size
    a1, a2, f1, f2, p1, p2, base = bg_params
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = position
    bg = base + a1 * np.sin(f1 * (yy + py) + p1) + a2 * np.cos(f2 * (xx + px) + p2)
    img = np.repeat(bg[:, :, None], 3, axis=2)
    # canonical coords, rotated by -heading so the glyph points along it
    cx = (xx - (w - 1) / 2) / (w * 0.5)
    cy = (yy - (h - 1) / 2) / (h * 0.5)
    cos_t = np.cos(-heading)
    sin_t = np.sin(-heading)
    rx = cx * cos_t - cy * sin_t
    ry = cx * sin_t + cy * cos_t
    mask = _glyph_mask(vehicle_type, rx / 0.72, ry / 0.72)
    for c in range(3):
        channel = img[:, :, c]
        channel[mask] = rgb[c]
    return np.clip(img, 0, 255).astype(np.uint8)


_CLASS_PROTO_CACHE = {}


def _class_prototype(cls):
    """A fixed 256-d pattern per detector class; distractor features are this
    pattern plus noise, so object identity is recoverable from features."""
    if cls not in _CLASS_PROTO_CACHE:
        rng = np.random.default_rng([40971, cls])
        _CLASS_PROTO_CACHE[cls] = rng.normal(0.0, 1.0, D.FEATURE_WIDTH).astype(np.float32)
    return _CLASS_PROTO_CACHE[cls]


def _render_caption(attrs, rng):
    """Pick a template matching the present slots and fill it."""
    present = tuple(sorted(slot for slot, value in attrs.items() if value))
    templates = TEMPLATES[present]
    template = templates[int(rng.integers(0, len(templates)))]
    caption = template.format(
        color=attrs.get("color") or "",
        type=attrs.get("type") or "",
        action=attrs.get("action") or "",
    )
    if caption[0].islower():
        caption = caption[0].upper() + caption[1:]
    return caption


def _caption_attrs(true_attrs, spec, rng):
    """Apply drop/swap inconsistency to the true attributes for one caption."""
    vocab = {"color": tuple(COLORS), "type": VEHICLE_TYPES, "action": ACTIONS}
    out = {}
    for slot in ("color", "type", "action"):
        if rng.random() < spec.drop_prob.get(slot, 0.0):
            out[slot] = None
            continue
        value = true_attrs[slot]
        if rng.random() < spec.swap_prob.get(slot, 0.0):
            others = [v for v in vocab[slot] if v != value]
            value = others[int(rng.integers(0, len(others)))]
        out[slot] = value
    return out


# ---------------------------------------------------------------------------
# generation


def generate_synthetic(spec, seed, include_detections=True, include_crops=True):
    """Build a corpus deterministically from (spec, seed).

    include_detections / include_crops skip materializing the heavy sidecar
    pieces without changing the dataset part (separate child RNG streams per
    component).
    """
    spec.validate()
    n_combos = len(COLORS) * len(VEHICLE_TYPES) * len(ACTIONS)
    rng_global = np.random.default_rng([seed, 0xA1CE])
    if spec.n_tracks <= n_combos:
        combo_ids = rng_global.choice(n_combos, size=spec.n_tracks, replace=False)
    else:
        combo_ids = rng_global.integers(0, n_combos, size=spec.n_tracks)
    color_names = tuple(COLORS)
    tracks = []
    detections = {}
    crops = {}
    caption_attributes = {}
    for idx in range(spec.n_tracks):
        track_id = f"t{idx:04d}"
        combo = int(combo_ids[idx])
        true_attrs = {
            "color": color_names[combo % 8],
            "type": VEHICLE_TYPES[(combo // 8) % 8],
            "action": ACTIONS[combo // 64],
        }
        rng_main = np.random.default_rng([seed, idx, 0])
        n_frames = _draw_count(spec.frame_len, rng_main)
        size_jitter = rng_main.uniform(0.85, 1.15)
        base_w, base_h = _TYPE_SIZES[true_attrs["type"]]
        box_w = base_w * size_jitter
        box_h = base_h * size_jitter
        positions, headings = _trajectory(
            true_attrs["action"], n_frames, (box_w, box_h), spec.canvas_size, rng_main)
        boxes = tuple(
            (float(px - box_w / 2), float(py - box_h / 2), float(box_w), float(box_h))
            for px, py in positions
        )
        attrs_per_caption = [_caption_attrs(true_attrs, spec, rng_main) for _ in range(3)]
        captions = tuple(_render_caption(a, rng_main) for a in attrs_per_caption)
        tracks.append(D.TrackRecord(
            id=track_id,
            frame_refs=tuple(range(n_frames)),
            boxes=boxes,
            captions=captions,
            attributes=D.TrackAttributes(
                color=true_attrs["color"],
                vehicle_type=true_attrs["type"],
                action=true_attrs["action"],
            ),
        ))
        caption_attributes[track_id] = attrs_per_caption
        if include_detections:
            detections[track_id] = _track_detections(
                spec, boxes, positions, rng=np.random.default_rng([seed, idx, 1]))
        if include_crops:
            crops[track_id] = _track_crops(
                spec, true_attrs, positions, headings,
                rng=np.random.default_rng([seed, idx, 2]))
    dataset = D.Dataset(tracks=tracks)
    return SyntheticCorpus(
        dataset=dataset, detections=detections, crops=crops,
        caption_attributes=caption_attributes, spec=spec)


def _track_detections(spec, boxes, positions, rng):
    """Simulated detector output per frame, already confidence-filtered."""
    cw, ch = spec.canvas_size
    per_frame = {}
    for frame_idx in range(len(boxes)):
        raws = []
        n_extra = _draw_count(spec.distractors, rng)
        for _ in range(n_extra):
            cls = int(rng.integers(0, 8))
            bw = rng.uniform(0.03, 0.12)
            bh = rng.uniform(0.03, 0.12)
            bx = rng.uniform(0.0, 1.0 - bw)
            by = rng.uniform(0.0, 1.0 - bh)
            feat = _class_prototype(cls) + rng.normal(0.0, 0.1, D.FEATURE_WIDTH).astype(np.float32)
            score = float(rng.uniform(0.5, 1.0))
            raws.append(D.RawDetection(cls=cls, box=(bx, by, bw, bh), feat=feat, score=score))
        if rng.random() < 0.25:
            # the detector also fires on the tracked vehicle itself; assembly
            # is expected to drop this by IoU against the tracking box
            x, y, w, h = boxes[frame_idx]
            jitter = rng.uniform(-2.0, 2.0, size=2)
            nx = np.clip((x + jitter[0]) / cw, 0.0, 1.0)
            ny = np.clip((y + jitter[1]) / ch, 0.0, 1.0)
            nw = min(w / cw, 1.0 - nx)
            nh = min(h / ch, 1.0 - ny)
            cls = int(rng.integers(0, 8))
            feat = _class_prototype(cls) + rng.normal(0.0, 0.1, D.FEATURE_WIDTH).astype(np.float32)
            raws.append(D.RawDetection(
                cls=cls, box=(float(nx), float(ny), float(nw), float(nh)),
                feat=feat, score=float(rng.uniform(0.86, 1.0))))
        per_frame[frame_idx] = D.filter_detections(raws, ALLOWED_CLASSES)
    return per_frame


def _track_crops(spec, true_attrs, positions, headings, rng):
    w, h = spec.crop_size
    bg_params = (
        rng.uniform(10.0, 24.0),   # sin amplitude
        rng.uniform(10.0, 24.0),   # cos amplitude
        rng.uniform(0.05, 0.2),    # spatial frequencies
        rng.uniform(0.05, 0.2),
        rng.uniform(0.0, 2 * np.pi),  # phases
        rng.uniform(0.0, 2 * np.pi),
        rng.uniform(60.0, 110.0),  # base gray level
    )
    rgb = COLORS[true_attrs["color"]]
    frames = np.empty((len(positions), h, w, 3), dtype=np.uint8)
    for i, (pos, heading) in enumerate(zip(positions, headings)):
        frames[i] = _render_crop(true_attrs["type"], rgb, float(heading),
                                 (float(pos[0]), float(pos[1])), (w, h), bg_params)
    return frames


# ---------------------------------------------------------------------------
# corpus writing


def write_corpus(corpus, out_dir):
    """Write dataset.json, detections.jsonl, caption_attributes.json and the
    crop PNGs under out_dir."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    D.save_dataset(corpus.dataset, out_dir / "dataset.json")
    D.save_detections(corpus.detections, out_dir / "detections.jsonl")
    D.save_caption_attributes(corpus.caption_attributes, out_dir / "caption_attributes.json")
    with open(out_dir / "gen_spec.json", "w", encoding="utf-8") as fh:
        json.dump(corpus.spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    crops_root = out_dir / "crops"
    for track_id, frames in corpus.crops.items():
        track_dir = crops_root / track_id
        track_dir.mkdir(parents=True, exist_ok=True)
        for frame_idx in range(frames.shape[0]):
            Image.fromarray(frames[frame_idx]).save(track_dir / f"{frame_idx}.png")


def load_spec_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return SyntheticSpec.from_dict(json.load(fh))
