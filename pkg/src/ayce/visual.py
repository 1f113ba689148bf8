"""The visual branch: input assembly, crop CNN, projection, masked Spatial
and Temporal encoders with sampling-aware positional encoding, and the
VSO/VTO output heads.

Data flow per track (M sampled frames, O detected objects max per frame):

    subsample -> assemble (M, O+1, 261) -> crop features into slot 0
    -> input projection to d_model -> Spatial Encoder over the object axis
    (frames as batch) -> masked mean -> Temporal Encoder over frames with
    positional encoding at the original frame indices -> VSO mean head
    (1 row) or VTO decoder head (3 rows) -> linear map into the shared
    256-wide embedding space.

The trailing linear map exists so small desk-scale d_model configurations
still land in the fixed 256-wide space shared with the text branch; at
d_model=256 it is simply a square affine layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import data as D
from .checkpoint import MAGIC_VISUAL, read_checkpoint, write_checkpoint
from .errors import (
    AllMaskedError,
    BoxOutOfImageError,
    CheckpointError,
    ShapeError,
)
from .synthetic import SENTINEL_CLASS
from .transformer import (
    TransformerDecoder,
    TransformerEncoder,
    init_parameters,
    load_parameter_arrays,
    masked_mean,
    parameter_arrays,
    sampling_aware_pe,
    sinusoidal_position_encoding,
)

EMBED_WIDTH = 256
DEFAULT_CROP_SIZE = (110, 90)  # (width, height)
DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_CAP_OBJECTS = 16


@dataclass
class EncoderConfig:
    """Shared hyperparameters of the Spatial/Temporal encoders (and the VTO
    decoder, which reuses n_blocks)."""

    n_blocks: int = 6
    n_heads: int = 8
    d_model: int = 256
    d_ff: int = 2048
    dropout_p: float = 0.1

    def __post_init__(self):
        if min(self.n_blocks, self.n_heads, self.d_model, self.d_ff) < 1:
            raise ShapeError("encoder dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ShapeError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ShapeError(f"dropout_p {self.dropout_p} outside [0,1)")

    def to_dict(self):
        return {"n_blocks": self.n_blocks, "n_heads": self.n_heads,
                "d_model": self.d_model, "d_ff": self.d_ff,
                "dropout_p": self.dropout_p}

    @classmethod
    def from_dict(cls, raw):
        return cls(**{k: raw[k] for k in
                      ("n_blocks", "n_heads", "d_model", "d_ff", "dropout_p") if k in raw})


def desk_encoder_config():
    """Small dims that train in minutes on a laptop CPU."""
    return EncoderConfig(n_blocks=2, n_heads=4, d_model=64, d_ff=256, dropout_p=0.1)


@dataclass
class VisualInput:
    """Assembled per-track tensor plus its masks.

    data is (M, O+1, 261) with slot 0 of the object axis holding the tracked
    vehicle (sentinel class, normalized tracking box, zeroed feature slots —
    filled from crop pixels later). obj_mask marks real object slots,
    frame_mask real frames; padded rows are zero.
    """

    data: torch.Tensor
    frame_indices: np.ndarray
    obj_mask: torch.Tensor
    frame_mask: torch.Tensor


def assemble_visual_input(track, sampled_indices, detections, cap_objects=DEFAULT_CAP_OBJECTS,
                          image_size=None, iou_threshold=DEFAULT_IOU_THRESHOLD,
                          sentinel_cls=SENTINEL_CLASS):
    """Build the (M, O+1, 261) input for one track.

    detections maps frame index -> [ObjectRecord] (already confidence
    filtered). Detections overlapping the tracking box with IoU above the
    threshold are dropped — they are almost certainly the tracked vehicle
    itself, which already owns slot 0. Per-frame detection lists are
    truncated at cap_objects.
    """
    sampled_indices = [int(i) for i in sampled_indices]
    if not sampled_indices:
        raise ShapeError("need at least one sampled frame")
    img_w, img_h = image_size if image_size is not None else D.DEFAULT_IMAGE_SIZE
    kept_per_frame = []
    norm_boxes = []
    for frame_idx in sampled_indices:
        x, y, w, h = track.boxes[frame_idx]
        if x < 0 or y < 0 or x + w > img_w or y + h > img_h:
            raise BoxOutOfImageError(
                f"track {track.id}: frame {frame_idx} box {(x, y, w, h)} "
                f"exceeds image {img_w}x{img_h}")
        nbox = (x / img_w, y / img_h, w / img_w, h / img_h)
        norm_boxes.append(nbox)
        objs = detections.get(frame_idx, []) if detections else []
        kept = [o for o in objs if D.iou(nbox, o.box) <= iou_threshold]
        kept_per_frame.append(kept[:cap_objects])
    m = len(sampled_indices)
    o_max = max((len(objs) for objs in kept_per_frame), default=0)
    data = np.zeros((m, o_max + 1, D.OBJECT_RECORD_WIDTH), dtype=np.float32)
    obj_mask = np.zeros((m, o_max + 1), dtype=bool)
    for i, (nbox, objs) in enumerate(zip(norm_boxes, kept_per_frame)):
        data[i, 0, 0] = float(sentinel_cls)
        data[i, 0, 1:5] = nbox
        # feature slots of the tracked vehicle stay zero until the crop
        # encoder fills them
        obj_mask[i, 0] = True
        for j, obj in enumerate(objs, start=1):
            data[i, j] = obj.flattened()
            obj_mask[i, j] = True
    return VisualInput(
        data=torch.from_numpy(data),
        frame_indices=np.asarray(sampled_indices, dtype=np.int64),
        obj_mask=torch.from_numpy(obj_mask),
        frame_mask=torch.ones(m, dtype=torch.bool),
    )


class CropEncoder(nn.Module):
    """Four strided conv stages, global average pool, affine to 256.

    Size-agnostic: any crop (M, 3, H, W) with H, W >= 8 maps to (M, 256).
    A pretrained residual backbone can replace this behind the same
    contract.
    """

    def __init__(self):
        super().__init__()
        chans = (3, 16, 32, 64, 128)
        self.stages = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], kernel_size=3, stride=2, padding=1)
            for i in range(4))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(chans[-1], EMBED_WIDTH)

    def forward(self, crops):
        if crops.dim() != 4 or crops.shape[1] != 3:
            raise ShapeError(f"crops must be (M, 3, H, W), got {tuple(crops.shape)}")
        x = crops
        for conv in self.stages:
            x = torch.relu(conv(x))
        x = self.pool(x).flatten(1)
        return self.fc(x)


class VisualBranch(nn.Module):
    """The full visual encoder. visual_mode selects the head: "vso" pools
    one row, "vto" decodes three rows from positional-encoding-only
    queries."""

    def __init__(self, config=None, visual_mode="vto", crop_size=DEFAULT_CROP_SIZE, seed=0):
        super().__init__()
        if visual_mode not in ("vso", "vto"):
            raise ShapeError(f"visual_mode must be 'vso' or 'vto', got {visual_mode!r}")
        self.config = config if config is not None else EncoderConfig()
        self.visual_mode = visual_mode
        self.crop_size = tuple(crop_size)
        self.seed = int(seed)
        cfg = self.config
        self.crop_encoder = CropEncoder()
        self.input_proj = nn.Linear(D.OBJECT_RECORD_WIDTH, cfg.d_model)
        self.spatial = TransformerEncoder(cfg.n_blocks, cfg.d_model, cfg.n_heads,
                                          cfg.d_ff, cfg.dropout_p)
        self.temporal = TransformerEncoder(cfg.n_blocks, cfg.d_model, cfg.n_heads,
                                           cfg.d_ff, cfg.dropout_p)
        if visual_mode == "vto":
            self.decoder = TransformerDecoder(cfg.n_blocks, cfg.d_model, cfg.n_heads,
                                              cfg.d_ff, cfg.dropout_p)
        self.embed_proj = nn.Linear(cfg.d_model, EMBED_WIDTH)
        init_parameters(self, self.seed)

    @property
    def dtype(self):
        return self.embed_proj.weight.dtype

    @property
    def arity(self):
        return 3 if self.visual_mode == "vto" else 1

    def input_projection(self, x):
        if x.shape[-1] != D.OBJECT_RECORD_WIDTH:
            raise ShapeError(f"trailing width must be {D.OBJECT_RECORD_WIDTH}, "
                             f"got {x.shape[-1]}")
        return self.input_proj(x)

    def spatial_encode(self, x, obj_mask):
        """(M, O+1, d_model) -> (M, d_model): encode the object axis with
        frames as batch, then masked-mean over real object slots."""
        if x.dim() != 3:
            raise ShapeError(f"expected (M, O+1, d_model), got {tuple(x.shape)}")
        real_frames = obj_mask.any(dim=1)
        encoded = self.spatial(x, key_mask=obj_mask)
        pooled = masked_mean(encoded, obj_mask, dim=1)
        # padded frames carry no real objects; their pooled rows are zeroed
        return pooled * real_frames.to(pooled.dtype).unsqueeze(-1)

    def temporal_encode(self, h, frame_mask, frame_indices):
        """(M, d_model) -> (M, d_model) with sampling-aware positions."""
        if h.dim() != 2 or h.shape[1] != self.config.d_model:
            raise ShapeError(f"expected (M, {self.config.d_model}), got {tuple(h.shape)}")
        pe = sampling_aware_pe(frame_indices, self.config.d_model, dtype=h.dtype)
        x = (h + pe.to(h.device)).unsqueeze(0)
        out = self.temporal(x, key_mask=frame_mask.unsqueeze(0))
        return out.squeeze(0)

    def vso_head(self, h, frame_mask):
        """Masked mean over real frames -> one d_model row."""
        if not bool(frame_mask.any()):
            raise AllMaskedError("vso head needs at least one real frame")
        return masked_mean(h.unsqueeze(0), frame_mask.unsqueeze(0), dim=1)

    def vto_head(self, memory, frame_mask):
        """Decode 3 rows from positional-encoding-only queries."""
        if self.visual_mode != "vto":
            raise ShapeError("this branch was built without a decoder")
        if not bool(frame_mask.any()):
            raise AllMaskedError("vto head needs at least one real frame")
        queries = sinusoidal_position_encoding(
            np.arange(3), self.config.d_model, dtype=memory.dtype)
        queries = queries.to(memory.device).unsqueeze(0)
        out = self.decoder(queries, memory.unsqueeze(0),
                           memory_mask=frame_mask.unsqueeze(0))
        return out.squeeze(0)

    def forward(self, visual_input, crops):
        """-> (arity, 256) embedding rows in the shared space."""
        data = visual_input.data.to(self.dtype)
        obj_mask = visual_input.obj_mask
        frame_mask = visual_input.frame_mask
        if crops.shape[0] != data.shape[0]:
            raise ShapeError(f"{crops.shape[0]} crops for {data.shape[0]} frames")
        crop_feats = self.crop_encoder(crops.to(self.dtype))
        filled = torch.cat(
            [data[:, :1, :5], crop_feats.unsqueeze(1)], dim=2)
        data = torch.cat([filled, data[:, 1:, :]], dim=1)
        x = self.input_projection(data)
        h = self.spatial_encode(x, obj_mask)
        t = self.temporal_encode(h, frame_mask, visual_input.frame_indices)
        if self.visual_mode == "vso":
            head_out = self.vso_head(t, frame_mask)
        else:
            head_out = self.vto_head(t, frame_mask)
        return self.embed_proj(head_out)


# ---------------------------------------------------------------------------
# crop loading


def load_crop_batch(crops_source, track_id, frame_indices, crop_size, dtype=torch.float32):
    """Fetch and resize the tracked-vehicle crops for the sampled frames.

    crops_source is either a directory (crops/<track_id>/<frame_index>.png)
    or an in-memory mapping track_id -> (n_frames, H, W, 3) uint8 array.
    Returns (M, 3, crop_h, crop_w) in [0, 1].
    """
    from PIL import Image

    w, h = crop_size
    out = np.empty((len(frame_indices), h, w, 3), dtype=np.float32)
    if isinstance(crops_source, (str, Path)):
        root = Path(crops_source)
        for i, frame_idx in enumerate(frame_indices):
            img = Image.open(root / track_id / f"{frame_idx}.png").convert("RGB")
            if img.size != (w, h):
                img = img.resize((w, h), Image.BILINEAR)
            out[i] = np.asarray(img, dtype=np.float32)
    else:
        frames = crops_source[track_id]
        for i, frame_idx in enumerate(frame_indices):
            frame = frames[frame_idx]
            if frame.shape[0] != h or frame.shape[1] != w:
                img = Image.fromarray(frame).resize((w, h), Image.BILINEAR)
                frame = np.asarray(img)
            out[i] = frame
    out /= 255.0
    return torch.from_numpy(out).permute(0, 3, 1, 2).to(dtype)


def forward_visual(branch, track, detections, crops_source, rng,
                   cap_objects=DEFAULT_CAP_OBJECTS, image_size=None,
                   iou_threshold=DEFAULT_IOU_THRESHOLD, sentinel_cls=SENTINEL_CLASS):
    """Subsample, assemble, load crops, and run the branch for one track."""
    indices = D.subsample_frames(track.n_frames, D.FRAME_CAP, rng)
    per_frame = detections.get(track.id, {}) if detections else {}
    vin = assemble_visual_input(track, indices, per_frame, cap_objects=cap_objects,
                                image_size=image_size, iou_threshold=iou_threshold,
                                sentinel_cls=sentinel_cls)
    crops = load_crop_batch(crops_source, track.id, indices, branch.crop_size,
                            dtype=branch.dtype)
    return branch(vin, crops)


# ---------------------------------------------------------------------------
# checkpointing


def save_visual_checkpoint(branch, path, extra_config=None):
    config = {
        "visual_mode": branch.visual_mode,
        "encoder": branch.config.to_dict(),
        "crop_size": list(branch.crop_size),
        "seed": branch.seed,
    }
    if extra_config:
        config.update(extra_config)
    write_checkpoint(path, MAGIC_VISUAL, config, parameter_arrays(branch))


def load_visual_checkpoint(path):
    """-> (VisualBranch in eval mode, stored config dict)."""
    _, config, arrays = read_checkpoint(path, expected_magic=MAGIC_VISUAL)
    try:
        branch = VisualBranch(
            config=EncoderConfig.from_dict(config["encoder"]),
            visual_mode=config["visual_mode"],
            crop_size=tuple(config["crop_size"]),
            seed=config.get("seed", 0),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing config key {exc}")
    load_parameter_arrays(branch, arrays)
    branch.eval()
    return branch, config
