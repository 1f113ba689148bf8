"""Stage-2 optimization of the visual branch against frozen text embeddings.

The text branch is trained first and then held fixed; this loop aligns the
visual embeddings to it with a composite objective: a triplet hinge whose
anchor-positive term takes the minimum entry of the cross-arity distance
matrix and whose anchor-negative term takes the mean, plus a beta-weighted
pull of that same minimum toward zero. Negatives are mined online inside
each batch by picking, per anchor, the other track whose text embedding is
farthest under the mean aggregation.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .data import corpus_parts
from .errors import (
    ConfigError,
    LengthMismatchError,
    NoCandidatesError,
    NonFiniteLossError,
)
from .metrics import aggregate, distance_matrix, pair_distance_torch
from .text import frozen_text_embeddings, load_text_checkpoint
from .visual import (
    DEFAULT_CROP_SIZE,
    EncoderConfig,
    VisualBranch,
    desk_encoder_config,
    forward_visual,
    save_visual_checkpoint,
)

VARIANT_NAMES = ("vs-lt", "vs-ls", "vt-lt")


@dataclass(frozen=True)
class ModelVariant:
    """Branch-head combination; fixes the arity of each side.

    VS pools the visual sequence to one embedding, VT decodes three; LT
    embeds the three captions separately, LS their concatenation.
    """

    name: str

    def __post_init__(self):
        if self.name not in VARIANT_NAMES:
            raise ConfigError(
                f"unknown variant {self.name!r}; choose from {list(VARIANT_NAMES)}")

    @classmethod
    def from_name(cls, name):
        if isinstance(name, cls):
            return name
        return cls(str(name).lower())

    @property
    def visual_mode(self):
        return "vso" if self.name.startswith("vs") else "vto"

    @property
    def text_mode(self):
        return "lto" if self.name.endswith("lt") else "lso"

    @property
    def visual_arity(self):
        return 1 if self.visual_mode == "vso" else 3

    @property
    def text_arity(self):
        return 3 if self.text_mode == "lto" else 1


@dataclass
class LossConfig:
    margin: float = 1.0
    beta: float = 0.1
    metric: str = "euclidean"
    positive_aggregate: str = "min"
    negative_aggregate: str = "mean"

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.positive_aggregate not in ("min", "mean"):
            raise ConfigError(f"unknown aggregation {self.positive_aggregate!r}")
        if self.negative_aggregate not in ("min", "mean"):
            raise ConfigError(f"unknown aggregation {self.negative_aggregate!r}")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainConfig:
    """Loop hyperparameters. The defaults are the full-scale recipe; the
    desk preset in the config module shrinks them."""

    epochs: int = 680
    batch_size: int = 96
    lr: float = 3.5e-5
    milestones: tuple = ((450, 2.5e-5), (650, 1.5e-5))
    seed: int = 0
    checkpoint_every: int = 0  # 0: only the final checkpoint
    optimizer: str = "adam"
    momentum: float = 0.9

    def __post_init__(self):
        self.milestones = tuple((int(e), float(v)) for e, v in self.milestones)
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(
                f"batch size must be >= 2 so mining has an alternative, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint cadence must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        epochs_only = [e for e, _ in self.milestones]
        if epochs_only != sorted(set(epochs_only)):
            raise ConfigError(f"milestones must be strictly increasing, got {epochs_only}")

    def to_dict(self):
        d = dict(self.__dict__)
        d["milestones"] = [list(m) for m in self.milestones]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(tuple(m) for m in d["milestones"])
        return cls(**d)


@dataclass
class TripletBatch:
    """One optimization step's worth of embeddings.

    anchors are visual (r, 256) tensors; positives and negatives are text
    (c, 256) arrays or tensors. When track ids are provided the same-track /
    different-track pairing contract is checked.
    """

    anchors: list
    positives: list
    negatives: list
    anchor_ids: list = field(default_factory=list)
    negative_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.anchors) == len(self.positives) == len(self.negatives)):
            raise LengthMismatchError(
                f"{len(self.anchors)} anchors, {len(self.positives)} positives, "
                f"{len(self.negatives)} negatives")
        if self.anchor_ids and self.negative_ids:
            for a_id, n_id in zip(self.anchor_ids, self.negative_ids):
                if a_id == n_id:
                    raise ValueError(f"negative for {a_id!r} comes from the same track")

    @property
    def size(self):
        return len(self.anchors)


# ---------------------------------------------------------------------------
# loss pieces


def phi(V, T, cfg=None):
    """Anchor-positive distance: aggregate-min over the pairwise matrix."""
    cfg = cfg or LossConfig()
    return aggregate(distance_matrix(V, T, cfg.metric), cfg.positive_aggregate)


def neg_distance(A, N, cfg=None):
    """Anchor-negative distance: aggregate-mean over the pairwise matrix."""
    cfg = cfg or LossConfig()
    return aggregate(distance_matrix(A, N, cfg.metric), cfg.negative_aggregate)


def _pair_matrix_torch(U, V, metric):
    """(r, c) stack of scalar pair distances, differentiable."""
    if U.dim() == 1:
        U = U.unsqueeze(0)
    if V.dim() == 1:
        V = V.unsqueeze(0)
    rows = []
    for m in range(U.shape[0]):
        rows.append(torch.stack([
            pair_distance_torch(U[m], V[n], metric) for n in range(V.shape[0])]))
    return torch.stack(rows)


def _aggregate_torch(D, mode):
    if mode == "min":
        return D.min()
    if mode == "mean":
        return D.mean()
    raise ValueError(f"unknown aggregation {mode!r}")


def composite_loss(batch, cfg=None):
    """Triplet hinge over aggregated distances plus the beta pull-in term.

    (1/Bs) sum max(0, phi_i - neg_i + m)  +  beta * (1/Bs) sum phi_i

    Differentiable; returns a scalar tensor in the anchors' dtype. With
    beta=0 this is exactly the plain triplet margin loss on (phi, neg).
    """
    cfg = cfg or LossConfig()
    hinges = []
    phis = []
    for a, p, n in zip(batch.anchors, batch.positives, batch.negatives):
        a_t = a if isinstance(a, torch.Tensor) else torch.as_tensor(a)
        p_t = p if isinstance(p, torch.Tensor) else torch.as_tensor(p, dtype=a_t.dtype)
        n_t = n if isinstance(n, torch.Tensor) else torch.as_tensor(n, dtype=a_t.dtype)
        phi_i = _aggregate_torch(
            _pair_matrix_torch(a_t, p_t, cfg.metric), cfg.positive_aggregate)
        neg_i = _aggregate_torch(
            _pair_matrix_torch(a_t, n_t, cfg.metric), cfg.negative_aggregate)
        hinges.append(torch.clamp(phi_i - neg_i + cfg.margin, min=0.0))
        phis.append(phi_i)
    loss = torch.stack(hinges).mean()
    if cfg.beta != 0.0:
        loss = loss + cfg.beta * torch.stack(phis).mean()
    return loss


def mine_hard_negatives(anchors, texts, cfg=None, track_ids=None):
    """Per anchor, the in-batch index whose text embedding is farthest.

    anchors and texts are parallel lists over the batch's tracks (numpy or
    detached tensors). The anchor's own track is excluded; ties resolve to
    the lowest index. Raises NoCandidatesError when an anchor has nothing
    left to pick from.
    """
    cfg = cfg or LossConfig()
    n = len(anchors)
    if len(texts) != n:
        raise LengthMismatchError(f"{n} anchors vs {len(texts)} text embeddings")
    chosen = []
    for i in range(n):
        best = -1
        best_d = -np.inf
        for j in range(n):
            if j == i:
                continue
            if track_ids is not None and track_ids[j] == track_ids[i]:
                continue
            d = neg_distance(_to_numpy(anchors[i]), _to_numpy(texts[j]), cfg)
            if d > best_d:
                best_d = d
                best = j
        if best < 0:
            raise NoCandidatesError(f"anchor {i} has no candidate negatives")
        chosen.append(best)
    return chosen


def _to_numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def lr_at(epoch, cfg):
    """Piecewise-constant schedule: base lr, stepping down at each milestone."""
    lr = cfg.lr
    for boundary, value in cfg.milestones:
        if epoch >= boundary:
            lr = value
    return lr


# ---------------------------------------------------------------------------
# frozen text side


def _resolve_text_source(text_source, dataset, mode):
    """Accept a checkpoint path, an (enc, head) pair, or a ready id->array
    mapping, and land on the mapping."""
    if isinstance(text_source, dict):
        return text_source
    if isinstance(text_source, (str, Path)):
        enc, head, _ = load_text_checkpoint(text_source)
        return frozen_text_embeddings(dataset, enc, head, mode)
    enc, head = text_source
    return frozen_text_embeddings(dataset, enc, head, mode)


# ---------------------------------------------------------------------------
# training loop


def _append_history_row(path, row):
    path = Path(path)
    new_file = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["epoch", "loss", "lr", "mrr"])
        writer.writerow([
            row["epoch"],
            repr(float(row["loss"])),
            repr(float(row["lr"])),
            "" if row.get("mrr") is None else repr(float(row["mrr"])),
        ])


def _held_out_mrr(branch, dataset, detections, crops, image_size, text_embeddings,
                  metric, eval_seed):
    """MRR over the training tracks with a fixed-seed subsample, for the
    history column. Imported lazily to keep this module loadable first."""
    from .retrieval import build_store, evaluate

    store = build_store(branch, text_embeddings,
                        dataset=dataset, detections=detections, crops=crops,
                        image_size=image_size, seed=eval_seed)
    report = evaluate(store, direction="text_to_visual", metric=metric, seed=eval_seed)
    return report["mrr"]


def train_visual(corpus, text_source, variant="vt-lt", loss_cfg=None, train_cfg=None,
                 encoder_config=None, crop_size=DEFAULT_CROP_SIZE, branch=None,
                 checkpoint_dir=None, history_path=None, eval_every=0, eval_seed=1234,
                 log=None):
    """Run the stage-2 loop and return (branch, history).

    Per epoch: shuffle tracks, walk batches of batch_size (a trailing batch
    smaller than 2 is skipped), embed anchors with per-(epoch, track) frame
    subsampling, mine negatives inside the batch, take one gradient step per
    batch at lr_at(epoch). history is a list of per-epoch dicts
    {epoch, loss, lr, mrr} (mrr present when eval_every hits).
    """
    variant = ModelVariant.from_name(variant)
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or TrainConfig()
    dataset, detections, crops, image_size = corpus_parts(corpus)
    text_embeddings = _resolve_text_source(text_source, dataset, variant.text_mode)

    if branch is None:
        config = encoder_config or desk_encoder_config()
        branch = VisualBranch(config=config, visual_mode=variant.visual_mode,
                              crop_size=crop_size, seed=train_cfg.seed)
    torch.manual_seed(train_cfg.seed)

    if train_cfg.optimizer == "adam":
        optim = torch.optim.Adam(branch.parameters(), lr=train_cfg.lr)
    else:
        optim = torch.optim.SGD(branch.parameters(), lr=train_cfg.lr,
                                momentum=train_cfg.momentum)

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        os.makedirs(checkpoint_dir, exist_ok=True)

    def _save(path, epochs_done):
        save_visual_checkpoint(branch, path, extra_config={
            "variant": variant.name,
            "loss": loss_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "epochs_completed": epochs_done,
        })

    n = dataset.n
    ids = [t.id for t in dataset.tracks]
    history = []
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        for group in optim.param_groups:
            group["lr"] = lr
        order = np.random.default_rng([train_cfg.seed, 1000003, epoch]).permutation(n)
        branch.train()
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            if len(idx) < 2:
                continue  # mining needs an alternative track
            batch_seed = (train_cfg.seed, epoch, int(start))
            anchors = []
            positives = []
            batch_ids = []
            for track_idx in idx:
                track = dataset.tracks[int(track_idx)]
                rng = np.random.default_rng([train_cfg.seed, epoch, int(track_idx)])
                emb = forward_visual(branch, track, detections.get(track.id, {}),
                                     crops, rng, image_size=image_size)
                anchors.append(emb)
                positives.append(text_embeddings[track.id])
                batch_ids.append(track.id)
            mined = mine_hard_negatives(anchors, positives, loss_cfg, track_ids=batch_ids)
            batch = TripletBatch(
                anchors=anchors,
                positives=positives,
                negatives=[positives[j] for j in mined],
                anchor_ids=batch_ids,
                negative_ids=[batch_ids[j] for j in mined],
            )
            loss = composite_loss(batch, loss_cfg)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}", batch_seed=batch_seed)
            optim.zero_grad()
            loss.backward()
            optim.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        row = {
            "epoch": epoch,
            "loss": epoch_loss / max(1, n_batches),
            "lr": lr,
            "mrr": None,
        }
        if eval_every > 0 and (epoch + 1) % eval_every == 0:
            branch.eval()
            row["mrr"] = _held_out_mrr(branch, dataset, detections, crops, image_size,
                                       text_embeddings, loss_cfg.metric, eval_seed)
        history.append(row)
        if history_path is not None:
            _append_history_row(history_path, row)
        if log is not None:
            log(row)
        if (checkpoint_dir is not None and train_cfg.checkpoint_every > 0
                and (epoch + 1) % train_cfg.checkpoint_every == 0):
            _save(checkpoint_dir / f"epoch_{epoch + 1:04d}.ckpt", epoch + 1)
    branch.eval()
    if checkpoint_dir is not None:
        _save(checkpoint_dir / "final.ckpt", train_cfg.epochs)
    return branch, history


# ---------------------------------------------------------------------------
# estimator wrapper


class VisualBranchEncoder(BaseEstimator, TransformerMixin):
    """Scikit-learn style wrapper over the visual branch.

    fit(corpus, text_source=...) trains the branch against frozen text
    embeddings; transform(corpus) embeds every track with a fixed evaluation
    seed, returning (N, arity, 256).
    """

    def __init__(self, variant="vt-lt", d_model=64, n_blocks=2, n_heads=4,
                 d_ff=256, dropout_p=0.1, crop_size=(48, 40), margin=1.0,
                 beta=0.1, metric="euclidean", epochs=200, batch_size=8,
                 lr=1e-3, milestones=(), seed=0, eval_seed=1234):
        self.variant = variant
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.dropout_p = dropout_p
        self.crop_size = crop_size
        self.margin = margin
        self.beta = beta
        self.metric = metric
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.milestones = milestones
        self.seed = seed
        self.eval_seed = eval_seed

    def fit(self, X, y=None, text_source=None):
        if text_source is None:
            raise ConfigError("fit needs text_source (checkpoint path, (enc, head), "
                              "or an id -> embedding mapping)")
        encoder_config = EncoderConfig(n_blocks=self.n_blocks, n_heads=self.n_heads,
                                       d_model=self.d_model, d_ff=self.d_ff,
                                       dropout_p=self.dropout_p)
        loss_cfg = LossConfig(margin=self.margin, beta=self.beta, metric=self.metric)
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                lr=self.lr, milestones=tuple(self.milestones),
                                seed=self.seed)
        branch, history = train_visual(X, text_source, variant=self.variant,
                                       loss_cfg=loss_cfg, train_cfg=train_cfg,
                                       encoder_config=encoder_config,
                                       crop_size=tuple(self.crop_size),
                                       eval_seed=self.eval_seed)
        self.branch_ = branch
        self.history_ = history
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "branch_")
        dataset, detections, crops, image_size = corpus_parts(X)
        self.branch_.eval()
        rows = []
        with torch.no_grad():
            for track_idx, track in enumerate(dataset.tracks):
                rng = np.random.default_rng([self.eval_seed, track_idx])
                emb = forward_visual(self.branch_, track,
                                     detections.get(track.id, {}), crops, rng,
                                     image_size=image_size)
                rows.append(emb.numpy())
        return np.stack(rows)

    def save(self, path):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "branch_")
        save_visual_checkpoint(self.branch_, path, extra_config={
            "variant": str(self.variant),
        })
