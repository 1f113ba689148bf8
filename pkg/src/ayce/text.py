"""The language branch: caption embedding in LTO/LSO modes and the
semi-supervised triplet fine-tuning stage.

The sentence encoder is pluggable. The shipped implementation is a small
trainable bag-of-tokens model (embedding table, masked mean pool, one
nonlinear layer to width W), which is enough to separate templated synthetic
captions; a pretrained transformer encoder can be dropped in behind the same
interface without touching anything downstream. Either way a linear
projection head maps the encoder width to the shared 256-wide space.

LTO embeds the three captions of a track independently (3 rows); LSO embeds
their single space-joined concatenation (1 row).
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from sklearn.base import BaseEstimator, TransformerMixin

from .checkpoint import MAGIC_TEXT, read_checkpoint, write_checkpoint
from .errors import (
    CheckpointError,
    EmptyCaptionError,
    LengthMismatchError,
    NonFiniteLossError,
    TooFewTracksError,
)
from .metrics import IntraInterReport, intra_inter_report, pair_distance_torch
from .transformer import init_parameters, load_parameter_arrays, parameter_arrays

EMBED_WIDTH = 256
DEFAULT_ENCODER_WIDTH = 64
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
_PUNCT = ".,!?;:\"'()"


class SentenceEncoder(nn.Module, abc.ABC):
    """Maps sentences to fixed-width vectors; trainable, with train/eval
    mode via nn.Module."""

    @property
    @abc.abstractmethod
    def width(self):
        """Output vector width W."""

    @abc.abstractmethod
    def encode_batch(self, sentences):
        """list of strings -> (B, W) tensor."""

    def encode(self, sentence):
        return self.encode_batch([sentence])[0]


def tokenize(sentence):
    """Lowercase whitespace tokens with edge punctuation stripped."""
    out = []
    for token in sentence.lower().split():
        token = token.strip(_PUNCT)
        if token:
            out.append(token)
    return out


class ToySentenceEncoder(SentenceEncoder):
    """Token-embedding table, masked mean pool, one tanh layer to width W."""

    def __init__(self, vocabulary, token_dim=48, width=DEFAULT_ENCODER_WIDTH, seed=0):
        super().__init__()
        if vocabulary[:2] != [PAD_TOKEN, UNK_TOKEN]:
            vocabulary = [PAD_TOKEN, UNK_TOKEN] + [
                t for t in vocabulary if t not in (PAD_TOKEN, UNK_TOKEN)]
        self.vocabulary = list(vocabulary)
        self._index = {tok: i for i, tok in enumerate(self.vocabulary)}
        self.token_dim = token_dim
        self._width = width
        self.seed = int(seed)
        self.embedding = nn.Embedding(len(self.vocabulary), token_dim, padding_idx=0)
        self.hidden = nn.Linear(token_dim, width)
        init_parameters(self, seed)
        with torch.no_grad():
            self.embedding.weight[0].fill_(0.0)

    @property
    def width(self):
        return self._width

    @classmethod
    def from_dataset(cls, dataset, token_dim=48, width=DEFAULT_ENCODER_WIDTH, seed=0):
        tokens = set()
        for track in dataset.tracks:
            for caption in track.captions:
                tokens.update(tokenize(caption))
        return cls(sorted(tokens), token_dim=token_dim, width=width, seed=seed)

    def encode_batch(self, sentences):
        token_lists = []
        for s in sentences:
            toks = tokenize(s)
            if not toks:
                toks = [UNK_TOKEN]
            token_lists.append([self._index.get(t, 1) for t in toks])
        max_len = max(len(t) for t in token_lists)
        ids = torch.zeros(len(token_lists), max_len, dtype=torch.long)
        mask = torch.zeros(len(token_lists), max_len, dtype=torch.bool)
        for i, toks in enumerate(token_lists):
            ids[i, : len(toks)] = torch.tensor(toks, dtype=torch.long)
            mask[i, : len(toks)] = True
        emb = self.embedding(ids)
        dtype = emb.dtype
        weights = mask.to(dtype).unsqueeze(-1)
        pooled = (emb * weights).sum(dim=1) / weights.sum(dim=1).clamp(min=1.0)
        return torch.tanh(self.hidden(pooled))


class ProjectionHead(nn.Module):
    """Affine map from the encoder width W to the shared 256-wide space."""

    def __init__(self, width=DEFAULT_ENCODER_WIDTH, seed=1):
        super().__init__()
        self.linear = nn.Linear(width, EMBED_WIDTH)
        init_parameters(self, seed)

    def forward(self, x):
        return self.linear(x)


# ---------------------------------------------------------------------------
# caption triplet embedding


def _check_captions(captions):
    if len(captions) != 3:
        raise EmptyCaptionError(f"expected 3 captions, got {len(captions)}")
    for j, c in enumerate(captions):
        if not c or not c.strip():
            raise EmptyCaptionError(f"caption {j} is empty")


def encode_lto(captions, enc, head):
    """Three captions -> (3, 256): each caption embedded on its own."""
    _check_captions(captions)
    return head(enc.encode_batch(list(captions)))


def encode_lso(captions, enc, head):
    """Three captions -> (1, 256): one embedding of the space-joined
    concatenation."""
    _check_captions(captions)
    joined = " ".join(captions)
    return head(enc.encode_batch([joined]))


def encode_captions(captions, enc, head, mode):
    if mode == "lto":
        return encode_lto(captions, enc, head)
    if mode == "lso":
        return encode_lso(captions, enc, head)
    raise ValueError(f"unknown text mode {mode!r}")


def frozen_text_embeddings(dataset, enc, head, mode):
    """Precompute per-track text embeddings in eval mode with no gradients.

    Returns {track id: (c, 256) float32 array}; downstream training treats
    these as constants for the whole run.
    """
    enc.eval()
    head.eval()
    out = {}
    with torch.no_grad():
        for track in dataset.tracks:
            emb = encode_captions(track.captions, enc, head, mode)
            out[track.id] = emb.numpy().astype(np.float32, copy=True)
    return out


# ---------------------------------------------------------------------------
# triplet sampling


@dataclass
class TextTriplet:
    anchor: str
    positive: str
    negative: str
    # (track id, caption index) per element; caption index is -1 for LSO
    # where a whole permuted set was concatenated
    anchor_src: tuple = ("", -1)
    positive_src: tuple = ("", -1)
    negative_src: tuple = ("", -1)


def sample_text_triplets(dataset, mode, batch, rng):
    """Draw training triplets: anchor/positive from one track, negative from
    a different one.

    LTO picks two distinct captions of the anchor track and one caption of
    the negative track. LSO concatenates two distinct random permutations of
    the anchor track's caption set, and a random permutation of the negative
    track's set.
    """
    n = dataset.n
    if n < 2:
        raise TooFewTracksError("triplet sampling needs at least 2 tracks")
    triplets = []
    for _ in range(batch):
        i = int(rng.integers(0, n))
        other = int(rng.integers(0, n - 1))
        if other >= i:
            other += 1
        own = dataset.tracks[i]
        neg = dataset.tracks[other]
        if mode == "lto":
            j_a = int(rng.integers(0, 3))
            j_p = int(rng.integers(0, 2))
            if j_p >= j_a:
                j_p += 1
            j_n = int(rng.integers(0, 3))
            triplets.append(TextTriplet(
                anchor=own.captions[j_a],
                positive=own.captions[j_p],
                negative=neg.captions[j_n],
                anchor_src=(own.id, j_a),
                positive_src=(own.id, j_p),
                negative_src=(neg.id, j_n),
            ))
        elif mode == "lso":
            perm_a = tuple(int(k) for k in rng.permutation(3))
            perm_p = perm_a
            while perm_p == perm_a:
                perm_p = tuple(int(k) for k in rng.permutation(3))
            perm_n = tuple(int(k) for k in rng.permutation(3))
            triplets.append(TextTriplet(
                anchor=" ".join(own.captions[k] for k in perm_a),
                positive=" ".join(own.captions[k] for k in perm_p),
                negative=" ".join(neg.captions[k] for k in perm_n),
                anchor_src=(own.id, -1),
                positive_src=(own.id, -1),
                negative_src=(neg.id, -1),
            ))
        else:
            raise ValueError(f"unknown text mode {mode!r}")
    return triplets


# ---------------------------------------------------------------------------
# loss


def triplet_margin_loss(d_ap, d_an, margin=1.0):
    """(1/Bs) sum of max(0, d(A,P) - d(A,N) + margin).

    Accepts python number sequences or torch tensors (gradients flow
    through tensors). Returns a scalar tensor.
    """
    if len(d_ap) != len(d_an):
        raise LengthMismatchError(f"{len(d_ap)} positives vs {len(d_an)} negatives")
    if len(d_ap) == 0:
        raise LengthMismatchError("empty distance batches")
    if isinstance(d_ap, torch.Tensor) and isinstance(d_an, torch.Tensor):
        ap, an = d_ap, d_an
    else:
        ap_items, an_items = list(d_ap), list(d_an)
        if torch.is_tensor(ap_items[0]):
            ap = torch.stack(ap_items)
            an = torch.stack(an_items)
        else:
            ap = torch.as_tensor(ap_items, dtype=torch.float64)
            an = torch.as_tensor(an_items, dtype=torch.float64)
    return torch.clamp(ap - an + margin, min=0.0).mean()


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class TextFinetuneConfig:
    mode: str = "lto"
    metric: str = "cosine"
    margin: float = 1.0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.05
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class FinetuneRecord:
    """One history row: separation stats after `epoch` epochs of training.

    Epoch 0 is the untouched model; its loss is nan since nothing ran yet.
    """

    epoch: int
    loss: float
    report: "IntraInterReport"


def _all_caption_embeddings(dataset, enc, head):
    """(N, 3, 256) per-caption embeddings in eval mode, for reporting."""
    was_training = enc.training
    enc.eval()
    head.eval()
    with torch.no_grad():
        rows = [encode_lto(t.captions, enc, head).numpy() for t in dataset.tracks]
    if was_training:
        enc.train()
        head.train()
    return np.stack(rows)


def finetune_text(dataset, enc, head, cfg):
    """Stage 1: minimize the triplet margin loss over sampled caption
    triplets by SGD on encoder + head parameters.

    Returns (enc, head, history): one FinetuneRecord per epoch plus the
    initial (pre-training) record at index 0. With cfg.epochs == 0 the
    models are untouched and the history has just that initial record.
    """
    if dataset.n < 2:
        raise TooFewTracksError("fine-tuning needs at least 2 tracks")
    params = list(enc.parameters()) + list(head.parameters())
    optim = torch.optim.SGD(params, lr=cfg.lr)
    report = intra_inter_report(_all_caption_embeddings(dataset, enc, head), cfg.metric)
    history = [FinetuneRecord(epoch=0, loss=float("nan"), report=report)]
    steps = max(1, (3 * dataset.n + cfg.batch_size - 1) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        enc.train()
        head.train()
        epoch_loss = 0.0
        for step in range(steps):
            batch_seed = (cfg.seed, epoch, step)
            rng = np.random.default_rng(list(batch_seed))
            triplets = sample_text_triplets(dataset, cfg.mode, cfg.batch_size, rng)
            sentences = []
            for t in triplets:
                sentences.extend((t.anchor, t.positive, t.negative))
            emb = head(enc.encode_batch(sentences))
            d_ap = []
            d_an = []
            for k in range(len(triplets)):
                a, p, ng = emb[3 * k], emb[3 * k + 1], emb[3 * k + 2]
                d_ap.append(pair_distance_torch(a, p, cfg.metric))
                d_an.append(pair_distance_torch(a, ng, cfg.metric))
            loss = triplet_margin_loss(torch.stack(d_ap), torch.stack(d_an), cfg.margin)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} step {step}", batch_seed=batch_seed)
            optim.zero_grad()
            loss.backward()
            optim.step()
            epoch_loss += float(loss.detach())
        report = intra_inter_report(_all_caption_embeddings(dataset, enc, head), cfg.metric)
        history.append(FinetuneRecord(epoch=epoch + 1, loss=epoch_loss / steps, report=report))
    enc.eval()
    head.eval()
    return enc, head, history


# ---------------------------------------------------------------------------
# checkpointing


def save_text_checkpoint(enc, head, path, mode="lto", extra_config=None):
    if not isinstance(enc, ToySentenceEncoder):
        raise CheckpointError(
            "only the bundled sentence encoder knows how to checkpoint itself")
    config = {
        "encoder": "toy",
        "mode": mode,
        "width": enc.width,
        "token_dim": enc.token_dim,
        "seed": enc.seed,
        "vocabulary": enc.vocabulary,
    }
    if extra_config:
        config.update(extra_config)
    arrays = [("enc." + n, a) for n, a in parameter_arrays(enc)]
    arrays += [("head." + n, a) for n, a in parameter_arrays(head)]
    write_checkpoint(path, MAGIC_TEXT, config, arrays)


def load_text_checkpoint(path):
    """-> (enc, head, config) in eval mode, bit-exact parameters."""
    _, config, arrays = read_checkpoint(path, expected_magic=MAGIC_TEXT)
    if config.get("encoder") != "toy":
        raise CheckpointError(f"{path}: unknown encoder kind {config.get('encoder')!r}")
    enc = ToySentenceEncoder(list(config["vocabulary"]),
                             token_dim=config["token_dim"],
                             width=config["width"],
                             seed=config.get("seed", 0))
    head = ProjectionHead(width=config["width"])
    enc_arrays = {n[4:]: a for n, a in arrays.items() if n.startswith("enc.")}
    head_arrays = {n[5:]: a for n, a in arrays.items() if n.startswith("head.")}
    load_parameter_arrays(enc, enc_arrays)
    load_parameter_arrays(head, head_arrays)
    enc.eval()
    head.eval()
    return enc, head, config


# ---------------------------------------------------------------------------
# estimator wrapper


class TextBranchEncoder(BaseEstimator, TransformerMixin):
    """Scikit-learn style wrapper over the text branch.

    fit(dataset) builds the vocabulary and fine-tunes encoder + head on the
    dataset's caption triplets; transform(dataset) returns the per-track
    embeddings as an (N, arity, 256) array (arity 3 for lto, 1 for lso).
    """

    def __init__(self, mode="lto", token_dim=48, width=DEFAULT_ENCODER_WIDTH,
                 metric="cosine", margin=1.0, epochs=30, batch_size=16,
                 lr=0.05, seed=0):
        self.mode = mode
        self.token_dim = token_dim
        self.width = width
        self.metric = metric
        self.margin = margin
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _config(self):
        return TextFinetuneConfig(mode=self.mode, metric=self.metric,
                                  margin=self.margin, epochs=self.epochs,
                                  batch_size=self.batch_size, lr=self.lr,
                                  seed=self.seed)

    def fit(self, X, y=None):
        dataset = X.dataset if hasattr(X, "dataset") else X
        enc = ToySentenceEncoder.from_dataset(
            dataset, token_dim=self.token_dim, width=self.width, seed=self.seed)
        head = ProjectionHead(width=self.width, seed=self.seed + 1)
        enc, head, history = finetune_text(dataset, enc, head, self._config())
        self.encoder_ = enc
        self.head_ = head
        self.history_ = history
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "encoder_")
        dataset = X.dataset if hasattr(X, "dataset") else X
        self.encoder_.eval()
        self.head_.eval()
        with torch.no_grad():
            rows = [
                encode_captions(t.captions, self.encoder_, self.head_, self.mode).numpy()
                for t in dataset.tracks
            ]
        return np.stack(rows)

    def save(self, path):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "encoder_")
        save_text_checkpoint(self.encoder_, self.head_, path, mode=self.mode,
                             extra_config={"finetune": self._config().to_dict()})

    @classmethod
    def load(cls, path):
        enc, head, config = load_text_checkpoint(path)
        ft = config.get("finetune", {})
        est = cls(mode=config.get("mode", "lto"),
                  token_dim=config["token_dim"], width=config["width"],
                  metric=ft.get("metric", "cosine"), margin=ft.get("margin", 1.0),
                  epochs=ft.get("epochs", 30), batch_size=ft.get("batch_size", 16),
                  lr=ft.get("lr", 0.05), seed=ft.get("seed", 0))
        est.encoder_ = enc
        est.head_ = head
        est.history_ = []
        return est
