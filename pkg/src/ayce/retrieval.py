"""Batch inference and evaluation.

Embeds every track on both sides, ranks candidates in either direction by
the aggregate-min distance, scores mean reciprocal rank against the
identity pairing (a track's captions describe that track), and writes the
submission and report files. Ranking is ascending by distance with ties
broken by ascending track id; a descending flag exists for comparison runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import MAGIC_EMBED, read_checkpoint, write_checkpoint
from .data import corpus_parts
from .errors import EmptyStoreError, SchemaError
from .metrics import RankingTable, aggregate, distance_matrix, mrr
from .text import frozen_text_embeddings, load_text_checkpoint
from .visual import forward_visual, load_visual_checkpoint

STORE_FILENAME = "embeddings.bin"
DIRECTIONS = ("text_to_visual", "visual_to_text")


@dataclass
class EmbeddingStore:
    """Both-side embeddings for a set of tracks, keyed by track id."""

    visual: dict  # track id -> (r, 256) array
    text: dict  # track id -> (c, 256) array
    variant: str = "vt-lt"
    seed: int = 0

    def __post_init__(self):
        if set(self.visual) != set(self.text):
            only_v = sorted(set(self.visual) - set(self.text))[:3]
            only_t = sorted(set(self.text) - set(self.visual))[:3]
            raise SchemaError(
                f"store sides disagree (visual-only {only_v}, text-only {only_t})")

    @property
    def ids(self):
        return sorted(self.visual)

    @property
    def n(self):
        return len(self.visual)


# ---------------------------------------------------------------------------
# embedding


def build_store(branch, text_embeddings, dataset, detections, crops, image_size,
                seed, variant="vt-lt"):
    """Embed every track with the given branch (eval mode, fixed seed per
    track) and pair it with the precomputed text side."""
    branch.eval()
    visual = {}
    with torch.no_grad():
        for track_idx, track in enumerate(dataset.tracks):
            rng = np.random.default_rng([int(seed), track_idx])
            emb = forward_visual(branch, track, detections.get(track.id, {}),
                                 crops, rng, image_size=image_size)
            visual[track.id] = emb.numpy().copy()
    text = {tid: np.asarray(arr) for tid, arr in text_embeddings.items()}
    return EmbeddingStore(visual=visual, text=text, variant=variant, seed=int(seed))


def embed_all(model_ckpt, text_ckpt, corpus, seed):
    """Load both checkpoints and embed the whole corpus deterministically."""
    branch, vis_cfg = load_visual_checkpoint(model_ckpt)
    enc, head, txt_cfg = load_text_checkpoint(text_ckpt)
    dataset, detections, crops, image_size = corpus_parts(corpus)
    mode = txt_cfg.get("mode", "lto")
    text_embeddings = frozen_text_embeddings(dataset, enc, head, mode)
    variant = vis_cfg.get("variant")
    if variant is None:
        visual_part = "vs" if branch.visual_mode == "vso" else "vt"
        text_part = "lt" if mode == "lto" else "ls"
        variant = f"{visual_part}-{text_part}"
    return build_store(branch, text_embeddings, dataset=dataset,
                       detections=detections, crops=crops, image_size=image_size,
                       seed=seed, variant=variant)


# ---------------------------------------------------------------------------
# ranking and scoring


def pair_score(store, visual_id, text_id, metric="euclidean"):
    """Aggregate-min distance between one track's visual embedding and
    another's text embedding."""
    D = distance_matrix(store.visual[visual_id], store.text[text_id], metric)
    return aggregate(D, "min")


def rank(store, direction="text_to_visual", metric="euclidean", descending=False):
    """Order every candidate for every query.

    text_to_visual treats each track's captions as the query and ranks all
    visual embeddings; visual_to_text is the transpose. Candidates sort by
    ascending distance (descending flips that), ties by ascending id.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}; choose from {DIRECTIONS}")
    if store.n == 0:
        raise EmptyStoreError("embedding store is empty")
    ids = store.ids
    orders = {}
    for qid in ids:
        scored = []
        for cid in ids:
            if direction == "text_to_visual":
                d = pair_score(store, cid, qid, metric)
            else:
                d = pair_score(store, qid, cid, metric)
            scored.append((-d if descending else d, cid))
        scored.sort()
        orders[qid] = [cid for _, cid in scored]
    return RankingTable.from_orders(orders)


def evaluate(store, direction="text_to_visual", metric="euclidean", seed=None,
             descending=False):
    """Rank and score against the identity pairing.

    Returns {"mrr", "top10", "ranks", "seed", "direction", "metric"};
    "ranks" is a histogram mapping rank (as a string, for JSON) to count.
    """
    table = rank(store, direction=direction, metric=metric, descending=descending)
    ranks = table.rank_of_truth
    hist = {}
    for r in sorted(ranks.values()):
        hist[str(r)] = hist.get(str(r), 0) + 1
    top10 = sum(1 for r in ranks.values() if r <= 10) / len(ranks)
    return {
        "mrr": mrr(table),
        "top10": top10,
        "ranks": hist,
        "seed": int(store.seed if seed is None else seed),
        "direction": direction,
        "metric": metric,
    }


# ---------------------------------------------------------------------------
# files


def write_submission(table, path):
    """JSON map query id -> full candidate ordering, keys sorted so equal
    tables produce byte-identical files."""
    payload = {qid: list(order) for qid, order in table.orders.items()}
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_submission(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_report(report, path):
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def resolve_store_path(path):
    """Accept either the store file itself or a directory containing one."""
    path = Path(path)
    if path.is_dir():
        return path / STORE_FILENAME
    return path


def save_store(store, path):
    """Persist both sides plus metadata; arrays stack in sorted-id order."""
    ids = store.ids
    if not ids:
        raise EmptyStoreError("refusing to save an empty store")
    visual = np.stack([store.visual[i] for i in ids])
    text = np.stack([store.text[i] for i in ids])
    config = {"ids": list(ids), "variant": store.variant, "seed": int(store.seed)}
    write_checkpoint(path, MAGIC_EMBED, config,
                     [("visual", visual), ("text", text)])


def load_store(path):
    path = resolve_store_path(path)
    _, config, arrays = read_checkpoint(path, expected_magic=MAGIC_EMBED)
    ids = config["ids"]
    visual = {tid: arrays["visual"][k] for k, tid in enumerate(ids)}
    text = {tid: arrays["text"][k] for k, tid in enumerate(ids)}
    return EmbeddingStore(visual=visual, text=text,
                          variant=config.get("variant", "vt-lt"),
                          seed=int(config.get("seed", 0)))
