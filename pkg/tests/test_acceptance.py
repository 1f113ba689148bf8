"""Release gate: ten numbered checks covering the contracts the rest of the
suite samples piecemeal.

Each check records one `[acceptance] NN label: PASS/FAIL` line (echoed in the
terminal summary, see conftest) and enforces its own wall-clock budget. Run
them alone with `pytest tests/test_acceptance.py -v`.
"""

import functools
import time

import numpy as np
import torch

from ayce.config import get_preset
from ayce.data import compute_stats, corpus_parts
from ayce.metrics import aggregate, cosine_metric, distance_matrix, euclidean
from ayce.retrieval import build_store, evaluate, load_store, rank, save_store, write_submission
from ayce.synthetic import SyntheticSpec, calibrated_stats_spec, generate_synthetic
from ayce.text import (
    ProjectionHead,
    TextFinetuneConfig,
    ToySentenceEncoder,
    finetune_text,
    frozen_text_embeddings,
    load_text_checkpoint,
    save_text_checkpoint,
    triplet_margin_loss,
)
from ayce.training import (
    LossConfig,
    TrainConfig,
    TripletBatch,
    composite_loss,
    lr_at,
    mine_hard_negatives,
    neg_distance,
    phi,
    train_visual,
)
from ayce.transformer import sampling_aware_pe, sinusoidal_position_encoding
from ayce.visual import (
    EncoderConfig,
    VisualBranch,
    VisualInput,
    load_visual_checkpoint,
    save_visual_checkpoint,
)


ACCEPTANCE_LINES = []


def checked(number, label, budget_s):
    """Wrap a test: record one verdict line and enforce the time budget."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.monotonic()
            failure = None
            try:
                fn(*args, **kwargs)
            except BaseException as exc:  # record, then re-raise unchanged
                failure = exc
            elapsed = time.monotonic() - t0
            over = elapsed > budget_s
            status = "PASS" if failure is None and not over else "FAIL"
            line = (f"[acceptance] {number:02d} {label}: {status} "
                    f"({elapsed:.1f}s, budget {budget_s:.0f}s)")
            ACCEPTANCE_LINES.append(line)
            print(line)  # lands in the captured output a failure report shows
            if failure is not None:
                raise failure
            assert not over, f"{label}: {elapsed:.1f}s over the {budget_s:.0f}s budget"
        return wrapper
    return deco


# ---------------------------------------------------------------------------
# 01: closed-form loss values and the stepped learning-rate schedule


@checked(1, "exact-constants", budget_s=1.0)
def test_exact_loss_and_schedule_constants():
    # hinge fixtures, float64 end to end so the literals are hit exactly
    assert triplet_margin_loss([0.2], [0.5], margin=1.0).item() == 0.7
    assert triplet_margin_loss([0.2], [1.2], margin=1.0).item() == 0.0
    assert triplet_margin_loss([0.4], [0.4], margin=1.0).item() == 1.0

    # composite fixtures through 1-d embeddings: distances 0.2 / 0.5 are exact
    anchor = np.array([0.0])
    batch = TripletBatch(anchors=[anchor],
                         positives=[np.array([0.2])],
                         negatives=[np.array([0.5])])
    plain = LossConfig(margin=1.0, beta=0.0, metric="euclidean")
    pulled = LossConfig(margin=1.0, beta=0.1, metric="euclidean")
    assert composite_loss(batch, plain).item() == 0.7
    assert composite_loss(batch, pulled).item() == 0.72

    # separated pair with zero anchor-positive distance: loss vanishes
    apart = TripletBatch(anchors=[anchor],
                         positives=[np.array([0.0])],
                         negatives=[np.array([1.5])])
    assert composite_loss(apart, plain).item() == 0.0

    cfg = TrainConfig()
    assert lr_at(0, cfg) == 3.5e-5
    assert lr_at(449, cfg) == 3.5e-5
    assert lr_at(450, cfg) == 2.5e-5
    assert lr_at(651, cfg) == 1.5e-5


# ---------------------------------------------------------------------------
# 02: the cosine metric's range, endpoints, and invariances


@checked(2, "metric-properties", budget_s=5.0)
def test_cosine_metric_range_and_invariances():
    assert cosine_metric([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert cosine_metric([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert cosine_metric([2.0, 0.0], [-3.0, 0.0]) == 2.0

    rng = np.random.default_rng(20250202)
    for _ in range(10_000):
        dim = int(rng.integers(2, 17))
        u = rng.standard_normal(dim)
        v = rng.standard_normal(dim)
        d = cosine_metric(u, v)
        assert 0.0 <= d <= 2.0
        assert abs(cosine_metric(v, u) - d) <= 1e-12
        a = 10.0 ** rng.uniform(-3, 3)
        b = 10.0 ** rng.uniform(-3, 3)
        assert abs(cosine_metric(a * u, b * v) - d) <= 1e-12


# ---------------------------------------------------------------------------
# 03: aggregated distances and mining against brute-force enumeration


@checked(3, "aggregation-oracle", budget_s=10.0)
def test_distance_aggregation_and_mining_match_bruteforce():
    metrics = {"euclidean": euclidean, "cosine": cosine_metric}
    rng = np.random.default_rng(30303)

    # the three deployed output-arity pairings: 3x3, 1x3, 1x1
    for r, c in ((3, 3), (1, 3), (1, 1)):
        for _ in range(1000):
            dim = int(rng.integers(4, 33))
            V = rng.standard_normal((r, dim))
            T = rng.standard_normal((c, dim))
            name = ("euclidean", "cosine")[int(rng.integers(2))]
            fn = metrics[name]
            brute = np.array([[fn(V[m], T[n]) for n in range(c)] for m in range(r)])
            cfg = LossConfig(metric=name)
            assert phi(V, T, cfg) == float(np.min(brute))
            assert neg_distance(V, T, cfg) == float(np.mean(brute))
            D = distance_matrix(V, T, name)
            assert np.array_equal(D, brute)
            assert aggregate(D, "min") == float(np.min(brute))
            assert aggregate(D, "mean") == float(np.mean(brute))

    # mining: farthest candidate by aggregate-mean, ties to the lowest index
    for case in range(200):
        n = int(rng.integers(2, 9))
        arity_a = (1, 3)[int(rng.integers(2))]
        arity_t = (1, 3)[int(rng.integers(2))]
        dim = int(rng.integers(4, 17))
        anchors = [rng.standard_normal((arity_a, dim)) for _ in range(n)]
        texts = [rng.standard_normal((arity_t, dim)) for _ in range(n)]
        name = ("euclidean", "cosine")[case % 2]
        cfg = LossConfig(metric=name)
        if n >= 3 and case % 3 == 0:
            track_ids = [f"t{j // 2}" for j in range(n)]  # adjacent duplicates
        else:
            track_ids = [f"t{j}" for j in range(n)]
        expected = []
        for i in range(n):
            best, best_d = -1, -np.inf
            for j in range(n):
                if j == i or track_ids[j] == track_ids[i]:
                    continue
                d = neg_distance(anchors[i], texts[j], cfg)
                if d > best_d:
                    best, best_d = j, d
            expected.append(best)
        got = mine_hard_negatives(anchors, texts, cfg, track_ids=track_ids)
        assert got == expected


# ---------------------------------------------------------------------------
# 04: padding and ordering must be invisible to the encoders


@checked(4, "masking-invariance", budget_s=60.0)
def test_masking_and_permutation_invariance():
    dims = ((8, 2), (8, 4), (16, 2), (16, 4))
    for i in range(100):
        rng = np.random.default_rng([4, i])
        d_model, n_heads = dims[int(rng.integers(len(dims)))]
        m = int(rng.integers(2, 6))
        n_obj = int(rng.integers(1, 5))
        branch = VisualBranch(
            EncoderConfig(n_blocks=1, n_heads=n_heads, d_model=d_model,
                          d_ff=2 * d_model, dropout_p=0.0),
            visual_mode="vto", seed=i)
        branch.eval()

        x = torch.from_numpy(rng.standard_normal((m, n_obj + 1, d_model))).float()
        obj_mask = torch.from_numpy(
            rng.random((m, n_obj + 1)) < 0.7)
        obj_mask[:, 0] = True  # the tracked vehicle always occupies slot 0

        with torch.no_grad():
            pooled = branch.spatial_encode(x, obj_mask)

            # permuting the object axis (data and mask together) changes nothing
            perm = torch.from_numpy(rng.permutation(n_obj + 1))
            pooled_perm = branch.spatial_encode(x[:, perm], obj_mask[:, perm])
            assert torch.allclose(pooled, pooled_perm, atol=1e-5)

            # appending masked zero slots changes nothing
            extra = int(rng.integers(1, 4))
            x_pad = torch.cat([x, torch.zeros(m, extra, d_model)], dim=1)
            mask_pad = torch.cat(
                [obj_mask, torch.zeros(m, extra, dtype=torch.bool)], dim=1)
            pooled_pad = branch.spatial_encode(x_pad, mask_pad)
            assert torch.allclose(pooled, pooled_pad, atol=1e-5)

            # appending masked frames must not disturb the real rows
            h = torch.from_numpy(rng.standard_normal((m, d_model))).float()
            frame_mask = torch.ones(m, dtype=torch.bool)
            idx = np.sort(rng.choice(50, size=m, replace=False))
            out = branch.temporal_encode(h, frame_mask, idx)

            pad_frames = int(rng.integers(1, 4))
            h_pad = torch.cat([h, torch.zeros(pad_frames, d_model)], dim=0)
            mask_more = torch.cat(
                [frame_mask, torch.zeros(pad_frames, dtype=torch.bool)])
            idx_pad = np.concatenate(
                [idx, idx[-1] + 1 + np.arange(pad_frames)])
            out_pad = branch.temporal_encode(h_pad, mask_more, idx_pad)
            assert torch.allclose(out, out_pad[:m], atol=1e-5)

            # same for the three decoded query rows
            decoded = branch.vto_head(out, frame_mask)
            decoded_pad = branch.vto_head(out_pad, mask_more)
            assert decoded.shape == (3, d_model)
            assert torch.allclose(decoded, decoded_pad, atol=1e-5)


# ---------------------------------------------------------------------------
# 05: frame-index-aware position rows match the canonical table


@checked(5, "sampling-aware-positions", budget_s=1.0)
def test_sampling_aware_positions_match_canonical_table():
    for m, d_model in ((7, 16), (80, 64), (33, 256)):
        contiguous = sampling_aware_pe(np.arange(m), d_model)
        canonical = sinusoidal_position_encoding(np.arange(m), d_model)
        assert torch.equal(contiguous, canonical)

    table = sinusoidal_position_encoding(np.arange(501), 64)
    rng = np.random.default_rng(55)
    for _ in range(20):
        k = int(rng.integers(1, 40))
        idx = np.sort(rng.choice(501, size=k, replace=False))
        gathered = sampling_aware_pe(idx, 64)
        assert torch.equal(gathered, table[torch.from_numpy(idx)])


# ---------------------------------------------------------------------------
# 06: analytic gradients against central finite differences


def _gradcheck_inputs(seed):
    """A fixed double-precision forward fixture with every loss term active."""
    rng = np.random.default_rng(seed)
    inputs = []
    for m, slots, indices in ((3, 3, (0, 2, 5)), (2, 2, (1, 4))):
        data = torch.from_numpy(0.3 * rng.standard_normal((m, slots, 261)))
        obj_mask = torch.from_numpy(rng.random((m, slots)) < 0.8)
        obj_mask[:, 0] = True
        vi = VisualInput(data=data.float(),
                         frame_indices=np.asarray(indices, dtype=np.int64),
                         obj_mask=obj_mask,
                         frame_mask=torch.ones(m, dtype=torch.bool))
        crops = torch.from_numpy(rng.random((m, 3, 12, 16)))
        inputs.append((vi, crops))
    return inputs


@checked(6, "finite-difference-gradients", budget_s=120.0)
def test_composite_loss_gradients_match_finite_differences():
    branch = VisualBranch(
        EncoderConfig(n_blocks=2, n_heads=4, d_model=64, d_ff=256, dropout_p=0.0),
        visual_mode="vto", seed=6)
    branch.double()
    branch.eval()
    inputs = _gradcheck_inputs(606)
    cfg = LossConfig(margin=1.0, beta=0.1, metric="euclidean")
    rng = np.random.default_rng(66)

    with torch.no_grad():
        frozen = [branch(vi, crops).numpy() for vi, crops in inputs]
    # positives far and negatives near keeps the hinge strictly active and
    # the min-aggregation's argmin unique (no kinks within the probe step)
    positives = [a + 0.8 * rng.standard_normal(a.shape) for a in frozen]
    negatives = [a + 0.1 * rng.standard_normal(a.shape) for a in frozen]

    def compute_loss():
        anchors = [branch(vi, crops) for vi, crops in inputs]
        batch = TripletBatch(anchors=anchors, positives=positives,
                             negatives=negatives)
        return composite_loss(batch, cfg)

    for a, p, n in zip(frozen, positives, negatives):
        pairs = np.sort([euclidean(a[i], p[j])
                         for i in range(a.shape[0]) for j in range(p.shape[0])])
        assert pairs[1] - pairs[0] > 1e-3  # unique argmin
        assert pairs[0] - neg_distance(a, n, cfg) + cfg.margin > 1e-2  # hinge on

    loss = compute_loss()
    branch.zero_grad()
    loss.backward()

    named = [(name, p) for name, p in branch.named_parameters()]
    checked_params = 0
    attempts = 0
    eps = 1e-6
    while checked_params < 24 and attempts < 200:
        attempts += 1
        name, p = named[int(rng.integers(len(named)))]
        flat = int(rng.integers(p.numel()))
        analytic = float(p.grad.view(-1)[flat])
        if abs(analytic) < 1e-7:
            continue  # dead direction: both sides would be pure noise
        with torch.no_grad():
            orig = float(p.view(-1)[flat])
            p.view(-1)[flat] = orig + eps
            up = compute_loss().item()
            p.view(-1)[flat] = orig - eps
            down = compute_loss().item()
            p.view(-1)[flat] = orig
        fd = (up - down) / (2 * eps)
        rel = abs(fd - analytic) / max(1e-8, abs(fd) + abs(analytic))
        assert rel < 1e-3, f"{name}[{flat}]: analytic {analytic}, fd {fd}, rel {rel}"
        checked_params += 1
    assert checked_params >= 20, f"only {checked_params} usable probes"


# ---------------------------------------------------------------------------
# 07: fine-tuning pulls caption triplets together and pushes tracks apart


@checked(7, "text-finetuning-separation", budget_s=180.0)
def test_text_finetuning_separates_tracks():
    corpus = generate_synthetic(SyntheticSpec(n_tracks=64), 777,
                                include_detections=False, include_crops=False)
    enc = ToySentenceEncoder.from_dataset(corpus.dataset, seed=0, width=128)
    head = ProjectionHead(width=128, seed=1)
    cfg = TextFinetuneConfig(margin=1.5, epochs=120, batch_size=16,
                             lr=0.05, seed=0)
    _, _, history = finetune_text(corpus.dataset, enc, head, cfg)

    initial = history[0].report
    final = history[-1].report
    assert history[0].epoch == 0 and history[-1].epoch == cfg.epochs
    assert final.d_intra_mean < 0.5 * final.d_inter_mean, (
        f"intra {final.d_intra_mean:.5f} vs inter {final.d_inter_mean:.5f}")
    assert final.d_intra_mean < initial.d_intra_mean, (
        f"final intra {final.d_intra_mean:.5f} did not drop below "
        f"initial {initial.d_intra_mean:.5f}")


# ---------------------------------------------------------------------------
# 08: the whole pipeline on a toy corpus must actually retrieve


# seeds for the run this check reproduces
CORPUS_SEED = 20240817
TEXT_SEED = 0
TRAIN_SEED = 11
EVAL_SEED = 1234


@checked(8, "end-to-end-retrieval", budget_s=900.0)
def test_toy_corpus_retrieval_end_to_end():
    corpus = generate_synthetic(SyntheticSpec(n_tracks=32), CORPUS_SEED)

    enc = ToySentenceEncoder.from_dataset(corpus.dataset, seed=TEXT_SEED)
    head = ProjectionHead(seed=TEXT_SEED + 1)
    text_cfg = TextFinetuneConfig(margin=1.5, epochs=120, batch_size=16,
                                  lr=0.05, seed=TEXT_SEED)
    enc, head, _ = finetune_text(corpus.dataset, enc, head, text_cfg)
    table = frozen_text_embeddings(corpus.dataset, enc, head, "lto")

    desk = get_preset("desk")
    branch, history = train_visual(
        corpus, table, variant="vt-lt",
        loss_cfg=LossConfig(**desk["loss"]),
        train_cfg=TrainConfig(epochs=200,
                              batch_size=desk["train"]["batch_size"],
                              lr=desk["train"]["lr"],
                              milestones=desk["train"]["milestones"],
                              seed=TRAIN_SEED),
        encoder_config=EncoderConfig(**{k: v for k, v in desk["model"].items()
                                        if k != "crop_size"}),
        crop_size=tuple(desk["model"]["crop_size"]))
    assert len(history) == 200

    dataset, detections, crops, image_size = corpus_parts(corpus)
    store = build_store(branch, table, dataset=dataset, detections=detections,
                        crops=crops, image_size=image_size, seed=EVAL_SEED,
                        variant="vt-lt")
    report = evaluate(store, direction="text_to_visual", metric="euclidean")
    assert report["seed"] == EVAL_SEED
    # random ordering over 32 candidates would sit near 0.127
    assert report["mrr"] >= 0.5, f"mrr {report['mrr']:.4f}"
    assert report["top10"] == 1.0, f"top10 {report['top10']:.4f}"


# ---------------------------------------------------------------------------
# 09: generated caption statistics stay on calibration


@checked(9, "synthetic-calibration", budget_s=30.0)
def test_synthetic_statistics_match_calibration():
    spec = calibrated_stats_spec(n_tracks=1000)
    corpus = generate_synthetic(spec, 4242, include_detections=False,
                                include_crops=False)
    stats = compute_stats(corpus.dataset, corpus.caption_attributes)
    assert stats.n_tracks == 1000
    assert abs(stats.distinct_types_mean - 2.07) <= 0.3
    assert abs(stats.distinct_colors_mean - 1.85) <= 0.3
    assert abs(stats.distinct_actions_mean - 2.63) <= 0.3


# ---------------------------------------------------------------------------
# 10: checkpoints, stores, and submission files round-trip bit for bit


@checked(10, "determinism-round-trip", budget_s=60.0)
def test_checkpoint_and_submission_round_trips(tmp_path):
    spec = SyntheticSpec(
        n_tracks=8,
        frame_len={"kind": "uniform", "low": 3, "high": 6},
        crop_size=(24, 20),
        distractors={"kind": "uniform", "low": 1, "high": 2},
    )
    corpus = generate_synthetic(spec, 1234)
    dataset, detections, crops, image_size = corpus_parts(corpus)

    enc = ToySentenceEncoder.from_dataset(dataset, seed=3, width=16)
    head = ProjectionHead(width=16, seed=4)
    save_text_checkpoint(enc, head, tmp_path / "text.ckpt", mode="lto")
    enc2, head2, _ = load_text_checkpoint(tmp_path / "text.ckpt")
    table = frozen_text_embeddings(dataset, enc, head, "lto")
    table2 = frozen_text_embeddings(dataset, enc2, head2, "lto")
    assert sorted(table) == sorted(table2)
    for tid in table:
        assert table[tid].dtype == table2[tid].dtype
        assert np.array_equal(table[tid], table2[tid])

    branch = VisualBranch(
        EncoderConfig(n_blocks=1, n_heads=2, d_model=16, d_ff=32, dropout_p=0.1),
        visual_mode="vto", crop_size=(24, 20), seed=5)
    save_visual_checkpoint(branch, tmp_path / "model.ckpt",
                           extra_config={"variant": "vt-lt"})
    branch2, _ = load_visual_checkpoint(tmp_path / "model.ckpt")

    store = build_store(branch, table, dataset=dataset, detections=detections,
                        crops=crops, image_size=image_size, seed=77)
    store2 = build_store(branch2, table2, dataset=dataset, detections=detections,
                         crops=crops, image_size=image_size, seed=77)
    for tid in store.ids:
        assert np.array_equal(store.visual[tid], store2.visual[tid])
        assert np.array_equal(store.text[tid], store2.text[tid])

    save_store(store, tmp_path / "store_a")
    loaded = load_store(tmp_path / "store_a")
    for tid in store.ids:
        assert np.array_equal(store.visual[tid], loaded.visual[tid])
        assert np.array_equal(store.text[tid], loaded.text[tid])

    write_submission(rank(store), tmp_path / "sub_a.json")
    write_submission(rank(store2), tmp_path / "sub_b.json")
    a = (tmp_path / "sub_a.json").read_bytes()
    b = (tmp_path / "sub_b.json").read_bytes()
    assert a == b and len(a) > 0
