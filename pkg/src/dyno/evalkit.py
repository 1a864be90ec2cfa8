"""Metrics and probing: foreground-adjusted Rand index for slot-object
binding, PSNR/SSIM for rollout frames, and the 10-bin linear-probing
protocol with a random-feature baseline.

All metrics are pure functions.  LPIPS and FVD are deliberately absent
(they need pretrained networks); report headers note the exclusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import encode_frames
from .tensor import Adam, Tensor, derive_seed, rng_for

PSNR_CAP_DB = 99.0
PROBE_PROPERTIES = ("mean_r", "mean_g", "mean_b", "x", "y", "area")
PROBE_FEATURES = ("slot", "static", "dynamic", "random")
EXCLUDED_METRICS = "LPIPS/FVD excluded (pretrained networks required)"


# -- segmentation ---------------------------------------------------------------


def attn_to_segmentation(attn, patch_size, image_hw):
    """Label each patch by its argmax slot and nearest-neighbor upsample to
    pixels.  np.argmax breaks ties toward the lowest slot index."""
    attn = np.asarray(attn)
    k, n = attn.shape
    side = image_hw // patch_size
    if side * side != n:
        raise ValueError(f"{n} patches do not tile a {image_hw}px frame at patch {patch_size}")
    patch_labels = np.argmax(attn, axis=0).reshape(side, side)
    return np.repeat(np.repeat(patch_labels, patch_size, axis=0), patch_size, axis=1)


def adjusted_rand_index(labels_a, labels_b):
    """ARI via the standard contingency-table formula."""
    a = np.asarray(labels_a).reshape(-1)
    b = np.asarray(labels_b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("label maps differ in size")
    n = a.size
    _, a_ids = np.unique(a, return_inverse=True)
    _, b_ids = np.unique(b, return_inverse=True)
    n_a = a_ids.max() + 1
    n_b = b_ids.max() + 1
    cont = np.zeros((n_a, n_b), dtype=np.int64)
    np.add.at(cont, (a_ids, b_ids), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(cont).sum()
    sum_rows = comb2(cont.sum(axis=1)).sum()
    sum_cols = comb2(cont.sum(axis=0)).sum()
    total = comb2(np.float64(n))
    expected = sum_rows * sum_cols / total if total > 0 else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def fg_ari(predicted, ground_truth):
    """Adjusted Rand index restricted to foreground pixels (gt label != 0)."""
    pred = np.asarray(predicted)
    gt = np.asarray(ground_truth)
    if pred.shape != gt.shape:
        raise ValueError(f"segmentation shapes differ: {pred.shape} vs {gt.shape}")
    fg = gt != 0
    if not fg.any():
        raise ValueError("empty foreground: no ground-truth object pixels")
    return adjusted_rand_index(pred[fg], gt[fg])


# -- image quality ---------------------------------------------------------------


def psnr(a, b, max_val=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(max_val * max_val / err))


def ssim(a, b, window=7, lum_range=1.0):
    """Mean local SSIM over valid uniform windows; inputs are grayscaled by
    channel mean first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a.mean(axis=-1)
        b = b.mean(axis=-1)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than {window}x{window} window")
    c1 = (0.01 * lum_range) ** 2
    c2 = (0.03 * lum_range) ** 2
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = (wa * wa).mean(axis=(-1, -2)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(-1, -2)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(score.mean())


# -- probing ---------------------------------------------------------------------


@dataclass
class ProbeData:
    features: dict          # kind -> (n, d) float32
    values: dict            # property -> (n,) float raw values
    labels: dict            # property -> (n,) int bin index
    bin_edges: dict         # property -> (bins+1,) float
    groups: np.ndarray      # (n,) int, one id per (episode, object)
    skipped: int


@dataclass
class ProbeTask:
    feature: str
    target: str
    bins: int = 10
    split: float = 0.8


def discretize(values, bins=10):
    """Equal-width bins over the observed range; returns (labels, edges)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        edges = np.linspace(lo, lo + 1.0, bins + 1)
        return np.zeros(values.shape, dtype=np.int64), edges
    edges = np.linspace(lo, hi, bins + 1)
    labels = np.clip(np.digitize(values, edges[1:-1]), 0, bins - 1)
    return labels.astype(np.int64), edges


def _object_patch_weights(mask, sprite_id, patch_size):
    h, w = mask.shape
    gh, gw = h // patch_size, w // patch_size
    tiles = (mask == sprite_id).reshape(gh, patch_size, gw, patch_size)
    return tiles.mean(axis=(1, 3)).reshape(-1)


def extract_probe_dataset(dataset, encoder, codec, disentangler, n_transitions,
                          run_seed, bins=10, batch=64):
    """Build the probing table: one row per visible (frame, object).

    Each ground-truth object is matched to the slot with the highest
    attention mass over the object's patches; rows record the slot vector,
    its static and dynamic features, and a fixed random vector drawn once
    per (episode, object) identity.  Property labels are 10-bin equal-width
    discretizations over the dataset range.  Objects with zero overlap on
    every slot are skipped and counted.
    """
    frames = [(e, t) for e, ep in enumerate(dataset.episodes) for t in range(ep.length + 1)]
    frames = frames[:n_transitions]
    rand_rng = rng_for(run_seed, "evalkit.random_features")
    rand_vectors = {}

    rows_feat = {k: [] for k in PROBE_FEATURES}
    rows_val = {p: [] for p in PROBE_PROPERTIES}
    groups = []
    skipped = 0

    for start in range(0, len(frames), batch):
        chunk = frames[start:start + batch]
        obs = np.stack([dataset.episodes[e].obs[t] for e, t in chunk])
        slots, attn = encode_frames(encoder, codec, obs)
        with T.no_grad():
            c_all, v_all = disentangler.split(Tensor(slots))
        c_all, v_all = c_all.data, v_all.data
        for i, (e, t) in enumerate(chunk):
            mask = dataset.episodes[e].masks[t]
            frame = dataset.episodes[e].obs[t]
            for sprite_id in np.unique(mask):
                if sprite_id == 0:
                    continue
                weights = _object_patch_weights(mask, sprite_id, codec.patch_size)
                scores = attn[i] @ weights
                if scores.max() <= 0.0:
                    skipped += 1
                    continue
                slot_idx = int(np.argmax(scores))
                pixels = mask == sprite_id
                ys, xs = np.nonzero(pixels)
                rgb = frame[pixels].mean(axis=0)

                key = (e, int(sprite_id))
                if key not in rand_vectors:
                    rand_vectors[key] = rand_rng.standard_normal(slots.shape[-1]).astype(np.float32)
                rows_feat["slot"].append(slots[i, slot_idx])
                rows_feat["static"].append(c_all[i, slot_idx])
                rows_feat["dynamic"].append(v_all[i, slot_idx])
                rows_feat["random"].append(rand_vectors[key])
                rows_val["mean_r"].append(float(rgb[0]))
                rows_val["mean_g"].append(float(rgb[1]))
                rows_val["mean_b"].append(float(rgb[2]))
                rows_val["x"].append(float(xs.mean()))
                rows_val["y"].append(float(ys.mean()))
                rows_val["area"].append(float(pixels.sum()))
                groups.append(key)

    group_ids = {g: i for i, g in enumerate(dict.fromkeys(groups))}
    labels, edges = {}, {}
    for prop in PROBE_PROPERTIES:
        labels[prop], edges[prop] = discretize(rows_val[prop], bins)
    return ProbeData(
        features={k: np.stack(v).astype(np.float32) for k, v in rows_feat.items()},
        values={p: np.asarray(v) for p, v in rows_val.items()},
        labels=labels,
        bin_edges=edges,
        groups=np.asarray([group_ids[g] for g in groups], dtype=np.int64),
        skipped=skipped,
    )


def _fit_logistic(x_train, y_train, x_test, y_test, classes, seed, lr=0.05, steps=300):
    rng = rng_for(seed, "evalkit.probe_init")
    d = x_train.shape[1]
    w = Tensor((rng.standard_normal((classes, d)) * 0.01).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True)
    xt = Tensor(x_train)
    idx = (np.arange(len(y_train)), y_train)
    opt = Adam([w, b], lr=lr)
    for _ in range(steps):
        logits = T.matmul(xt, w.transpose()) + b
        probs = T.softmax(logits, axis=-1)
        loss = -(T.log(probs[idx] + 1e-12).mean())
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    test_logits = x_test @ w.data.T + b.data
    return float((test_logits.argmax(axis=1) == y_test).mean())


def linear_probe(task, data, run_seed, seeds=3):
    """Multinomial logistic regression accuracy (% mean/std over seeds).

    The train/test split is disjoint at the object level: all rows of one
    (episode, object) identity land on the same side, so per-object random
    vectors cannot score above chance through memorization.
    """
    feats = data.features[task.feature]
    labels = data.labels[task.target]
    groups = data.groups
    if len(feats) < 100:
        raise ValueError(f"probe task needs >= 100 examples, got {len(feats)}")
    if len(np.unique(labels)) < 2:
        raise ValueError(f"degenerate probe target {task.target}: single class")

    accs = []
    unique_groups = np.unique(groups)
    for s in range(seeds):
        rng = rng_for(run_seed, "evalkit.probe_split", s)
        perm = rng.permutation(unique_groups)
        n_train = int(round(task.split * len(perm)))
        train_groups = set(perm[:n_train].tolist())
        train_mask = np.isin(groups, list(train_groups))
        x_train, y_train = feats[train_mask], labels[train_mask]
        x_test, y_test = feats[~train_mask], labels[~train_mask]
        if len(x_test) == 0 or len(x_train) == 0:
            raise ValueError("empty split; need more probe groups")
        mu = x_train.mean(axis=0)
        sd = x_train.std(axis=0) + 1e-6
        acc = _fit_logistic(((x_train - mu) / sd).astype(np.float32), y_train,
                            ((x_test - mu) / sd).astype(np.float32), y_test,
                            classes=task.bins, seed=derive_seed(run_seed, "evalkit.probe", s))
        accs.append(acc * 100.0)
    return float(np.mean(accs)), float(np.std(accs)), accs


def probe_report(data, run_seed, features=PROBE_FEATURES, targets=PROBE_PROPERTIES, seeds=3):
    """Accuracy table for every (feature kind, property) pair."""
    report = {}
    for feat in features:
        report[feat] = {}
        for prop in targets:
            mean, std, per_seed = linear_probe(ProbeTask(feat, prop), data, run_seed, seeds=seeds)
            report[feat][prop] = {"mean": round(mean, 2), "std": round(std, 2),
                                  "per_seed": [round(a, 2) for a in per_seed]}
    return report
