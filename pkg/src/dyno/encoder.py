"""Object-centric encoder: iterative slot attention over patch features with
optional mask guidance, a logarithmic mask-dropout schedule, and a
spatial-broadcast slot decoder trained on feature + pixel reconstruction.

Slots compete for patches through a softmax over the slot axis; during
guided batches a binary patch mask pins each slot to its object's patches
by filling all other logits with the dtype's most negative finite value,
which lands as exactly zero attention after the softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, GRUCell, LayerNorm, Linear, Module, token_init
from .tensor import Adam, ShapeError, Tensor, no_grad, rng_for


@dataclass
class MaskSchedule:
    """Progress of the mask dropout: p(drop) = log(1+done) / log(1+total)."""

    updates_done: int
    total_updates: int

    def __post_init__(self):
        if self.total_updates < 1:
            raise ValueError("total_updates must be >= 1")
        if not 0 <= self.updates_done <= self.total_updates:
            raise ValueError("updates_done outside [0, total_updates]")

    def drop_prob(self):
        return math.log1p(self.updates_done) / math.log1p(self.total_updates)

    def advance(self):
        self.updates_done = min(self.updates_done + 1, self.total_updates)


def mask_drop_prob(schedule):
    return schedule.drop_prob()


def pixel_mask_to_patch_mask(gt_mask, num_slots, patch_size, threshold=0.125):
    """Reduce an id-labeled pixel mask to a slot x patch binary mask.

    A patch belongs to slot k when at least ``threshold`` of its pixels carry
    label k; patches claimed by nobody fall back to the background slot 0.
    """
    mask = np.asarray(gt_mask)
    squeeze = mask.ndim == 2
    if squeeze:
        mask = mask[None]
    if mask.max(initial=0) >= num_slots:
        raise ValueError(f"mask label {mask.max()} >= slot count {num_slots}")
    b, h, w = mask.shape
    p = patch_size
    gh, gw = h // p, w // p
    tiles = mask.reshape(b, gh, p, gw, p)
    out = np.zeros((b, num_slots, gh * gw), dtype=bool)
    for k in range(num_slots):
        frac = (tiles == k).mean(axis=(2, 4))
        out[:, k] = (frac >= threshold).reshape(b, -1)
    unclaimed = ~out.any(axis=1)
    out[:, 0] |= unclaimed
    return out[0] if squeeze else out


class SlotAttention(Module):
    def __init__(self, d_in, d_slot, hidden, rng, eps=1e-8, dtype=np.float32):
        self.norm_inputs = LayerNorm(d_in, dtype=dtype)
        self.norm_slots = LayerNorm(d_slot, dtype=dtype)
        self.norm_mlp = LayerNorm(d_slot, dtype=dtype)
        self.to_q = Linear(d_slot, d_slot, rng, bias=False, dtype=dtype)
        self.to_k = Linear(d_in, d_slot, rng, bias=False, dtype=dtype)
        self.to_v = Linear(d_in, d_slot, rng, bias=False, dtype=dtype)
        self.gru = GRUCell(d_slot, d_slot, rng, dtype=dtype)
        self.mlp = MLP([d_slot, hidden, d_slot], rng, dtype=dtype)
        self.d_slot = d_slot
        self.eps = eps

    def __call__(self, slots, feats, mask=None, iters=3):
        """slots (B,K,d_z), feats (B,N,d_in), mask (B,K,N) binary or None.

        Returns final slots and the final-iteration attention (B,K,N), whose
        patch columns sum to one.
        """
        if iters < 1:
            raise ValueError("iters must be >= 1")
        b, k, d = slots.shape
        n = feats.shape[-2]
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.ndim == 2:
                mask = np.broadcast_to(mask, (b,) + mask.shape)
            if mask.shape != (b, k, n):
                raise ShapeError("slot_attention/mask", mask.shape, (b, k, n))
        f_n = self.norm_inputs(feats)
        keys = self.to_k(f_n)
        vals = self.to_v(f_n)
        scale = 1.0 / math.sqrt(self.d_slot)
        attn = None
        for _ in range(iters):
            slots_prev = slots
            q = self.to_q(self.norm_slots(slots))
            logits = T.matmul(q, T.transpose(keys, (0, 2, 1))) * scale
            if mask is not None:
                logits = T.masked_fill(logits, mask)
            attn = T.softmax(logits, axis=1)  # slots compete per patch
            weights = attn / (attn.sum(axis=2, keepdims=True) + self.eps)
            updates = T.matmul(weights, vals)
            slots = self.gru(updates.reshape(b * k, d), slots_prev.reshape(b * k, d)).reshape(b, k, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn


class SlotDecoder(Module):
    """Spatial-broadcast decoder: slot -> per-position features + alpha logit,
    alpha-softmaxed across slots into one reconstructed feature map."""

    def __init__(self, d_slot, d_out, num_positions, hidden, rng, dtype=np.float32):
        self.pos = Tensor(token_init(rng, (num_positions, d_slot), dtype), requires_grad=True)
        self.mlp = MLP([d_slot, hidden, hidden, d_out + 1], rng, dtype=dtype)
        self.d_out = d_out

    def __call__(self, slots):
        b, k, d = slots.shape
        n = self.pos.shape[0]
        grid = slots.reshape(b, k, 1, d) + self.pos
        out = self.mlp(grid)  # (B, K, N, d_out + 1)
        feats = out[..., : self.d_out]
        alpha = T.softmax(out[..., self.d_out:], axis=1)
        recon = (alpha * feats).sum(axis=1)
        return recon, alpha.reshape(b, k, n)


class SlotEncoder(Module):
    """Slot attention plus decoder.  The patch codec is positionless by
    construction, so a learned position embedding is added to the incoming
    features; without it the attention's weighted mean erases all location
    information and slots cannot carry where their object is."""

    def __init__(self, num_slots, d_slot, d_feat, num_positions, hidden, rng,
                 iters=3, eps=1e-8, dtype=np.float32):
        self.z_init = Tensor(token_init(rng, (num_slots, d_slot), dtype), requires_grad=True)
        self.feat_pos = Tensor(token_init(rng, (num_positions, d_feat), dtype), requires_grad=True)
        self.attention = SlotAttention(d_feat, d_slot, hidden, rng, eps=eps, dtype=dtype)
        self.decoder = SlotDecoder(d_slot, d_feat, num_positions, hidden, rng, dtype=dtype)
        self.num_slots = num_slots
        self.d_slot = d_slot
        self.iters = iters

    def initial_slots(self, batch):
        b = Tensor(np.ones((batch, 1, 1), dtype=self.z_init.data.dtype))
        return self.z_init.reshape(1, self.num_slots, self.d_slot) * b

    def encode(self, feats, mask=None, iters=None):
        slots0 = self.initial_slots(feats.shape[0])
        return self.attention(slots0, feats + self.feat_pos, mask=mask,
                              iters=self.iters if iters is None else iters)

    def decode(self, slots):
        return self.decoder(slots)


def encoder_loss(obs, feats, recon_feats, codec):
    """Reconstruction objective: mean squared error in feature space plus mean
    squared error in pixel space after decoding through the frozen codec."""
    if feats.shape != recon_feats.shape:
        raise ShapeError("encoder_loss", feats.shape, recon_feats.shape)
    feat_term = T.mse(recon_feats, feats if isinstance(feats, Tensor) else Tensor(feats))
    recon_obs = codec.defeaturize(recon_feats, image_hw=obs.shape[-2])
    pixel_term = T.mse(recon_obs, obs if isinstance(obs, Tensor) else Tensor(obs))
    return feat_term + pixel_term, feat_term, pixel_term


@dataclass
class EncoderTrainConfig:
    num_slots: int = 7
    d_slot: int = 64
    hidden: int = 128
    iters: int = 3
    lr: float = 4e-4
    batch: int = 32
    total_updates: int = 6000
    attn_eps: float = 1e-8


def build_encoder(cfg, codec, image_hw, run_seed, dtype=np.float32):
    _, n = codec.grid(image_hw)
    rng = rng_for(run_seed, "encoder.init")
    return SlotEncoder(
        num_slots=cfg.num_slots,
        d_slot=cfg.d_slot,
        d_feat=codec.feature_dim,
        num_positions=n,
        hidden=cfg.hidden,
        rng=rng,
        iters=cfg.iters,
        eps=cfg.attn_eps,
        dtype=dtype,
    )


def train_encoder(dataset, codec, cfg, run_seed, mask_mode="scheduled",
                  encoder=None, schedule=None, log=None, max_updates=None):
    """Train slot attention + decoder on dataset frames.

    mask_mode: "scheduled" draws one Bernoulli(drop_prob) per batch and guides
    the batch with ground-truth patch masks unless it fires; "never" trains
    without masks from step 0 (the unguided ablation); "always" keeps the mask
    on for every batch (the oracle regime).  The schedule advances once per
    update in every mode so paired runs stay step-aligned.
    """
    if mask_mode not in ("scheduled", "never", "always"):
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    if not dataset.episodes:
        raise ValueError("dataset is empty")
    if encoder is None:
        encoder = build_encoder(cfg, codec, dataset.image_hw, run_seed)
    if schedule is None:
        schedule = MaskSchedule(0, cfg.total_updates)

    frames = [(e, t) for e, ep in enumerate(dataset.episodes) for t in range(ep.length + 1)]
    # streams keyed to schedule progress so a resumed run continues instead
    # of replaying the same batches
    batch_rng = rng_for(run_seed, "encoder.batches", schedule.updates_done)
    drop_rng = rng_for(run_seed, "encoder.mask_dropout", schedule.updates_done)
    opt = Adam(encoder.parameters(), lr=cfg.lr)
    curve = []

    limit = schedule.total_updates if max_updates is None else min(
        schedule.total_updates, schedule.updates_done + max_updates)
    while schedule.updates_done < limit:
        picks = batch_rng.integers(0, len(frames), size=cfg.batch)
        obs = np.stack([dataset.episodes[frames[i][0]].obs[frames[i][1]] for i in picks])
        drop = drop_rng.uniform() < schedule.drop_prob()
        if mask_mode == "never":
            use_mask = False
        elif mask_mode == "always":
            use_mask = True
        else:
            use_mask = not drop
        mask = None
        if use_mask:
            gt = np.stack([dataset.episodes[frames[i][0]].masks[frames[i][1]] for i in picks])
            mask = pixel_mask_to_patch_mask(gt, cfg.num_slots, codec.patch_size)

        obs_t = Tensor(obs)
        feats = codec.featurize(obs_t)  # codec is frozen: no grad path into it
        slots, _ = encoder.encode(feats, mask=mask)
        recon, _ = encoder.decode(slots)
        total, feat_term, pixel_term = encoder_loss(obs_t, feats, recon, codec)

        opt.zero_grad()
        T.backward(total)
        opt.step()
        schedule.advance()
        curve.append(total.item())
        if log is not None and (schedule.updates_done % 100 == 0 or schedule.updates_done == 1):
            log(update=schedule.updates_done, loss=float(total.item()),
                feature=float(feat_term.item()), pixel=float(pixel_term.item()),
                drop_prob=schedule.drop_prob(), masked=bool(use_mask))
    return encoder, schedule, curve


def encode_frames(encoder, codec, obs_batch, iters=None):
    """Inference-time encoding (no mask, no graph): slots and attention maps."""
    with no_grad():
        obs_t = Tensor(np.asarray(obs_batch, dtype=np.float32))
        feats = codec.featurize(obs_t)
        slots, attn = encoder.encode(feats, mask=None, iters=iters)
    return slots.data, attn.data
