"""Static/dynamic slot feature decomposition.

Each slot vector z splits into a static part c = M_c(z), trained for time
invariance plus an InfoNCE term against other slots, and a dynamic part
v = M_v(z), trained to reconstruct z through M_z(sg(c), v) while fooling a
Wasserstein critic that scores whether a (c, v) pair came from the same
slot.  The stop-gradient keeps the reconstruction loss away from M_c, and
the reconstruction/disentanglement gradients on M_v are merged with
projection-based conflict removal before the optimizer sees them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import MLP, Module
from .tensor import ShapeError, Tensor, backward, no_grad, stop_gradient


class FeatureSplit(Module):
    """M_c and M_v: two independent 2-layer maps applied per slot."""

    def __init__(self, d_slot, d_static, d_dynamic, hidden, rng, dtype=np.float32):
        self.m_c = MLP([d_slot, hidden, d_static], rng, dtype=dtype)
        self.m_v = MLP([d_slot, hidden, d_dynamic], rng, dtype=dtype)

    def __call__(self, z):
        return self.m_c(z), self.m_v(z)


class Recombiner(Module):
    """M_z: 2-layer map from concat(static, dynamic) back to a slot vector.

    The caller passes the static half *already stop-gradiented* when training;
    ``recombine`` below does that wiring.
    """

    def __init__(self, d_slot, d_static, d_dynamic, hidden, rng, dtype=np.float32):
        self.m_z = MLP([d_static + d_dynamic, hidden, d_slot], rng, dtype=dtype)

    def __call__(self, c, v):
        return self.m_z(T.concat([c, v], axis=-1))


def recombine(recombiner, c, v):
    """z_hat = M_z(sg(c), v): zero gradient reaches M_c through this path."""
    return recombiner(stop_gradient(c) if isinstance(c, Tensor) and c.requires_grad else c, v)


class Critic(Module):
    """3-layer scorer on concat(c, v); raw linear output, Wasserstein style."""

    def __init__(self, d_static, d_dynamic, hidden, rng, dtype=np.float32):
        self.net = MLP([d_static + d_dynamic, hidden, hidden, 1], rng, dtype=dtype)

    def __call__(self, c, v):
        return self.net(T.concat([c, v], axis=-1))


@dataclass
class CriticState:
    """Critic plus the LeCam anchors: EMAs of its scores on matched (real)
    and mismatched (fake) pairs, updated only by critic steps."""

    critic: Critic
    ema_decay: float = 0.99
    lecam_weight: float = 0.01
    alpha_real: float = 0.0
    alpha_fake: float = 0.0


class Disentangler(Module):
    def __init__(self, d_slot, d_static, d_dynamic, hidden, rng, tau=0.1,
                 ema_decay=0.99, lecam_weight=0.01, dtype=np.float32):
        self.split = FeatureSplit(d_slot, d_static, d_dynamic, hidden, rng, dtype=dtype)
        self.recombiner = Recombiner(d_slot, d_static, d_dynamic, hidden, rng, dtype=dtype)
        self.critic = Critic(d_static, d_dynamic, hidden, rng, dtype=dtype)
        self.critic_state = CriticState(self.critic)
        self.tau = tau
        self.critic_state.ema_decay = ema_decay
        self.critic_state.lecam_weight = lecam_weight
        self.d_static = d_static
        self.d_dynamic = d_dynamic


def static_loss(c, tau=0.1):
    """Time-invariance plus InfoNCE over a trajectory window of static features.

    c has shape (B, T, K, d_c) with T >= 2.  The invariance term averages the
    squared difference over all ordered timestep pairs per slot.  For each
    anchor (b, t, k) the positive is the same slot at the next timestep
    (cyclic) and the negatives are the other K-1 slots of the same frame;
    similarity is exp(cos(a, b) / tau).
    """
    b, t, k, d = c.shape
    if t < 2:
        raise ValueError("static_loss needs a window of at least 2 timesteps")
    c1 = c.reshape(b, t, 1, k, d)
    c2 = c.reshape(b, 1, t, k, d)
    diff = c1 - c2
    pair_count = b * t * (t - 1) * k
    invariance = (diff * diff).sum() * (1.0 / (pair_count * d))

    norm = T.sqrt((c * c).sum(axis=-1, keepdims=True) + 1e-8)
    cn = c / norm
    cos_all = T.matmul(cn, cn.transpose(0, 1, 3, 2))          # (B,T,K,K)
    cos_pos = (cn * T.concat([cn[:, 1:], cn[:, :1]], axis=1)).sum(axis=-1)  # (B,T,K)
    off_diag = Tensor((1.0 - np.eye(k, dtype=c.data.dtype)))
    neg_sum = (T.exp(cos_all * (1.0 / tau)) * off_diag).sum(axis=-1)
    pos_score = T.exp(cos_pos * (1.0 / tau))
    contrastive = (T.log(pos_score + neg_sum) - cos_pos * (1.0 / tau)).mean()
    total = invariance + contrastive
    return total, invariance, contrastive


def critic_score(critic, c, v):
    return critic(c, v)


def critic_loss(state, c, v):
    """Wasserstein discrimination plus LeCam regularization on one batch.

    c, v are matched per row (same slot); the mismatched pairing rolls v one
    slot over the last-but-one axis.  Only critic parameters sit upstream of
    the returned loss: inputs are detached here.  The LeCam EMAs are updated
    from the batch means after the loss is formed.
    """
    c = stop_gradient(c) if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float32))
    v = stop_gradient(v) if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float32))
    if c.shape[:-1] != v.shape[:-1]:
        raise ShapeError("critic_loss", c.shape, v.shape)
    if c.data.shape[-2] < 2:
        raise ValueError("critic_loss needs at least 2 slots to mismatch")
    v_mis = Tensor(np.roll(v.data, 1, axis=-2))

    same = state.critic(c, v)
    mis = state.critic(c, v_mis)
    wasserstein = (mis - same).mean()
    lam = state.lecam_weight
    lecam = ((same - state.alpha_fake) ** 2.0).mean() + ((mis - state.alpha_real) ** 2.0).mean()
    total = wasserstein + lecam * lam

    d = state.ema_decay
    state.alpha_real = d * state.alpha_real + (1.0 - d) * float(same.data.mean())
    state.alpha_fake = d * state.alpha_fake + (1.0 - d) * float(mis.data.mean())
    return total, wasserstein, lecam


def dynamic_loss(dis, z):
    """Reconstruction + disentanglement objective for M_v (and M_z).

    Returns (total, rec_term, dis_term, grads_rec, grads_dis) where grads_rec
    covers M_v and M_z parameters from the reconstruction term alone and
    grads_dis covers M_v parameters from the critic term alone.  The critic
    is frozen for this step (its parameters are simply not in either map),
    and the static path is stop-gradiented in both terms so M_c never moves.
    """
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
    c, v = dis.split(z)
    c_sg = stop_gradient(c)
    z_hat = dis.recombiner(c_sg, v)
    rec_term = T.mse(z_hat, z)
    dis_term = dis.critic(c_sg, v).mean()
    total = rec_term + dis_term

    rec_params = list(dis.split.m_v.parameters()) + list(dis.recombiner.parameters())
    dis_params = list(dis.split.m_v.parameters())
    grads_rec = backward(rec_term, params=rec_params, accumulate=False)
    grads_dis = backward(dis_term, params=dis_params, accumulate=False)
    grads_rec = {p: grads_rec[p] for p in rec_params}
    grads_dis = {p: grads_dis[p] for p in dis_params}
    return total, rec_term, dis_term, grads_rec, grads_dis


def resolve_conflict(g1, g2):
    """Merge two gradients; when they conflict (negative inner product), each
    is projected onto the normal plane of the other before summing.  The
    result never has negative inner product with either input."""
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise ShapeError("resolve_conflict", g1.shape, g2.shape)
    dot = float(np.vdot(g1, g2))
    n1 = float(np.vdot(g1, g1))
    n2 = float(np.vdot(g2, g2))
    if dot >= 0.0 or n1 == 0.0 or n2 == 0.0:
        return g1 + g2
    g1p = g1 - (dot / n2) * g2
    g2p = g2 - (dot / n1) * g1
    return g1p + g2p


def flatten_grads(params, gradmap):
    return np.concatenate([np.asarray(gradmap[p], dtype=np.float64).reshape(-1) for p in params])


def unflatten_grads(params, vector):
    out = {}
    offset = 0
    for p in params:
        n = p.data.size
        out[p] = vector[offset:offset + n].reshape(p.data.shape).astype(p.data.dtype)
        offset += n
    return out


def merged_dynamic_grads(dis, grads_rec, grads_dis):
    """Gradient surgery for the M_v parameter group; M_z keeps its plain
    reconstruction gradient."""
    mv_params = list(dis.split.m_v.parameters())
    g_rec = flatten_grads(mv_params, grads_rec)
    g_dis = flatten_grads(mv_params, grads_dis)
    merged = unflatten_grads(mv_params, resolve_conflict(g_rec, g_dis))
    for p in dis.recombiner.parameters():
        merged[p] = grads_rec[p]
    return merged


def swap_static(dis, z_a, z_b, slot_ids):
    """Exchange static features of the selected slots between two slot sets.

    z_a, z_b: (K, d_slot) arrays.  For each selected slot k the result is
    M_z(c_other, v_own); unselected slots are passed through untouched
    (byte-identical).  Returns (z_a_swapped, z_b_swapped).
    """
    z_a = np.asarray(z_a, dtype=np.float32)
    z_b = np.asarray(z_b, dtype=np.float32)
    if z_a.shape != z_b.shape:
        raise ShapeError("swap_static", z_a.shape, z_b.shape)
    k = z_a.shape[0]
    ids = list(slot_ids)
    if any(not 0 <= i < k for i in ids):
        raise ValueError(f"slot id outside 0..{k - 1}")
    with no_grad():
        c_a, v_a = dis.split(Tensor(z_a))
        c_b, v_b = dis.split(Tensor(z_b))
        out_a = z_a.copy()
        out_b = z_b.copy()
        for i in ids:
            out_a[i] = dis.recombiner(c_b[i:i + 1], v_a[i:i + 1]).data[0]
            out_b[i] = dis.recombiner(c_a[i:i + 1], v_b[i:i + 1]).data[0]
    return out_a, out_b
