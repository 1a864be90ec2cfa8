"""Object-centric world model: interaction attention over slots plus the
embedded action, a shared per-slot selective state-space recurrence, and
prediction heads for next slots, reward, and termination.

Nothing in the stack carries a positional encoding, so permuting the input
slots permutes the slot predictions identically and leaves the scalar heads
unchanged.  The recurrence exposes two equivalent paths: a stepwise one for
closed-loop rollouts and a scan-based one for teacher-forced training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module, token_init
from .tensor import ShapeError, Tensor, no_grad


@dataclass(frozen=True)
class WMOutput:
    next_slots: object  # (B, K, d_z)
    reward: object      # (B, 1)
    done_logit: object  # (B, 1)


class InteractionAttention(Module):
    """Self-attention where each slot queries [all slots, action token]."""

    def __init__(self, d_model, action_arity, heads, rng, dtype=np.float32):
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.action_embed = Tensor(token_init(rng, (action_arity, d_model), dtype), requires_grad=True)
        self.to_q = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.to_k = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.to_v = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.out = Linear(d_model, d_model, rng, dtype=dtype)
        self.norm = LayerNorm(d_model, dtype=dtype)
        self.heads = heads
        self.d_head = d_model // heads
        self.action_arity = action_arity

    def __call__(self, slots, actions):
        b, k, d = slots.shape
        actions = np.asarray(actions)
        if actions.shape != (b,):
            raise ShapeError("interact/actions", actions.shape, (b,))
        if actions.min(initial=0) < 0 or actions.max(initial=0) >= self.action_arity:
            raise ValueError(f"action id outside 0..{self.action_arity - 1}")
        tok = T.take(self.action_embed, actions).reshape(b, 1, d)
        kv = T.concat([slots, tok], axis=1)  # (B, K+1, d)

        h, dh = self.heads, self.d_head
        q = self.to_q(slots).reshape(b, k, h, dh).transpose(0, 2, 1, 3)
        keys = self.to_k(kv).reshape(b, k + 1, h, dh).transpose(0, 2, 1, 3)
        vals = self.to_v(kv).reshape(b, k + 1, h, dh).transpose(0, 2, 1, 3)
        logits = T.matmul(q, T.transpose(keys, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = T.softmax(logits, axis=-1)
        ctx = T.matmul(attn, vals).transpose(0, 2, 1, 3).reshape(b, k, d)
        return self.norm(slots + self.out(ctx))


class SSMLayer(Module):
    """One selective diagonal state-space layer, parameters shared across slots.

    delta = softplus(W_delta x + b); decay = exp(-delta * exp(A_log));
    h' = decay * h + delta * (W_B x); y = W_C h' + D * x.
    Every decay entry lies strictly inside (0, 1) for finite input.
    """

    def __init__(self, d_model, d_state, rng, dtype=np.float32):
        self.w_delta = Linear(d_model, d_state, rng, dtype=dtype)
        self.w_delta.bias.data[:] = -1.0  # softplus(-1) ~ 0.31: slow initial decay
        self.a_log = Tensor(np.log(np.arange(1, d_state + 1, dtype=dtype)), requires_grad=True)
        # bias-free so zero input drives zero state and a zero D-term exactly
        self.w_in = Linear(d_model, d_state, rng, bias=False, dtype=dtype)
        self.w_out = Linear(d_state, d_model, rng, bias=False, dtype=dtype)
        self.skip = Tensor(np.ones((d_model,), dtype=dtype), requires_grad=True)
        self.d_state = d_state

    def _gates(self, x):
        delta = T.softplus(self.w_delta(x))
        decay = T.exp(-(delta * T.exp(self.a_log)))
        drive = delta * self.w_in(x)
        return decay, drive

    def step(self, h, x):
        decay, drive = self._gates(x)
        h_next = decay * h + drive
        y = self.w_out(h_next) + self.skip * x
        return h_next, y

    def scan(self, xs, h0):
        """xs (T, ..., d_model), h0 (..., d_state) -> (hs, ys) over the whole sequence."""
        decay, drive = self._gates(xs)
        hs = T.linear_scan(decay, drive, h0)
        ys = self.w_out(hs) + self.skip * xs
        return hs, ys


class SlotSSM(Module):
    """Stack of shared SSM layers with residual connections between them."""

    def __init__(self, d_model, d_state, n_layers, rng, dtype=np.float32):
        self.layers = [SSMLayer(d_model, d_state, rng, dtype=dtype) for _ in range(n_layers)]
        self.d_state = d_state
        self.dtype = dtype

    def init_state(self, lead_shape):
        return [Tensor(np.zeros(tuple(lead_shape) + (self.d_state,), dtype=self.dtype))
                for _ in self.layers]

    def step(self, states, x):
        new_states = []
        for layer, h in zip(self.layers, states):
            h_next, y = layer.step(h, x)
            new_states.append(h_next)
            x = y + x
        return new_states, x

    def scan(self, xs, states):
        new_states = []
        for layer, h0 in zip(self.layers, states):
            hs, ys = layer.scan(xs, h0)
            new_states.append(hs[-1])
            xs = ys + xs
        return new_states, xs


class PredictionHeads(Module):
    """Per-slot next-state predictor plus permutation-invariant reward/done
    readouts via cross-attention with learnable query tokens."""

    def __init__(self, d_model, d_out, hidden, rng, dtype=np.float32):
        self.pred = MLP([d_model, hidden, d_out], rng, dtype=dtype)
        self.r_cls = Tensor(token_init(rng, (d_model,), dtype), requires_grad=True)
        self.d_cls = Tensor(token_init(rng, (d_model,), dtype), requires_grad=True)
        self.r_key = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.r_val = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.r_out = Linear(d_model, 1, rng, dtype=dtype)
        self.d_key = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.d_val = Linear(d_model, d_model, rng, bias=False, dtype=dtype)
        self.d_out = Linear(d_model, 1, rng, dtype=dtype)
        self.scale = 1.0 / math.sqrt(d_model)

    def _readout(self, states, cls, to_k, to_v, head):
        d = cls.shape[0]
        logits = T.matmul(to_k(states), cls.reshape(d, 1)) * self.scale  # (..., K, 1)
        attn = T.softmax(logits, axis=-2)
        pooled = (attn * to_v(states)).sum(axis=-2)
        return head(pooled)

    def __call__(self, states):
        next_slots = self.pred(states)
        reward = self._readout(states, self.r_cls, self.r_key, self.r_val, self.r_out)
        done_logit = self._readout(states, self.d_cls, self.d_key, self.d_val, self.d_out)
        return next_slots, reward, done_logit


class WorldModel(Module):
    def __init__(self, d_slot, action_arity, heads, d_state, n_layers, hidden, rng, dtype=np.float32):
        self.interact = InteractionAttention(d_slot, action_arity, heads, rng, dtype=dtype)
        self.ssm = SlotSSM(d_slot, d_state, n_layers, rng, dtype=dtype)
        self.heads = PredictionHeads(d_slot, d_slot, hidden, rng, dtype=dtype)
        self.d_slot = d_slot

    def init_state(self, batch, num_slots):
        return self.ssm.init_state((batch, num_slots))

    def step(self, states, slots, actions):
        """One transition: slots (B,K,d) + action ids (B,) -> new SSM states
        and WMOutput for this step."""
        u = self.interact(slots, actions)
        states, y = self.ssm.step(states, u)
        next_slots, reward, done_logit = self.heads(y)
        return states, WMOutput(next_slots, reward, done_logit)

    def forward_sequence(self, slots, actions):
        """Teacher-forced pass over a trajectory via the scan path.

        slots (B,T,K,d), actions (B,T) -> predictions with the same leading
        layout: next slots (B,T,K,d), rewards (B,T,1), done logits (B,T,1).
        """
        b, t, k, d = slots.shape
        actions = np.asarray(actions)
        if actions.shape != (b, t):
            raise ShapeError("forward_sequence/actions", actions.shape, (b, t))
        u = self.interact(slots.reshape(b * t, k, d), actions.reshape(b * t))
        u = u.reshape(b, t, k, d).transpose(1, 0, 2, 3)  # time-major for the scan
        states0 = self.ssm.init_state((b, k))
        _, ys = self.ssm.scan(u, states0)
        ys = ys.transpose(1, 0, 2, 3).reshape(b * t, k, d)
        next_slots, reward, done_logit = self.heads(ys)
        return (next_slots.reshape(b, t, k, d),
                reward.reshape(b, t, 1),
                done_logit.reshape(b, t, 1))


def wm_loss(model, slots, actions, rewards, dones):
    """Eq-style teacher-forced prediction loss over a trajectory batch.

    slots (B,T+1,K,d) ground truth; actions/rewards/dones (B,T).  Returns
    (total, slot_term, reward_term, done_term); the components sum exactly
    to the total.  Cross-entropy on the done logit is binary.
    """
    slots = slots if isinstance(slots, Tensor) else Tensor(np.asarray(slots, dtype=np.float32))
    b, t1 = slots.shape[0], slots.shape[1]
    if t1 < 2:
        raise ValueError("trajectory must contain at least 2 frames")
    t = t1 - 1
    actions = np.asarray(actions)
    rewards_arr = np.asarray(rewards, dtype=slots.data.dtype).reshape(b, t, 1)
    dones_arr = np.asarray(dones, dtype=slots.data.dtype).reshape(b, t, 1)

    pred_slots, pred_r, pred_d = model.forward_sequence(slots[:, :-1], actions)
    slot_term = T.mse(pred_slots, T.stop_gradient(slots[:, 1:]))
    reward_term = T.mse(pred_r, Tensor(rewards_arr))
    done_term = T.bce_with_logits(pred_d, Tensor(dones_arr)).mean()
    total = slot_term + reward_term + done_term
    return total, slot_term, reward_term, done_term


def rollout(model, context_slots, actions, steps):
    """Burn in on the context with teacher forcing, then run ``steps`` closed
    loop feeding predictions back.  Inference only; returns numpy arrays.

    context_slots (B,c,K,d); actions (B, >= c-1+steps) aligned so that
    actions[:, c-1+j] drives prediction step j.
    """
    ctx = np.asarray(context_slots, dtype=np.float32)
    actions = np.asarray(actions)
    b, c, k, d = ctx.shape
    if c < 1:
        raise ValueError("rollout needs at least one context frame")
    if actions.shape[1] < c - 1 + steps:
        raise ShapeError("rollout/actions", actions.shape, (b, c - 1 + steps))
    pred_slots = np.zeros((b, steps, k, d), dtype=np.float32)
    pred_rewards = np.zeros((b, steps), dtype=np.float32)
    pred_done_logits = np.zeros((b, steps), dtype=np.float32)
    with no_grad():
        states = model.init_state(b, k)
        for tstep in range(c - 1):
            states, _ = model.step(states, Tensor(ctx[:, tstep]), actions[:, tstep])
        current = Tensor(ctx[:, c - 1])
        for j in range(steps):
            states, out = model.step(states, current, actions[:, c - 1 + j])
            pred_slots[:, j] = out.next_slots.data
            pred_rewards[:, j] = out.reward.data.reshape(b)
            pred_done_logits[:, j] = out.done_logit.data.reshape(b)
            current = out.next_slots
    return {"slots": pred_slots, "rewards": pred_rewards, "done_logits": pred_done_logits}
