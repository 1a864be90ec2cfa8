"""Finite-difference verification suite.

Every differentiable operation - the primitives, one slot-attention
iteration, the slot decoder, interaction attention, the SSM step, and all
six training objectives - is checked at float64 against central differences
(eps = 1e-5) on several random tiny instances.  A result is the max relative
error over all coordinates; the pass bar is 1e-4.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .disentangle import Disentangler, critic_loss, dynamic_loss, static_loss
from .dynamics import InteractionAttention, PredictionHeads, SSMLayer, WorldModel, wm_loss
from .encoder import SlotAttention, SlotDecoder, SlotEncoder, encoder_loss
from .featurizer import PatchCodec
from .tensor import Tensor, grad_check, grad_check_leaves, rng_for

TOLERANCE = 1e-4
EPS = 1e-5
F64 = np.float64


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=F64)


def _max_over_instances(fn, instances):
    return max(fn(i) for i in range(instances))


def check_primitives(seed=0, instances=10):
    """One entry per primitive; each value is the max error over instances."""
    rng = rng_for(seed, "gradcheck.primitives")
    results = {}

    def run(name, builder):
        def one(i):
            return builder(np.random.default_rng(rng.integers(1 << 31)))
        results[name] = _max_over_instances(one, instances)

    def rt(r, *shape):
        return Tensor(r.standard_normal(shape), dtype=F64)

    run("add", lambda r: grad_check(lambda a, b: (a + b).sum(), [rt(r, 3, 4), rt(r, 4)], EPS))
    run("sub", lambda r: grad_check(lambda a, b: (a - b).mean(), [rt(r, 3, 4), rt(r, 3, 1)], EPS))
    run("mul", lambda r: grad_check(lambda a, b: (a * b).sum(), [rt(r, 2, 5), rt(r, 5)], EPS))
    run("div", lambda r: grad_check(lambda a, b: (a / b).sum(),
                                    [rt(r, 3, 3), Tensor(r.uniform(0.5, 2.0, (3, 3)), dtype=F64)], EPS))
    run("pow", lambda r: grad_check(lambda a: (a ** 3.0).sum(),
                                    [Tensor(r.uniform(0.5, 2.0, (4,)), dtype=F64)], EPS))
    run("exp", lambda r: grad_check(lambda a: T.exp(a).sum(), [rt(r, 3, 3)], EPS))
    run("log", lambda r: grad_check(lambda a: T.log(a).sum(),
                                    [Tensor(r.uniform(0.5, 3.0, (3, 3)), dtype=F64)], EPS))
    run("sqrt", lambda r: grad_check(lambda a: T.sqrt(a).sum(),
                                     [Tensor(r.uniform(0.5, 3.0, (5,)), dtype=F64)], EPS))
    run("tanh", lambda r: grad_check(lambda a: T.tanh(a).sum(), [rt(r, 4, 2)], EPS))
    run("sigmoid", lambda r: grad_check(lambda a: T.sigmoid(a).sum(), [rt(r, 6)], EPS))
    run("softplus", lambda r: grad_check(lambda a: T.softplus(a).sum(), [rt(r, 6)], EPS))
    run("relu", lambda r: grad_check(lambda a: T.relu(a).sum(),
                                     [Tensor(r.standard_normal(8) + 0.3, dtype=F64)], EPS))
    run("gelu", lambda r: grad_check(lambda a: T.gelu(a).sum(), [rt(r, 6)], EPS))
    run("matmul", lambda r: grad_check(lambda a, b: T.matmul(a, b).sum(),
                                       [rt(r, 2, 3, 4), rt(r, 4, 5)], EPS))
    run("softmax", lambda r: grad_check(lambda a: (T.softmax(a, axis=-1) * T.softmax(a, axis=-1)).sum(),
                                        [rt(r, 3, 5)], EPS))
    run("layer_norm", lambda r: grad_check(lambda a: (T.layer_norm(a) ** 2.0).sum(), [rt(r, 3, 6)], EPS))
    run("masked_fill", lambda r: grad_check(
        lambda a: T.softmax(T.masked_fill(a, np.tile([True, False, True, True, False], (3, 1))), axis=-1).sum(),
        [rt(r, 3, 5)], EPS))
    run("sum", lambda r: grad_check(lambda a: (a.sum(axis=1) ** 2.0).sum(), [rt(r, 3, 4)], EPS))
    run("mean", lambda r: grad_check(lambda a: (a.mean(axis=0) ** 2.0).sum(), [rt(r, 3, 4)], EPS))
    run("concat", lambda r: grad_check(lambda a, b: (T.concat([a, b], axis=1) ** 2.0).sum(),
                                       [rt(r, 2, 3), rt(r, 2, 2)], EPS))
    run("slice", lambda r: grad_check(lambda a: (a[:, 1:3] * a[:, :2]).sum(), [rt(r, 3, 4)], EPS))
    run("transpose", lambda r: grad_check(lambda a: (a.transpose(1, 0, 2) ** 2.0).sum(), [rt(r, 2, 3, 2)], EPS))
    run("reshape", lambda r: grad_check(lambda a: (a.reshape(6, 2) ** 2.0).sum(), [rt(r, 3, 4)], EPS))
    run("take", lambda r: grad_check(lambda a: (T.take(a, np.array([0, 2, 2, 1])) ** 2.0).sum(),
                                     [rt(r, 4, 3)], EPS))
    run("linear_scan", lambda r: grad_check(
        lambda a, b, c: (T.linear_scan(a, b, c) ** 2.0).sum(),
        [Tensor(r.uniform(0.1, 0.9, (5, 2, 3)), dtype=F64), rt(r, 5, 2, 3), rt(r, 2, 3)], EPS))
    run("cosine", lambda r: grad_check(lambda a, b: T.cosine_similarity(a, b).sum(),
                                       [rt(r, 3, 5), rt(r, 3, 5)], EPS))
    run("bce_with_logits", lambda r: grad_check(
        lambda a: T.bce_with_logits(a, Tensor(np.array([0.0, 1.0, 1.0, 0.0]), dtype=F64)).mean(),
        [rt(r, 4)], EPS))
    return results


def _module_check(module, build_loss, extra_leaves=(), params=None):
    leaves = list(params if params is not None else module.parameters()) + list(extra_leaves)
    return grad_check_leaves(build_loss, leaves, eps=EPS)


def check_slot_attention(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.slot_attn", i)
        attn = SlotAttention(d_in=6, d_slot=8, hidden=8, rng=rng, dtype=F64)
        slots = _t(rng, 1, 2, 8)
        feats = _t(rng, 1, 4, 6)
        mask = np.array([[[True, True, False, True], [False, True, True, True]]])

        def loss():
            out, _ = attn(slots, feats, mask=mask if i % 2 else None, iters=1)
            return (out * out).mean()

        return _module_check(attn, loss, extra_leaves=[slots, feats])

    return _max_over_instances(one, instances)


def check_slot_decoder(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.slot_dec", i)
        dec = SlotDecoder(d_slot=8, d_out=6, num_positions=4, hidden=8, rng=rng, dtype=F64)
        slots = _t(rng, 1, 2, 8)

        def loss():
            recon, alpha = dec(slots)
            return (recon * recon).mean() + (alpha * alpha).mean()

        return _module_check(dec, loss, extra_leaves=[slots])

    return _max_over_instances(one, instances)


def check_interaction_attention(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.interact", i)
        inter = InteractionAttention(d_model=8, action_arity=3, heads=2, rng=rng, dtype=F64)
        slots = _t(rng, 2, 2, 8)
        actions = np.array([i % 3, (i + 1) % 3])

        def loss():
            return (inter(slots, actions) ** 2.0).mean()

        return _module_check(inter, loss, extra_leaves=[slots])

    return _max_over_instances(one, instances)


def check_ssm_step(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.ssm", i)
        layer = SSMLayer(d_model=6, d_state=4, rng=rng, dtype=F64)
        h = _t(rng, 2, 2, 4)
        x = _t(rng, 2, 2, 6)

        def loss():
            h2, y = layer.step(h, x)
            return (h2 * h2).mean() + (y * y).mean()

        return _module_check(layer, loss, extra_leaves=[h, x])

    return _max_over_instances(one, instances)


def _tiny_codec():
    return PatchCodec(patch_size=2, feature_dim=8, seed=3)


def check_encoder_loss(seed=0, instances=10):
    codec = _tiny_codec()

    def one(i):
        rng = rng_for(seed, "gradcheck.enc_loss", i)
        enc = SlotEncoder(num_slots=2, d_slot=8, d_feat=8, num_positions=4, hidden=8,
                          rng=rng, iters=2, dtype=F64)
        obs = Tensor(rng.uniform(0, 1, (1, 4, 4, 3)), dtype=F64)

        def loss():
            feats = codec_featurize64(codec, obs)
            slots, _ = enc.encode(feats)
            recon, _ = enc.decode(slots)
            total, _, _ = encoder_loss(obs, feats, recon, codec64(codec))
            return total

        return _module_check(enc, loss)

    return _max_over_instances(one, instances)


class _Codec64:
    """Float64 view of a codec for the checks (training runs float32)."""

    def __init__(self, codec):
        self.patch_size = codec.patch_size
        self.feature_dim = codec.feature_dim
        self.patch_dim = codec.patch_dim
        self.weight = Tensor(codec.weight.data.astype(F64))

    def featurize(self, obs):
        patches = PatchCodec._to_patches(self, obs)
        return T.matmul(patches, T.transpose(self.weight))

    def defeaturize(self, feats, image_hw=None):
        n = feats.shape[-2]
        side = int(round(n ** 0.5))
        patches = T.matmul(feats, self.weight)
        return PatchCodec._from_patches(self, patches, side * self.patch_size)


def codec64(codec):
    return _Codec64(codec)


def codec_featurize64(codec, obs):
    return _Codec64(codec).featurize(obs)


def check_wm_loss(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.wm_loss", i)
        wm = WorldModel(d_slot=8, action_arity=3, heads=2, d_state=4, n_layers=2,
                        hidden=8, rng=rng, dtype=F64)
        slots = rng.standard_normal((1, 3, 2, 8))
        actions = rng.integers(0, 3, (1, 2))
        rewards = rng.standard_normal((1, 2))
        dones = (rng.uniform(size=(1, 2)) < 0.5).astype(float)

        def loss():
            total, *_ = wm_loss(wm, Tensor(slots, dtype=F64), actions, rewards, dones)
            return total

        return _module_check(wm, loss)

    return _max_over_instances(one, instances)


def _tiny_disentangler(rng):
    return Disentangler(d_slot=8, d_static=4, d_dynamic=4, hidden=8, rng=rng,
                        tau=0.1, ema_decay=1.0, lecam_weight=0.01, dtype=F64)


def check_static_loss(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.static", i)
        dis = _tiny_disentangler(rng)
        z = Tensor(rng.standard_normal((1, 3, 2, 8)), dtype=F64)

        def loss():
            return static_loss(dis.split.m_c(z), tau=0.1)[0]

        return _module_check(dis.split.m_c, loss)

    return _max_over_instances(one, instances)


def check_dynamic_rec_loss(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.dyn_rec", i)
        dis = _tiny_disentangler(rng)
        z = Tensor(rng.standard_normal((3, 2, 8)), dtype=F64)

        def loss():
            return dynamic_loss(dis, z)[1]

        params = list(dis.split.m_v.parameters()) + list(dis.recombiner.parameters())
        return _module_check(dis, loss, params=params)

    return _max_over_instances(one, instances)


def check_dynamic_dis_loss(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.dyn_dis", i)
        dis = _tiny_disentangler(rng)
        z = Tensor(rng.standard_normal((3, 2, 8)), dtype=F64)

        def loss():
            return dynamic_loss(dis, z)[2]

        return _module_check(dis, loss, params=list(dis.split.m_v.parameters()))

    return _max_over_instances(one, instances)


def check_critic_loss(seed=0, instances=10):
    def one(i):
        rng = rng_for(seed, "gradcheck.critic", i)
        dis = _tiny_disentangler(rng)  # ema_decay=1.0 freezes the anchors
        dis.critic_state.alpha_real = 0.3
        dis.critic_state.alpha_fake = -0.2
        c = Tensor(rng.standard_normal((3, 2, 4)), dtype=F64)
        v = Tensor(rng.standard_normal((3, 2, 4)), dtype=F64)

        def loss():
            return critic_loss(dis.critic_state, c, v)[0]

        return _module_check(dis.critic, loss)

    return _max_over_instances(one, instances)


SUITE = {
    "primitives": check_primitives,
    "slot_attention": check_slot_attention,
    "slot_decoder": check_slot_decoder,
    "interaction_attention": check_interaction_attention,
    "ssm_step": check_ssm_step,
    "loss_encoder": check_encoder_loss,
    "loss_wm": check_wm_loss,
    "loss_static": check_static_loss,
    "loss_dynamic_rec": check_dynamic_rec_loss,
    "loss_dynamic_dis": check_dynamic_dis_loss,
    "loss_critic": check_critic_loss,
}


def run_suite(seed=0, instances=10):
    """Full finite-difference suite: {op name: max relative error}."""
    results = {}
    for name, fn in SUITE.items():
        out = fn(seed=seed, instances=instances)
        if isinstance(out, dict):
            for sub, err in out.items():
                results[f"{name}.{sub}"] = float(err)
        else:
            results[name] = float(out)
    return results
