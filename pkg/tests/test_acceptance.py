"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

The training-based criteria share a session fixture that runs the full desk
pipeline once (dataset, mask-scheduled encoder, never-masked ablation
encoder, world model + disentangler) and reuse its artifacts.  Run with
``pytest tests/test_acceptance.py -v -s`` to see the per-criterion lines.
"""

import itertools
import json
import os
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from dyno import harness, tensor as T
from dyno.config import Config, apply_override
from dyno.disentangle import dynamic_loss, resolve_conflict
from dyno.dynamics import rollout
from dyno.encoder import MaskSchedule, mask_drop_prob, pixel_mask_to_patch_mask
from dyno.evalkit import ProbeTask, adjusted_rand_index, extract_probe_dataset, linear_probe, psnr
from dyno.featurizer import PatchCodec
from dyno.gradcheck import TOLERANCE, run_suite
from dyno.tensor import Tensor, rng_for

RESULTS = []


def report(criterion, description, ok, detail=""):
    line = f"[criterion {criterion:>2}] {'PASS' if ok else 'FAIL'}  {description}"
    if detail:
        line += f"  ({detail})"
    print(line, flush=True)
    RESULTS.append((criterion, ok))
    assert ok, line


# -- desk-scale training configuration shared by criteria 6, 7, 8, 10, 12 --------

TRAIN_SEED = 11
TRAIN_EPISODES = 250
ENCODER_UPDATES = 6000
WM_UPDATES = 3000
HELDOUT_EPISODES = 100
FG_ARI_FRAMES = 200
PROBE_TRANSITIONS = 1200
RUN_BUDGET_MIN = 45.0


def desk_config():
    cfg = Config(seed=TRAIN_SEED)
    overrides = [
        f"env.episodes={TRAIN_EPISODES}",
        f"encoder.total_updates={ENCODER_UPDATES}",
        "encoder.batch=32",
        f"wm.updates={WM_UPDATES}",
        "wm.batch=16",
        "wm.horizon=10",
        "wm.context=4",
        "wm.rollout_steps=10",
        f"eval.probe_transitions={PROBE_TRANSITIONS}",
        f"eval.heldout_episodes={HELDOUT_EPISODES}",
        f"eval.fg_ari_frames={FG_ARI_FRAMES}",
    ]
    for ov in overrides:
        apply_override(cfg, ov)
    return cfg.validate()


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Train the whole stack once; reused by every quality criterion."""
    out = str(tmp_path_factory.mktemp("accept_run"))
    cfg = desk_config()
    log = harness.jsonl_logger(os.path.join(out, "logs.jsonl"))

    dataset = harness.stage_dataset(cfg, out, log)
    codec = harness.build_codec(cfg)

    t0 = time.time()
    encoder_sched = harness.stage_encoder(cfg, out, dataset, codec, log,
                                          mask_mode="scheduled", name="encoder")
    sched_minutes = (time.time() - t0) / 60.0

    t0 = time.time()
    encoder_never = harness.stage_encoder(cfg, out, dataset, codec, log,
                                          mask_mode="never", name="encoder_never")
    never_minutes = (time.time() - t0) / 60.0

    wm, dis = harness.stage_wm(cfg, out, dataset, codec, encoder_sched, log)
    heldout = harness.heldout_episodes(cfg)
    trajs = harness.episode_slot_trajectories(heldout, encoder_sched, codec)
    return {
        "cfg": cfg, "out": out, "dataset": dataset, "codec": codec,
        "encoder": encoder_sched, "encoder_never": encoder_never,
        "wm": wm, "dis": dis, "heldout": heldout, "heldout_trajs": trajs,
        "encoder_minutes": {"scheduled": sched_minutes, "never": never_minutes},
    }


class TestCriterion1:
    def test_gradient_integrity(self):
        t0 = time.time()
        results = run_suite(seed=0, instances=10)
        minutes = (time.time() - t0) / 60.0
        worst = max(results.values())
        ok = worst <= TOLERANCE and minutes <= 5.0
        report(1, "gradcheck: every differentiable op within 1e-4 of central differences",
               ok, f"worst={worst:.2e}, {len(results)} ops, {minutes:.1f} min")


class TestCriterion2:
    def test_isometry_identity(self):
        codec = PatchCodec(patch_size=8, seed=0)
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            obs = rng.uniform(0, 1, (1, 64, 64, 3)).astype(np.float32)
            feats = codec.featurize(obs)
            recon = Tensor(feats.numpy() + rng.standard_normal(feats.shape).astype(np.float32))
            from dyno.encoder import encoder_loss
            _, ft, pt = encoder_loss(Tensor(obs), feats, recon, codec)
            ratio = feats.size / obs.size
            rel = abs(pt.item() - ft.item() * ratio) / max(abs(pt.item()), 1e-12)
            worst = max(worst, rel)
        report(2, "pixel and feature reconstruction terms agree through the codec",
               worst <= 1e-5, f"worst rel diff={worst:.2e}")


class TestCriterion3:
    def test_mask_mechanics(self):
        from dyno.encoder import SlotEncoder
        enc = SlotEncoder(num_slots=5, d_slot=16, d_feat=12, num_positions=16,
                          hidden=16, rng=rng_for(3, "accept.c3"))
        rng = np.random.default_rng(3)
        zero_ok = True
        for _ in range(10):
            feats = Tensor(rng.standard_normal((2, 16, 12)).astype(np.float32))
            mask = rng.uniform(size=(2, 5, 16)) > 0.5
            mask[:, 0] |= ~mask.any(axis=1)
            _, attn = enc.encode(feats, mask=mask)
            zero_ok &= bool((attn.numpy()[~mask] == 0.0).all())
        p0 = mask_drop_prob(MaskSchedule(0, 1000))
        p1 = mask_drop_prob(MaskSchedule(1000, 1000))
        pm = mask_drop_prob(MaskSchedule(99, 999))
        closed = abs(p0) == 0.0 and abs(p1 - 1.0) == 0.0 and abs(pm - 2.0 / 3.0) <= 1e-12
        report(3, "masked attention is exactly zero outside the mask; schedule endpoints exact",
               zero_ok and closed, f"p(99,999)={pm!r}")


class TestCriterion4:
    def test_permutation_equivariance(self):
        from dyno.dynamics import WorldModel
        model = WorldModel(d_slot=24, action_arity=5, heads=2, d_state=8,
                           n_layers=2, hidden=32, rng=rng_for(4, "accept.c4"))
        rng = np.random.default_rng(4)
        ctx = rng.standard_normal((2, 3, 6, 24)).astype(np.float32)
        actions = rng.integers(0, 5, (2, 12))
        base = rollout(model, ctx, actions, steps=5)
        worst_slot, worst_scalar = 0.0, 0.0
        for _ in range(100):
            perm = rng.permutation(6)
            out = rollout(model, ctx[:, :, perm], actions, steps=5)
            worst_slot = max(worst_slot, float(np.abs(out["slots"] - base["slots"][:, :, perm]).max()))
            worst_scalar = max(worst_scalar,
                               float(np.abs(out["rewards"] - base["rewards"]).max()),
                               float(np.abs(out["done_logits"] - base["done_logits"]).max()))
        report(4, "rollout is permutation-equivariant, scalar heads invariant",
               worst_slot <= 1e-5 and worst_scalar <= 1e-6,
               f"slots={worst_slot:.2e}, scalars={worst_scalar:.2e}")


def bruteforce_pair_ari(a, b):
    a = np.asarray(a).reshape(-1)
    b = np.asarray(b).reshape(-1)
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    iu = np.triu_indices(a.size, k=1)
    sa, sb = same_a[iu], same_b[iu]
    both = float(np.sum(sa & sb))
    na, nb = float(np.sum(sa)), float(np.sum(sb))
    total = float(len(sa))
    expected = na * nb / total
    max_index = 0.5 * (na + nb)
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


class TestCriterion5:
    def test_fg_ari_against_bruteforce(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(200):
            a = rng.integers(0, rng.integers(2, 7), (16, 16))
            b = rng.integers(0, rng.integers(2, 7), (16, 16))
            worst = max(worst, abs(adjusted_rand_index(a, b) - bruteforce_pair_ari(a, b)))
        relabel_exact = True
        for _ in range(50):
            a = rng.integers(0, 5, (16, 16))
            mapping = rng.permutation(16)[:5]
            relabel_exact &= adjusted_rand_index(mapping[a], a) == 1.0
        report(5, "fg-ari matches the brute-force pair-counting oracle; relabeling exact",
               worst <= 1e-10 and relabel_exact, f"max |diff|={worst:.2e}")


class TestCriterion6:
    def test_mask_schedule_beats_unguided(self, trained):
        cfg, codec = trained["cfg"], trained["codec"]
        heldout = trained["heldout"]
        ari_sched, frames = harness.fg_ari_over_frames(
            trained["encoder"], codec, heldout.episodes, FG_ARI_FRAMES, cfg.env.image_hw)
        ari_never, _ = harness.fg_ari_over_frames(
            trained["encoder_never"], codec, heldout.episodes, FG_ARI_FRAMES, cfg.env.image_hw)
        minutes = trained["encoder_minutes"]
        budget_ok = max(minutes.values()) <= RUN_BUDGET_MIN
        ok = ari_sched >= 0.6 and ari_sched >= ari_never + 0.10 and budget_ok
        report(6, "mask-scheduled encoder beats the never-masked ablation on held-out FG-ARI",
               ok, f"scheduled={ari_sched:.3f}, never={ari_never:.3f}, "
                   f"frames={frames}, minutes={ {k: round(v, 1) for k, v in minutes.items()} }")


class TestCriterion7:
    def test_world_model_beats_persistence(self, trained):
        cfg = trained["cfg"]
        metrics = harness.rollout_metrics(
            trained["wm"], trained["encoder"], trained["codec"],
            trained["heldout_trajs"], trained["heldout"].episodes,
            context=cfg.wm.context, steps=10)
        ok = (metrics["latent_mse"] <= 0.8 * metrics["persistence_latent_mse"]
              and metrics["psnr"] > metrics["persistence_psnr"])
        report(7, "10-step closed-loop rollouts beat the persistence baseline",
               ok, f"latent ratio={metrics['latent_mse_ratio']:.3f}, "
                   f"psnr={metrics['psnr']:.2f} vs {metrics['persistence_psnr']:.2f}, "
                   f"episodes={metrics['episodes']}")


class TestCriterion8:
    def test_probe_orderings(self, trained):
        cfg = trained["cfg"]
        data = extract_probe_dataset(trained["dataset"], trained["encoder"], trained["codec"],
                                     trained["dis"], PROBE_TRANSITIONS, cfg.seed)
        acc = {}
        for feat in ("static", "dynamic", "random"):
            for prop in ("mean_r", "mean_g", "mean_b", "x", "y"):
                acc[(feat, prop)], _, _ = linear_probe(ProbeTask(feat, prop), data, cfg.seed)
        color_gap = min(acc[("static", p)] - acc[("random", p)]
                        for p in ("mean_r", "mean_g", "mean_b"))
        static_x_gap = abs(acc[("static", "x")] - acc[("random", "x")])
        dyn_gap = min(acc[("dynamic", "x")] - acc[("random", "x")],
                      acc[("dynamic", "y")] - acc[("random", "y")])
        ok = color_gap >= 20.0 and static_x_gap <= 10.0 and dyn_gap >= 20.0
        report(8, "probing orderings: static>random on color, static~random on x, dynamic>random on xy",
               ok, f"color gap={color_gap:.1f}, static-x gap={static_x_gap:.1f}, dyn xy gap={dyn_gap:.1f}")


class TestCriterion9:
    def test_disentanglement_mechanics(self):
        from dyno.disentangle import Disentangler
        dis = Disentangler(d_slot=16, d_static=8, d_dynamic=8, hidden=24,
                           rng=rng_for(9, "accept.c9"))
        z = Tensor(np.random.default_rng(9).standard_normal((6, 4, 16)).astype(np.float32))
        total, _, _, _, _ = dynamic_loss(dis, z)
        grads = T.backward(total, params=dis.split.m_c.parameters(), accumulate=False)
        barrier = max(float(np.abs(g).max()) for g in grads.values())

        rng = np.random.default_rng(90)
        dots_ok = True
        for _ in range(1000):
            g1 = rng.standard_normal(24)
            g2 = rng.standard_normal(24)
            merged = resolve_conflict(g1, g2)
            dots_ok &= merged @ g1 >= -1e-9 and merged @ g2 >= -1e-9
        g = rng.standard_normal(24)
        opposite_zero = bool((resolve_conflict(g, -g) == 0.0).all())
        report(9, "stop-gradient barrier exact; conflict resolution never harms either objective",
               barrier == 0.0 and dots_ok and opposite_zero, f"barrier={barrier}")


class TestCriterion10:
    def test_adversarial_loop_stability(self, trained):
        from dyno.disentangle import critic_loss, merged_dynamic_grads
        from dyno.tensor import Adam
        cfg = trained["cfg"]
        dis = harness.build_disentangler(cfg, trained["wm"].d_slot, run_seed=1010)
        trajs = trained["heldout_trajs"]
        slots = np.concatenate([tr["slots"] for tr in trajs], axis=0)
        rng = np.random.default_rng(10)
        opt_critic = Adam(dis.critic.parameters(), lr=cfg.disentangler.lr)
        opt_v = Adam(list(dis.split.m_v.parameters()) + list(dis.recombiner.parameters()),
                     lr=cfg.disentangler.lr)
        finite = True
        emas = []
        for step in range(2000):
            batch = Tensor(slots[rng.integers(0, len(slots), 64)])
            with T.no_grad():
                c, v = dis.split(batch)
            closs, _, _ = critic_loss(dis.critic_state, Tensor(c.numpy()), Tensor(v.numpy()))
            opt_critic.zero_grad()
            T.backward(closs)
            opt_critic.step()
            dtotal, _, _, grads_rec, grads_dis = dynamic_loss(dis, batch)
            opt_v.step(grads=merged_dynamic_grads(dis, grads_rec, grads_dis))
            finite &= np.isfinite(closs.item()) and np.isfinite(dtotal.item())
            emas.append((dis.critic_state.alpha_real, dis.critic_state.alpha_fake))
        emas = np.asarray(emas)
        bounded = bool((np.abs(emas) <= 10.0).all())
        report(10, "2000 alternating critic/generator steps stay finite with bounded anchors",
               finite and bounded,
               f"final EMAs=({emas[-1][0]:.3f}, {emas[-1][1]:.3f}), max |EMA|={np.abs(emas).max():.3f}")


class TestCriterion11:
    def test_bitwise_reproducibility(self, tmp_path):
        overrides = ["env.episodes=8", "env.max_steps=16",
                     "encoder.total_updates=12", "encoder.batch=4",
                     "encoder.d_z=16", "encoder.hidden=16",
                     "wm.updates=12", "wm.batch=4", "wm.horizon=4",
                     "wm.context=2", "wm.rollout_steps=3", "wm.hidden=16",
                     "wm.d_state=4", "disentangler.d_c=8", "disentangler.d_v=8",
                     "disentangler.hidden=16", "eval.probe_transitions=90",
                     "eval.heldout_episodes=4", "eval.fg_ari_frames=6"]
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cmd = [sys.executable, "-m", "dyno.cli", "all", "--seed", "1", "--out", str(out)]
            for ov in overrides:
                cmd += ["--override", ov]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr[-2000:]
            outs.append(out)
        metrics = [(o / "eval" / "metrics.json").read_bytes() for o in outs]
        blobs_equal = True
        for sub in ("dataset", "encoder", "wm"):
            names = sorted(p.name for p in (outs[0] / sub).glob("*.blob"))
            names_b = sorted(p.name for p in (outs[1] / sub).glob("*.blob"))
            blobs_equal &= names == names_b
            for n in names:
                blobs_equal &= (outs[0] / sub / n).read_bytes() == (outs[1] / sub / n).read_bytes()
        report(11, "`all --seed 1` twice: byte-identical metrics JSON and checkpoint blobs",
               metrics[0] == metrics[1] and blobs_equal)


class TestCriterion12:
    def test_swap_semantics(self, trained):
        cfg = trained["cfg"]
        result = harness.swap_demo(cfg, trained["out"], trained["wm"], trained["encoder"],
                                   trained["codec"], trained["dis"], steps=10)
        ok = (result["color_progress"] is not None
              and result["color_progress"] >= 0.5
              and result["other_sprites_rel_mse"] is not None
              and result["other_sprites_rel_mse"] < 0.10)
        report(12, "static swap moves decoded agent color to the donor, leaves others intact",
               ok, f"progress={result['color_progress']}, others rel mse={result['other_sprites_rel_mse']}")
