"""Pipeline orchestration: dataset collection, encoder training, joint world
model + disentangler training, evaluation, checkpoints, and demo exports.

Stage order is collect -> train-encoder -> train-wm -> evaluate; each stage
writes a checkpoint directory it can be resumed from, and refuses to run
when its prerequisite artifact is missing.
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import __version__
from . import tensor as T
from .config import echo_config
from .disentangle import (Disentangler, critic_loss, dynamic_loss,
                          merged_dynamic_grads, static_loss)
from .dynamics import WorldModel, rollout, wm_loss
from .encoder import (MaskSchedule, build_encoder, encode_frames,
                      train_encoder)
from .evalkit import (EXCLUDED_METRICS, attn_to_segmentation,
                      extract_probe_dataset, fg_ari, probe_report, psnr, ssim)
from .featurizer import PatchCodec
from .tensor import Adam, Tensor, no_grad, read_blob, rng_for, write_blob
from .world import collect, load_dataset, save_dataset

CHECKPOINT_FORMAT = 1


class PipelineError(RuntimeError):
    """A stage was invoked without its prerequisite artifact."""


def jsonl_logger(path):
    """Append line-delimited JSON events; also returns them for callers."""

    def log(**event):
        event = {"ts": round(time.time(), 3), **event}
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
        return event

    return log


def null_logger(**event):
    return event


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, arrays, config, extra=None):
    """Write named tensor blobs plus a manifest.  Blob bytes are a pure
    function of the arrays, so save -> load -> save round-trips exactly."""
    os.makedirs(path, exist_ok=True)
    names = sorted(arrays)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "package_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": echo_config(config),
        "tensors": names,
    }
    manifest.update(extra or {})
    for name in names:
        write_blob(os.path.join(path, f"{name}.blob"), np.asarray(arrays[name]))
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    man_path = os.path.join(path, "manifest.json")
    if not os.path.exists(man_path):
        raise PipelineError(f"no checkpoint at {path}")
    with open(man_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')}")
    arrays = {name: read_blob(os.path.join(path, f"{name}.blob")) for name in manifest["tensors"]}
    return manifest, arrays


def check_config_match(manifest, config, sections):
    """Loading against a different config fails loudly."""
    echoed = manifest.get("config", {}).get("desk", {})
    current = config.to_dict()
    for section in sections:
        if echoed.get(section) != current.get(section):
            raise ValueError(
                f"checkpoint config mismatch in [{section}]: "
                f"saved {echoed.get(section)} vs current {current.get(section)}")


def checkpoint_complete(path):
    man_path = os.path.join(path, "manifest.json")
    if not os.path.exists(man_path):
        return False
    with open(man_path, "r", encoding="utf-8") as fh:
        return bool(json.load(fh).get("stage_complete"))


# -- stage: dataset ------------------------------------------------------------------


def stage_dataset(config, out_dir, log=null_logger):
    path = os.path.join(out_dir, "dataset")
    if os.path.exists(os.path.join(path, "manifest.json")):
        log(stage="gen-data", event="resume", path=path)
        return load_dataset(path)
    log(stage="gen-data", event="start", episodes=config.env.episodes)
    dataset = collect(config.env.policy, config.env.episodes,
                      seed=T.derive_seed(config.seed, "harness.dataset"),
                      size=config.env.image_hw, max_steps=config.env.max_steps)
    save_dataset(dataset, path)
    log(stage="gen-data", event="done", transitions=dataset.num_transitions)
    return dataset


# -- stage: encoder --------------------------------------------------------------------


def build_codec(config):
    return PatchCodec(patch_size=config.featurizer.patch_size,
                      feature_dim=config.featurizer.feature_dim,
                      seed=T.derive_seed(config.seed, "harness.codec"))


def _encoder_cfg(config):
    from .encoder import EncoderTrainConfig
    enc = config.encoder
    return EncoderTrainConfig(num_slots=enc.K, d_slot=enc.d_z, hidden=enc.hidden,
                              iters=enc.iters, lr=enc.lr, batch=enc.batch,
                              total_updates=enc.total_updates, attn_eps=enc.attn_eps)


def stage_encoder(config, out_dir, dataset, codec, log=null_logger,
                  mask_mode="scheduled", name="encoder"):
    path = os.path.join(out_dir, name)
    cfg = _encoder_cfg(config)
    if checkpoint_complete(path):
        log(stage="train-encoder", event="resume", path=path)
        return load_encoder(path, config, codec, dataset.image_hw)[0]
    log(stage="train-encoder", event="start", mask_mode=mask_mode,
        total_updates=cfg.total_updates)
    model, schedule, curve = train_encoder(
        dataset, codec, cfg, run_seed=config.seed, mask_mode=mask_mode,
        log=lambda **kw: log(stage="train-encoder", event="update", **kw))
    save_checkpoint(path, {f"encoder.{k}": v for k, v in model.state_dict().items()},
                    config, extra={
                        "stage": "train-encoder",
                        "stage_complete": True,
                        "mask_mode": mask_mode,
                        "schedule": {"updates_done": schedule.updates_done,
                                     "total_updates": schedule.total_updates},
                        "final_loss": curve[-1] if curve else None,
                        "codec": codec.describe(),
                    })
    log(stage="train-encoder", event="done", final_loss=curve[-1] if curve else None)
    return model


def load_encoder(path, config, codec, image_hw):
    manifest, arrays = load_checkpoint(path)
    check_config_match(manifest, config, ["encoder", "featurizer"])
    PatchCodec.from_description(manifest["codec"])  # checksum guard
    model = build_encoder(_encoder_cfg(config), codec, image_hw, run_seed=config.seed)
    model.load_state_dict({k[len("encoder."):]: v for k, v in arrays.items()
                           if k.startswith("encoder.")})
    schedule = MaskSchedule(**manifest["schedule"])
    return model, schedule


# -- slot trajectories --------------------------------------------------------------------


def episode_slot_trajectories(dataset, encoder_model, codec, slots_source="encoder",
                              limit=None, chunk=256):
    """Frozen-encoder latents for whole episodes: list of dicts with keys
    slots (L+1,K,d), actions, rewards, dones.  With slots_source="patches"
    every patch feature is treated as one slot (the monolithic ablation)."""
    episodes = dataset.episodes if limit is None else dataset.episodes[:limit]
    trajs = []
    for ep in episodes:
        frames = ep.obs
        outs = []
        for start in range(0, len(frames), chunk):
            block = frames[start:start + chunk]
            if slots_source == "patches":
                with no_grad():
                    outs.append(codec.featurize(block).data)
            else:
                slots, _ = encode_frames(encoder_model, codec, block)
                outs.append(slots)
        trajs.append({
            "slots": np.concatenate(outs, axis=0),
            "actions": ep.actions,
            "rewards": ep.rewards,
            "dones": ep.dones.astype(np.float32),
        })
    return trajs


# -- stage: world model + disentangler --------------------------------------------------------


def build_world_model(config, d_slot, run_seed):
    wm = config.wm
    return WorldModel(d_slot=d_slot, action_arity=config.action_arity, heads=wm.heads,
                      d_state=wm.d_state, n_layers=wm.layers, hidden=wm.hidden,
                      rng=rng_for(run_seed, "wm.init"))


def build_disentangler(config, d_slot, run_seed):
    dc = config.disentangler
    return Disentangler(d_slot=d_slot, d_static=dc.d_c, d_dynamic=dc.d_v,
                        hidden=dc.hidden, rng=rng_for(run_seed, "disentangler.init"),
                        tau=dc.tau, ema_decay=dc.ema_decay, lecam_weight=dc.lecam_weight)


def disentangle_update(dis, opts, z_window, tau):
    """Algorithm lines 5-8 for one batch: static step, critic step, then the
    M_v/M_z step with gradient conflict surgery."""
    b, t1, k, d = z_window.shape
    z4 = Tensor(z_window)
    z_flat = Tensor(z_window.reshape(b * t1, k, d))
    opt_c, opt_critic, opt_v = opts

    c_window = dis.split.m_c(z4)
    stat_total, stat_inv, stat_con = static_loss(c_window, tau=tau)
    opt_c.zero_grad()
    T.backward(stat_total)
    opt_c.step()

    with no_grad():
        c_all, v_all = dis.split(z_flat)
    crit_total, crit_w, crit_lecam = critic_loss(dis.critic_state, Tensor(c_all.data), Tensor(v_all.data))
    opt_critic.zero_grad()
    T.backward(crit_total)
    opt_critic.step()

    dyn_total, dyn_rec, dyn_dis, grads_rec, grads_dis = dynamic_loss(dis, z_flat)
    opt_v.step(grads=merged_dynamic_grads(dis, grads_rec, grads_dis))

    return {"static": float(stat_total.item()), "static_inv": float(stat_inv.item()),
            "critic": float(crit_total.item()), "wasserstein": float(crit_w.item()),
            "dynamic": float(dyn_total.item()), "dyn_rec": float(dyn_rec.item()),
            "alpha_real": dis.critic_state.alpha_real, "alpha_fake": dis.critic_state.alpha_fake}


def train_world_model(trajs, config, run_seed, log=null_logger, wm=None, dis=None):
    """Joint optimization: per batch the world model minimizes its prediction
    loss; when disentanglement is on, the static/critic/dynamic updates follow
    in order (per batch, or grouped into alternating blocks in epoch mode)."""
    cfg = config.wm
    dcfg = config.disentangler
    horizon = cfg.horizon
    windows = [(i, s) for i, tr in enumerate(trajs)
               for s in range(len(tr["actions"]) - horizon + 1)]
    if not windows:
        raise ValueError(f"no episode long enough for horizon {horizon}")
    d_slot = trajs[0]["slots"].shape[-1]
    wm = wm or build_world_model(config, d_slot, run_seed)
    opt_wm = Adam(wm.parameters(), lr=cfg.lr)
    opts = None
    if cfg.disentangle:
        dis = dis or build_disentangler(config, d_slot, run_seed)
        opts = (Adam(dis.split.m_c.parameters(), lr=dcfg.lr),
                Adam(dis.critic.parameters(), lr=dcfg.lr),
                Adam(list(dis.split.m_v.parameters()) + list(dis.recombiner.parameters()), lr=dcfg.lr))

    rng = rng_for(run_seed, "wm.batches")
    epoch_len = max(1, len(windows) // max(1, cfg.batch))

    def sample_batch():
        picks = rng.integers(0, len(windows), size=cfg.batch)
        slots = np.stack([trajs[windows[i][0]]["slots"][windows[i][1]:windows[i][1] + horizon + 1]
                          for i in picks])
        actions = np.stack([trajs[windows[i][0]]["actions"][windows[i][1]:windows[i][1] + horizon]
                            for i in picks])
        rewards = np.stack([trajs[windows[i][0]]["rewards"][windows[i][1]:windows[i][1] + horizon]
                            for i in picks])
        dones = np.stack([trajs[windows[i][0]]["dones"][windows[i][1]:windows[i][1] + horizon]
                          for i in picks])
        return slots, actions, rewards, dones

    for update in range(1, cfg.updates + 1):
        slots, actions, rewards, dones = sample_batch()
        total, slot_term, reward_term, done_term = wm_loss(wm, slots, actions, rewards, dones)
        opt_wm.zero_grad()
        T.backward(total)
        opt_wm.step()

        dis_stats = None
        if cfg.disentangle:
            if dcfg.interleave == "batch":
                dis_stats = disentangle_update(dis, opts, slots, dcfg.tau)
            else:  # epoch mode: alternate whole blocks of wm-only then dis-only updates
                in_dis_block = ((update - 1) // epoch_len) % 2 == 1
                if in_dis_block:
                    dis_stats = disentangle_update(dis, opts, slots, dcfg.tau)

        if update % 200 == 0 or update == 1:
            event = {"stage": "train-wm", "event": "update", "update": update,
                     "loss": float(total.item()), "slot": float(slot_term.item()),
                     "reward": float(reward_term.item()), "done": float(done_term.item())}
            if dis_stats:
                event.update({f"dis_{k}": v for k, v in dis_stats.items()})
            log(**event)
    return wm, dis


def stage_wm(config, out_dir, dataset, codec, encoder_model, log=null_logger):
    path = os.path.join(out_dir, "wm")
    if checkpoint_complete(path):
        log(stage="train-wm", event="resume", path=path)
        return load_wm(path, config)
    log(stage="train-wm", event="start", updates=config.wm.updates,
        slots_source=config.wm.slots_source)
    trajs = episode_slot_trajectories(dataset, encoder_model, codec,
                                      slots_source=config.wm.slots_source)
    wm, dis = train_world_model(trajs, config, run_seed=config.seed, log=log)
    arrays = {f"wm.{k}": v for k, v in wm.state_dict().items()}
    extra = {"stage": "train-wm", "stage_complete": True,
             "updates": config.wm.updates, "d_slot": wm.d_slot}
    if dis is not None:
        arrays.update({f"disentangler.{k}": v for k, v in dis.state_dict().items()})
        extra["critic_state"] = {"alpha_real": dis.critic_state.alpha_real,
                                 "alpha_fake": dis.critic_state.alpha_fake}
    save_checkpoint(path, arrays, config, extra=extra)
    log(stage="train-wm", event="done")
    return wm, dis


def load_wm(path, config):
    manifest, arrays = load_checkpoint(path)
    check_config_match(manifest, config, ["wm", "disentangler"])
    d_slot = manifest["d_slot"]
    wm = build_world_model(config, d_slot, config.seed)
    wm.load_state_dict({k[len("wm."):]: v for k, v in arrays.items() if k.startswith("wm.")})
    dis = None
    if any(k.startswith("disentangler.") for k in arrays):
        dis = build_disentangler(config, d_slot, config.seed)
        dis.load_state_dict({k[len("disentangler."):]: v for k, v in arrays.items()
                             if k.startswith("disentangler.")})
        cs = manifest.get("critic_state", {})
        dis.critic_state.alpha_real = cs.get("alpha_real", 0.0)
        dis.critic_state.alpha_fake = cs.get("alpha_fake", 0.0)
    return wm, dis


# -- evaluation helpers ------------------------------------------------------------------------


def decode_slot_frames(encoder_model, codec, slots, slots_source="encoder"):
    """(B,K,d) slots -> (B,H,W,3) decoded frames (raw, unclamped)."""
    with no_grad():
        if slots_source == "patches":
            return codec.defeaturize(Tensor(np.asarray(slots, dtype=np.float32))).data
        recon, _ = encoder_model.decode(Tensor(np.asarray(slots, dtype=np.float32)))
        return codec.defeaturize(recon).data


def fg_ari_over_frames(encoder_model, codec, episodes, n_frames, image_hw):
    frames = [(ep, t) for ep in episodes for t in range(len(ep.actions) + 1)]
    frames = frames[:n_frames]
    scores = []
    for start in range(0, len(frames), 128):
        chunk = frames[start:start + 128]
        obs = np.stack([ep.obs[t] for ep, t in chunk])
        _, attn = encode_frames(encoder_model, codec, obs)
        for i, (ep, t) in enumerate(chunk):
            seg = attn_to_segmentation(attn[i], codec.patch_size, image_hw)
            scores.append(fg_ari(seg, ep.masks[t]))
    return float(np.mean(scores)), len(scores)


def rollout_metrics(wm, encoder_model, codec, trajs, episodes, context, steps,
                    slots_source="encoder"):
    """Closed-loop rollout quality vs the persistence baseline.

    Latent MSE is averaged over the prediction window; PSNR/SSIM are taken at
    the final predicted step on decoded frames (both model and baseline are
    decoded through the same path so codec artifacts cancel).
    """
    usable = [(tr, ep) for tr, ep in zip(trajs, episodes)
              if len(tr["actions"]) >= context + steps]
    if not usable:
        raise ValueError(f"no held-out episode long enough for context {context} + steps {steps}")
    lat_model, lat_persist = [], []
    psnr_model, psnr_persist = [], []
    ssim_model, ssim_persist = [], []
    for tr, ep in usable:
        ctx = tr["slots"][None, :context]
        actions = tr["actions"][None]
        pred = rollout(wm, ctx, actions, steps)["slots"][0]
        true = tr["slots"][context:context + steps]
        persist = np.repeat(tr["slots"][context - 1][None], steps, axis=0)
        lat_model.append(float(np.mean((pred - true) ** 2)))
        lat_persist.append(float(np.mean((persist - true) ** 2)))

        decoded = decode_slot_frames(encoder_model, codec,
                                     np.stack([pred[-1], persist[-1]]), slots_source)
        target = ep.obs[context + steps - 1 + 1]  # obs index t+1 after t transitions
        psnr_model.append(psnr(np.clip(decoded[0], 0, 1), target))
        psnr_persist.append(psnr(np.clip(decoded[1], 0, 1), target))
        ssim_model.append(ssim(np.clip(decoded[0], 0, 1), target))
        ssim_persist.append(ssim(np.clip(decoded[1], 0, 1), target))
    return {
        "episodes": len(usable),
        "steps": steps,
        "latent_mse": float(np.mean(lat_model)),
        "persistence_latent_mse": float(np.mean(lat_persist)),
        "latent_mse_ratio": float(np.mean(lat_model) / max(np.mean(lat_persist), 1e-12)),
        "psnr": float(np.mean(psnr_model)),
        "persistence_psnr": float(np.mean(psnr_persist)),
        "ssim": float(np.mean(ssim_model)),
        "persistence_ssim": float(np.mean(ssim_persist)),
    }


def heldout_episodes(config, count=None):
    ds = collect(config.env.policy, count or config.eval.heldout_episodes,
                 seed=T.derive_seed(config.seed, "harness.heldout"),
                 size=config.env.image_hw, max_steps=config.env.max_steps)
    return ds


def stage_eval(config, out_dir, dataset, codec, encoder_model, wm, dis, log=null_logger):
    log(stage="eval", event="start")
    heldout = heldout_episodes(config)
    ari_mean, ari_frames = fg_ari_over_frames(encoder_model, codec, heldout.episodes,
                                              config.eval.fg_ari_frames, config.env.image_hw)
    metrics = {
        "note": EXCLUDED_METRICS,
        "fg_ari": {"mean": round(ari_mean, 4), "frames": ari_frames},
    }
    if wm is not None:
        trajs = episode_slot_trajectories(heldout, encoder_model, codec,
                                          slots_source=config.wm.slots_source)
        metrics["rollout"] = {k: (round(v, 4) if isinstance(v, float) else v)
                              for k, v in rollout_metrics(
                                  wm, encoder_model, codec, trajs, heldout.episodes,
                                  config.wm.context, config.wm.rollout_steps,
                                  config.wm.slots_source).items()}
    if dis is not None:
        data = extract_probe_dataset(dataset, encoder_model, codec, dis,
                                     config.eval.probe_transitions, config.seed,
                                     bins=config.eval.bins)
        metrics["probe"] = probe_report(data, config.seed, seeds=config.eval.probe_seeds)
        metrics["probe_skipped_objects"] = data.skipped
        metrics["probe_rows"] = int(len(data.groups))
        metrics["probe_bin_edges"] = {k: [round(float(x), 4) for x in v]
                                      for k, v in data.bin_edges.items()}
    write_metrics(os.path.join(out_dir, "eval"), metrics)
    log(stage="eval", event="done", fg_ari=ari_mean)
    return metrics


def write_metrics(out_dir, metrics):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_metrics_text(metrics))


def format_metrics_text(metrics):
    lines = [f"# {metrics.get('note', '')}", ""]
    if "fg_ari" in metrics:
        lines.append(f"{'fg_ari':24s} {metrics['fg_ari']['mean']:.4f}  "
                     f"({metrics['fg_ari']['frames']} frames)")
    roll = metrics.get("rollout")
    if roll:
        lines.append("")
        lines.append(f"rollout over {roll['episodes']} episodes, {roll['steps']} steps:")
        for key in ("latent_mse", "persistence_latent_mse", "latent_mse_ratio",
                    "psnr", "persistence_psnr", "ssim", "persistence_ssim"):
            lines.append(f"  {key:24s} {roll[key]:.4f}")
    probe = metrics.get("probe")
    if probe:
        props = list(next(iter(probe.values())).keys())
        lines.append("")
        header = f"  {'probe acc %':12s}" + "".join(f"{p:>12s}" for p in props)
        lines.append(header)
        for feat, row in probe.items():
            cells = "".join(f"{row[p]['mean']:12.1f}" for p in props)
            lines.append(f"  {feat:12s}{cells}")
    lines.append("")
    return "\n".join(lines)


# -- demo exports ------------------------------------------------------------------------------


def _to_image(frame):
    return (np.clip(np.asarray(frame, dtype=np.float32), 0.0, 1.0) * 255).astype(np.uint8)


def save_frame_grid(path, rows, upscale=2, pad=2):
    """rows: list of lists of HxWx3 float frames -> one PNG grid."""
    from PIL import Image

    imgs = [[_to_image(f) for f in row] for row in rows]
    h, w = imgs[0][0].shape[:2]
    n_cols = max(len(r) for r in imgs)
    canvas = np.full(((h + pad) * len(imgs) + pad, (w + pad) * n_cols + pad, 3), 32, dtype=np.uint8)
    for r, row in enumerate(imgs):
        for c, img in enumerate(row):
            y = pad + r * (h + pad)
            x = pad + c * (w + pad)
            canvas[y:y + h, x:x + w] = img
    img = Image.fromarray(canvas)
    if upscale > 1:
        img = img.resize((canvas.shape[1] * upscale, canvas.shape[0] * upscale), Image.NEAREST)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    img.save(path)


def export_rollouts(config, out_dir, wm, encoder_model, codec, n_episodes=4, log=null_logger):
    """Ground-truth row vs prediction row for a few held-out episodes."""
    heldout = heldout_episodes(config, count=max(n_episodes * 4, 16))
    trajs = episode_slot_trajectories(heldout, encoder_model, codec,
                                      slots_source=config.wm.slots_source)
    context, steps = config.wm.context, config.wm.rollout_steps
    roll_dir = os.path.join(out_dir, "rollouts")
    metrics = rollout_metrics(wm, encoder_model, codec, trajs, heldout.episodes,
                              context, steps, config.wm.slots_source)
    exported = 0
    for idx, (tr, ep) in enumerate(zip(trajs, heldout.episodes)):
        if len(tr["actions"]) < context + steps or exported >= n_episodes:
            continue
        pred = rollout(wm, tr["slots"][None, :context], tr["actions"][None], steps)["slots"][0]
        decoded = decode_slot_frames(encoder_model, codec, pred, config.wm.slots_source)
        gt_row = [ep.obs[context + j] for j in range(steps)]
        pred_row = [decoded[j] for j in range(steps)]
        save_frame_grid(os.path.join(roll_dir, f"rollout_ep{idx:03d}.png"), [gt_row, pred_row])
        exported += 1
    write_metrics(roll_dir, {"note": EXCLUDED_METRICS, "rollout": metrics})
    log(stage="rollout", event="done", exported=exported)
    return metrics


def detect_object_slot(encoder_model, codec, obs, gt_mask, sprite_id):
    """Slot bound to a sprite = argmax attention mass over the sprite's patches."""
    _, attn = encode_frames(encoder_model, codec, obs[None])
    h, w = gt_mask.shape
    p = codec.patch_size
    weights = (gt_mask == sprite_id).reshape(h // p, p, w // p, p).mean(axis=(1, 3)).reshape(-1)
    scores = attn[0] @ weights
    if scores.max() <= 0:
        raise ValueError(f"sprite {sprite_id} invisible: no attention overlap")
    return int(np.argmax(scores))


def swap_demo(config, out_dir, wm, encoder_model, codec, dis, steps=10,
              episode_pair=(0, 1), log=null_logger):
    """Exchange the agent slot's static feature between two episodes, roll
    both versions forward, and measure how the decoded agent color moves
    toward the donor while other sprites stay put."""
    if dis is None:
        raise PipelineError("swap demo needs a trained disentangler (wm.disentangle=true)")
    heldout = heldout_episodes(config, count=max(episode_pair) + 8)
    eligible = [ep for ep in heldout.episodes if len(ep.actions) >= steps]
    if len(eligible) <= max(episode_pair):
        raise ValueError("not enough long held-out episodes for the swap demo")
    ep_a, ep_b = eligible[episode_pair[0]], eligible[episode_pair[1]]
    agent_id = 1  # the agent is always sprite 1

    slots_a, _ = encode_frames(encoder_model, codec, ep_a.obs[:1])
    slots_b, _ = encode_frames(encoder_model, codec, ep_b.obs[:1])
    slot_a = detect_object_slot(encoder_model, codec, ep_a.obs[0], ep_a.masks[0], agent_id)
    slot_b = detect_object_slot(encoder_model, codec, ep_b.obs[0], ep_b.masks[0], agent_id)

    with no_grad():
        c_a, v_a = dis.split(Tensor(slots_a[0]))
        c_b, v_b = dis.split(Tensor(slots_b[0]))
        swapped = slots_a[0].copy()
        swapped[slot_a] = dis.recombiner(c_b[slot_b:slot_b + 1], v_a[slot_a:slot_a + 1]).data[0]

    actions = ep_a.actions[None]
    orig_roll = rollout(wm, slots_a[0][None, None], actions, steps)["slots"][0]
    swap_roll = rollout(wm, swapped[None, None], actions, steps)["slots"][0]
    dec_orig = decode_slot_frames(encoder_model, codec, orig_roll, config.wm.slots_source)
    dec_swap = decode_slot_frames(encoder_model, codec, swap_roll, config.wm.slots_source)

    donor_color = ep_b.obs[0][ep_b.masks[0] == agent_id].mean(axis=0)
    progress, rel_mse = [], []
    for j in range(steps):
        mask_j = ep_a.masks[min(j + 1, len(ep_a.masks) - 1)]
        agent_px = mask_j == agent_id
        other_px = (mask_j != 0) & ~agent_px
        if agent_px.any():
            rgb_orig = dec_orig[j][agent_px].mean(axis=0)
            rgb_swap = dec_swap[j][agent_px].mean(axis=0)
            base = float(np.linalg.norm(rgb_orig - donor_color))
            if base > 1e-6:
                progress.append(1.0 - float(np.linalg.norm(rgb_swap - donor_color)) / base)
        if other_px.any():
            delta = float(np.mean((dec_swap[j][other_px] - dec_orig[j][other_px]) ** 2))
            scale = float(np.mean(dec_orig[j][other_px] ** 2))
            rel_mse.append(delta / max(scale, 1e-8))

    result = {
        "agent_slot_a": slot_a,
        "agent_slot_b": slot_b,
        "color_progress": round(float(np.mean(progress)), 4) if progress else None,
        "other_sprites_rel_mse": round(float(np.mean(rel_mse)), 4) if rel_mse else None,
        "steps": steps,
    }
    demo_dir = os.path.join(out_dir, "swap_demo")
    rows = [[ep_a.obs[min(j + 1, len(ep_a.masks) - 1)] for j in range(steps)],
            [dec_orig[j] for j in range(steps)],
            [dec_swap[j] for j in range(steps)]]
    save_frame_grid(os.path.join(demo_dir, "swap_agent.png"), rows)
    write_metrics(demo_dir, {"note": "rows: ground truth / rollout / static-swapped rollout",
                             "swap": result})
    log(stage="swap-demo", event="done", **result)
    return result


# -- the whole pipeline --------------------------------------------------------------------------


def run_pipeline(config, out_dir, log=None):
    """collect -> train-encoder -> train-wm (-> disentangle) -> evaluate.

    Every stage resumes from its checkpoint when present; the config echo
    plus seed reproduce the run bit for bit.
    """
    os.makedirs(out_dir, exist_ok=True)
    log = log or jsonl_logger(os.path.join(out_dir, "logs.jsonl"))
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(echo_config(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    dataset = stage_dataset(config, out_dir, log)
    codec = build_codec(config)
    encoder_model = stage_encoder(config, out_dir, dataset, codec, log)
    wm, dis = stage_wm(config, out_dir, dataset, codec, encoder_model, log)
    metrics = stage_eval(config, out_dir, dataset, codec, encoder_model, wm, dis, log)
    return metrics
