import numpy as np
import pytest

from dyno import tensor as T
from dyno.dynamics import (InteractionAttention, SSMLayer, WorldModel,
                           rollout, wm_loss)
from dyno.tensor import ShapeError, Tensor, rng_for


def make_model(seed=0, d=16, heads=2, d_state=8, layers=2, actions=5):
    return WorldModel(d_slot=d, action_arity=actions, heads=heads, d_state=d_state,
                      n_layers=layers, hidden=32, rng=rng_for(seed, "test.wm"))


def randn(seed, *shape):
    return rng_for(seed, "test.data").standard_normal(shape).astype(np.float32)


class TestInteract:
    def test_permutation_equivariance(self):
        model = make_model()
        z = Tensor(randn(1, 2, 6, 16))
        a = np.array([1, 3])
        perm = np.random.default_rng(0).permutation(6)
        out = model.interact(z, a).numpy()
        out_p = model.interact(Tensor(z.numpy()[:, perm]), a).numpy()
        np.testing.assert_allclose(out_p, out[:, perm], atol=1e-6)

    def test_single_slot_depends_only_on_itself_and_action(self):
        model = make_model()
        z1 = Tensor(randn(2, 1, 1, 16))
        out_a = model.interact(z1, np.array([2])).numpy()
        out_b = model.interact(z1, np.array([2])).numpy()
        assert np.array_equal(out_a, out_b)

    def test_action_changes_output(self):
        model = make_model()
        z = Tensor(randn(3, 2, 4, 16))
        out0 = model.interact(z, np.array([0, 0])).numpy()
        out1 = model.interact(z, np.array([3, 3])).numpy()
        assert float(np.abs(out0 - out1).max()) > 0.0

    def test_unknown_action_rejected(self):
        model = make_model()
        z = Tensor(randn(4, 1, 4, 16))
        with pytest.raises(ValueError):
            model.interact(z, np.array([9]))


class TestSSMStep:
    def test_zero_input_zero_state_stays_zero(self):
        layer = SSMLayer(d_model=12, d_state=6, rng=rng_for(1, "ssm"))
        h = Tensor(np.zeros((2, 3, 6), dtype=np.float32))
        x = Tensor(np.zeros((2, 3, 12), dtype=np.float32))
        h2, y = layer.step(h, x)
        assert np.abs(h2.numpy()).max() == 0.0
        assert np.abs(y.numpy()).max() == 0.0  # both W_C h' and the D-term vanish

    def test_decay_strictly_inside_unit_interval(self):
        layer = SSMLayer(d_model=12, d_state=6, rng=rng_for(2, "ssm"))
        x = Tensor(10.0 * randn(5, 4, 3, 12))
        decay, _ = layer._gates(x)
        assert decay.numpy().min() > 0.0
        assert decay.numpy().max() < 1.0

    def test_stepwise_equals_scan(self):
        layer = SSMLayer(d_model=12, d_state=6, rng=rng_for(3, "ssm"))
        xs = Tensor(randn(6, 7, 2, 12))
        h0 = Tensor(np.zeros((2, 6), dtype=np.float32))
        _, ys_scan = layer.scan(xs, h0)
        h = h0
        ys = []
        for t in range(7):
            h, y = layer.step(h, xs[t])
            ys.append(y.numpy())
        np.testing.assert_allclose(np.stack(ys), ys_scan.numpy(), atol=1e-6)

    def test_full_stack_stepwise_equals_scan(self):
        model = make_model(seed=4)
        b, t, k = 3, 5, 4
        slots = randn(7, b, t, k, 16)
        actions = np.tile(np.arange(t) % 5, (b, 1))
        seq_pred, seq_r, seq_d = model.forward_sequence(Tensor(slots), actions)
        states = model.init_state(b, k)
        for step_idx in range(t):
            states, out = model.step(states, Tensor(slots[:, step_idx]), actions[:, step_idx])
            np.testing.assert_allclose(out.next_slots.numpy(),
                                       seq_pred.numpy()[:, step_idx], atol=1e-6)
            np.testing.assert_allclose(out.reward.numpy().reshape(b),
                                       seq_r.numpy()[:, step_idx, 0], atol=1e-6)


class TestPredictHeads:
    def test_scalar_heads_permutation_invariant(self):
        model = make_model(seed=5)
        states = Tensor(randn(8, 2, 6, 16))
        perm = np.random.default_rng(1).permutation(6)
        _, r, d = model.heads(states)
        _, r_p, d_p = model.heads(Tensor(states.numpy()[:, perm]))
        np.testing.assert_allclose(r_p.numpy(), r.numpy(), atol=1e-6)
        np.testing.assert_allclose(d_p.numpy(), d.numpy(), atol=1e-6)

    def test_slot_predictions_permute(self):
        model = make_model(seed=6)
        states = Tensor(randn(9, 2, 6, 16))
        perm = np.random.default_rng(2).permutation(6)
        z, _, _ = model.heads(states)
        z_p, _, _ = model.heads(Tensor(states.numpy()[:, perm]))
        np.testing.assert_allclose(z_p.numpy(), z.numpy()[:, perm], atol=1e-6)

    def test_shapes(self):
        model = make_model(seed=7)
        z, r, d = model.heads(Tensor(randn(10, 3, 4, 16)))
        assert z.shape == (3, 4, 16)
        assert r.shape == (3, 1)
        assert d.shape == (3, 1)


class _PerfectStub:
    """Feeds the ground truth back as predictions, with saturated done logits."""

    def __init__(self, slots, rewards, dones, logit=10.0):
        self._slots = slots
        self._rewards = rewards
        self._dones = dones
        self._logit = logit

    def forward_sequence(self, slots_in, actions):
        b, t = self._rewards.shape
        pred = Tensor(self._slots[:, 1:])
        r = Tensor(self._rewards.reshape(b, t, 1))
        d = Tensor(np.where(self._dones > 0.5, self._logit, -self._logit)
                   .astype(np.float32).reshape(b, t, 1))
        return pred, r, d


class TestWMLoss:
    def test_perfect_predictions(self):
        slots = randn(11, 2, 4, 3, 8)
        rewards = randn(12, 2, 3)
        dones = (np.random.default_rng(3).uniform(size=(2, 3)) < 0.5).astype(np.float32)
        stub = _PerfectStub(slots, rewards, dones)
        total, slot_term, reward_term, done_term = wm_loss(stub, slots,
                                                           np.zeros((2, 3), dtype=int),
                                                           rewards, dones)
        assert slot_term.item() == 0.0
        assert reward_term.item() == 0.0
        assert done_term.item() <= 1e-3  # saturated +-10 logits

    def test_minimum_length_two(self):
        model = make_model(seed=8)
        with pytest.raises(ValueError):
            wm_loss(model, randn(13, 1, 1, 2, 16), np.zeros((1, 0), dtype=int),
                    np.zeros((1, 0)), np.zeros((1, 0)))

    def test_t2_reduces_to_single_triple(self):
        model = make_model(seed=9)
        slots = randn(14, 1, 2, 3, 16)
        total, slot_term, reward_term, done_term = wm_loss(
            model, slots, np.array([[1]]), np.array([[0.0]]), np.array([[0.0]]))
        assert total.item() == pytest.approx(
            slot_term.item() + reward_term.item() + done_term.item(), rel=1e-6)

    def test_components_sum_exactly(self):
        model = make_model(seed=10)
        slots = randn(15, 2, 5, 3, 16)
        actions = np.random.default_rng(4).integers(0, 5, (2, 4))
        rewards = randn(16, 2, 4)
        dones = np.zeros((2, 4), dtype=np.float32)
        total, s, r, d = wm_loss(model, slots, actions, rewards, dones)
        assert total.item() == pytest.approx(s.item() + r.item() + d.item(), rel=1e-6)


class TestRollout:
    def test_zero_steps_empty(self):
        model = make_model(seed=11)
        out = rollout(model, randn(17, 1, 2, 3, 16), np.zeros((1, 5), dtype=int), steps=0)
        assert out["slots"].shape == (1, 0, 3, 16)

    def test_deterministic(self):
        model = make_model(seed=12)
        ctx = randn(18, 2, 3, 4, 16)
        actions = np.random.default_rng(5).integers(0, 5, (2, 12))
        a = rollout(model, ctx, actions, steps=6)
        b = rollout(model, ctx, actions, steps=6)
        assert np.array_equal(a["slots"], b["slots"])
        assert np.array_equal(a["rewards"], b["rewards"])

    def test_composed_permutation_equivariance(self):
        model = make_model(seed=13)
        ctx = randn(19, 2, 3, 5, 16)
        actions = np.random.default_rng(6).integers(0, 5, (2, 12))
        perm = np.random.default_rng(7).permutation(5)
        base = rollout(model, ctx, actions, steps=6)
        permuted = rollout(model, ctx[:, :, perm], actions, steps=6)
        np.testing.assert_allclose(permuted["slots"], base["slots"][:, :, perm], atol=1e-5)
        np.testing.assert_allclose(permuted["rewards"], base["rewards"], atol=1e-6)
        np.testing.assert_allclose(permuted["done_logits"], base["done_logits"], atol=1e-6)

    def test_needs_enough_actions(self):
        model = make_model(seed=14)
        with pytest.raises(ShapeError):
            rollout(model, randn(20, 1, 3, 2, 16), np.zeros((1, 3), dtype=int), steps=4)
