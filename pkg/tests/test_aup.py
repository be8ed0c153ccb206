import hashlib
import math

import numpy as np
import pytest

from fgfp import aup, nn
from fgfp.errors import NumericError, UsageError


def _tiny_model(seed=0):
    specs = [
        nn.LayerSpec("conv", (4, 2, 3, 3, 1, 1), layer_id="conv1"),
        nn.LayerSpec("relu", layer_id="relu1"),
        nn.LayerSpec("fc", (4 * 4 * 4, 5), layer_id="fc"),
    ]
    return nn.build_model(specs, (2, 4, 4), seed=seed)


class ScriptedTrainer:
    """Returns a scripted accuracy sequence; optionally perturbs weights in
    fine_tune (like real training would) and records entry states."""

    def __init__(self, accs, perturb=False, fail_on=()):
        self.accs = list(accs)
        self.calls = 0
        self.perturb = perturb
        self.fail_on = set(fail_on)  # fine_tune call indices that blow up
        self.finetune_entries = []  # model state captured at call entry
        self.finetune_count = 0

    def fine_tune(self, model, epochs):
        self.finetune_entries.append(model.state_capture())
        idx = self.finetune_count
        self.finetune_count += 1
        if idx in self.fail_on:
            raise NumericError("scripted blow-up")
        if self.perturb:
            rng = np.random.default_rng(idx)
            for layer in aup.prunable_layers(model):
                noise = rng.normal(0, 0.01, size=layer.weight.value.shape).astype(
                    layer.weight.value.dtype
                )
                if layer.mask is not None:
                    noise = noise * layer.mask
                layer.weight.value = layer.weight.value + noise

    def validation_accuracy(self, model):
        acc = self.accs[min(self.calls, len(self.accs) - 1)]
        self.calls += 1
        return acc


def _base_config(**kw):
    defaults = dict(target_sparsity=0.5, theta_acc=90.0, p_r=0.05,
                    finetune_epochs=1, final_finetune_epochs=1)
    defaults.update(kw)
    return aup.PruneConfig(**defaults)


# --------------------------------------------------------------------------
# layer_threshold / prune_layer
# --------------------------------------------------------------------------


def test_threshold_quantile_example():
    w = np.array([0.5, -0.1, 0.02, -0.3, 0.0], dtype=np.float32)
    layer = aup.MaskedLayer(w, np.ones_like(w, dtype=np.uint8), "t")
    # 4 nonzero, ceil(0.25 * 4) = 1 -> smallest magnitude
    assert aup.layer_threshold(layer, 0.25) == np.float32(0.02)


def test_threshold_zero_rate_prunes_nothing():
    w = np.array([0.5, -0.1, 0.3], dtype=np.float32)
    layer = aup.MaskedLayer(w, np.ones_like(w, dtype=np.uint8), "t")
    assert aup.layer_threshold(layer, 0.0) == 0.0
    assert aup.prune_layer(layer, 0.0) == 0
    assert np.count_nonzero(w) == 3


def test_threshold_all_zero_layer_skips():
    w = np.zeros(6, dtype=np.float32)
    layer = aup.MaskedLayer(w, np.zeros(6, dtype=np.uint8), "t")
    assert aup.layer_threshold(layer, 0.25) is None
    assert aup.prune_layer(layer, 0.25) == 0


def test_tied_magnitudes_prune_exact_count_by_index():
    w = np.full(10, 0.5, dtype=np.float32)
    layer = aup.MaskedLayer(w, np.ones(10, dtype=np.uint8), "t")
    pruned = aup.prune_layer(layer, 0.25)
    assert pruned == 3  # ceil(0.25 * 10)
    np.testing.assert_array_equal(layer.mask[:3], [0, 0, 0])
    np.testing.assert_array_equal(layer.mask[3:], np.ones(7, dtype=np.uint8))


def test_prune_layer_removes_smallest_magnitudes(rng):
    w = rng.normal(size=32).astype(np.float32)
    layer = aup.MaskedLayer(w.copy(), np.ones(32, dtype=np.uint8), "t")
    before = np.abs(w)
    aup.prune_layer(layer, 0.25)
    pruned = layer.mask == 0
    # threshold consistency: no survivor is smaller than a pruned entry
    assert before[pruned].max() <= before[~pruned].min()


def test_masked_layer_validation():
    w = np.array([1.0, 0.0], dtype=np.float32)
    aup.MaskedLayer(w, np.array([1, 0], dtype=np.uint8), "ok").validate()
    with pytest.raises(UsageError):
        aup.MaskedLayer(
            np.array([1.0, 2.0], dtype=np.float32),
            np.array([1, 0], dtype=np.uint8), "bad",
        ).validate()


# --------------------------------------------------------------------------
# prune_round
# --------------------------------------------------------------------------


def test_accepted_round_advances_state():
    model = _tiny_model()
    aup.ensure_masks(model)
    cfg = _base_config()
    state = aup.PruneState.from_config(cfg)
    trainer = ScriptedTrainer([95.0], perturb=True)
    s_before = aup.global_sparsity(model)
    accepted = aup.prune_round(model, state, trainer, cfg)
    assert accepted and state.round == 1 and state.fail_count == 0
    assert aup.global_sparsity(model) > s_before
    assert state.history[-1].action == "accept"


def test_rejected_round_rolls_back_bit_exact():
    model = _tiny_model()
    aup.ensure_masks(model)
    cfg = _base_config()
    state = aup.PruneState.from_config(cfg)
    snapshot = model.state_capture()
    trainer = ScriptedTrainer([80.0], perturb=True)
    accepted = aup.prune_round(model, state, trainer, cfg)
    assert not accepted and state.fail_count == 1
    # the second fine_tune call (the extra tune) must see exactly the
    # pre-round snapshot
    assert len(trainer.finetune_entries) == 2
    restored = trainer.finetune_entries[1]
    for key in snapshot:
        np.testing.assert_array_equal(snapshot[key], restored[key])
    assert state.history[-1].action == "reject"


def test_numeric_failure_rejects_but_continues():
    model = _tiny_model()
    aup.ensure_masks(model)
    cfg = _base_config()
    state = aup.PruneState.from_config(cfg)
    trainer = ScriptedTrainer([95.0], fail_on={0})
    accepted = aup.prune_round(model, state, trainer, cfg)
    assert not accepted
    assert state.fail_count == 1
    assert math.isnan(state.history[-1].val_acc)


def test_round_with_no_prunable_layers_is_noop_accept():
    model = nn.build_model([nn.LayerSpec("relu", layer_id="r")], (1, 2, 2), seed=0)
    cfg = _base_config()
    state = aup.PruneState.from_config(cfg)
    trainer = ScriptedTrainer([0.0])
    assert aup.prune_round(model, state, trainer, cfg)
    assert state.round == 1
    assert trainer.finetune_count == 0


# --------------------------------------------------------------------------
# adapt_rate
# --------------------------------------------------------------------------


def test_adapt_rate_halves():
    state = aup.PruneState(p_r=0.04, theta_acc=90, target_sparsity=0.5,
                           fail_count=3, max_fails=3)
    aup.adapt_rate(state)
    assert state.p_r == 0.02 and state.fail_count == 0
    assert state.status == aup.STATUS_RUNNING


def test_adapt_rate_floor_is_terminal():
    state = aup.PruneState(p_r=0.005, theta_acc=90, target_sparsity=0.5,
                           fail_count=3, max_fails=3, p_r_min=0.005)
    aup.adapt_rate(state)
    assert state.status == aup.STATUS_FAILED


def test_adapt_rate_below_max_fails_is_noop():
    state = aup.PruneState(p_r=0.04, theta_acc=90, target_sparsity=0.5,
                           fail_count=2, max_fails=3)
    aup.adapt_rate(state)
    assert state.p_r == 0.04 and state.fail_count == 2


# --------------------------------------------------------------------------
# run_aup
# --------------------------------------------------------------------------


def test_always_accept_reaches_target_within_geometric_bound():
    model = _tiny_model()
    cfg = _base_config(target_sparsity=0.8, p_r=0.05)
    trainer = ScriptedTrainer([99.0], perturb=True)
    model, state = aup.run_aup(model, cfg, trainer)
    assert state.status == aup.STATUS_REACHED
    accepted = [r for r in state.history if r.action == "accept"]
    assert len(accepted) <= 32  # ceil(ln 0.2 / ln 0.95)
    sparsities = [r.sparsity for r in accepted]
    assert all(b > a for a, b in zip(sparsities, sparsities[1:]))
    assert aup.global_sparsity(model) >= 0.8
    assert state.history[-1].action == "final"


def test_always_reject_fails_terminally_with_initial_model():
    model = _tiny_model()
    aup.ensure_masks(model)
    initial = model.state_capture()
    cfg = _base_config(target_sparsity=0.8, p_r=0.05)
    trainer = ScriptedTrainer([10.0], perturb=True)
    model, state = aup.run_aup(model, cfg, trainer)
    assert state.status == aup.STATUS_FAILED
    assert all(r.action == "reject" for r in state.history)
    # nothing was ever accepted: the best model is the initial one
    final = model.state_capture()
    for key in initial:
        np.testing.assert_array_equal(initial[key], final[key])


def test_alternating_script_moves_sparsity_only_on_accepts():
    model = _tiny_model()
    cfg = _base_config(target_sparsity=0.3, p_r=0.05, max_fails=10)
    script = [95.0 if i % 2 == 0 else 10.0 for i in range(100)]
    trainer = ScriptedTrainer(script, perturb=True)
    model, state = aup.run_aup(model, cfg, trainer)
    assert state.status == aup.STATUS_REACHED
    rounds = [r for r in state.history if r.action in ("accept", "reject")]
    last = 0.0
    for rec in rounds:
        if rec.action == "accept":
            assert rec.sparsity > last
            last = rec.sparsity
        else:
            assert rec.sparsity == last


def test_target_zero_returns_immediately():
    model = _tiny_model()
    cfg = _base_config(target_sparsity=0.0)
    trainer = ScriptedTrainer([99.0])
    model, state = aup.run_aup(model, cfg, trainer)
    assert state.status == aup.STATUS_REACHED
    assert state.history == []
    assert trainer.finetune_count == 0


def test_masks_monotone_across_accepted_rounds():
    model = _tiny_model()
    cfg = _base_config(target_sparsity=0.6, p_r=0.1)
    trainer = ScriptedTrainer([99.0], perturb=True)
    masks = []

    class Spy(ScriptedTrainer):
        def validation_accuracy(self, m):
            masks.append({l.layer_id: l.mask.copy() for l in aup.prunable_layers(m)})
            return super().validation_accuracy(m)

    spy = Spy([99.0], perturb=True)
    aup.run_aup(model, cfg, spy)
    for prev, cur in zip(masks, masks[1:]):
        for lid in prev:
            assert not np.any((prev[lid] == 0) & (cur[lid] == 1))


def test_per_layer_independence(rng):
    # pruning counts per layer depend only on that layer's own weights
    def counts_for(model, p_r):
        out = {}
        for layer in aup.prunable_layers(model):
            snapshot = layer.weight.value.copy(), layer.mask.copy()
            out[layer.layer_id] = aup.prune_layer(aup.masked_view(layer), p_r)
            layer.weight.value, layer.mask = snapshot
        return out

    m1 = _tiny_model(seed=1)
    aup.ensure_masks(m1)
    base = counts_for(m1, 0.25)

    m2 = _tiny_model(seed=1)
    aup.ensure_masks(m2)
    fc = m2.layer_by_id("fc")
    perm = rng.permutation(fc.weight.value.size)
    fc.weight.value = fc.weight.value.reshape(-1)[perm].reshape(fc.weight.value.shape)
    assert counts_for(m2, 0.25)["conv1"] == base["conv1"]


def test_sparsity_exact_integer_accounting():
    model = _tiny_model()
    aup.ensure_masks(model)
    conv = model.layer_by_id("conv1")
    fc = model.layer_by_id("fc")
    conv.weight.value = np.ones_like(conv.weight.value)
    fc.weight.value = np.ones_like(fc.weight.value)
    aup.prune_layer(aup.masked_view(conv), 0.5)
    total = conv.weight.value.size + fc.weight.value.size
    nz = int(np.count_nonzero(conv.weight.value)) + fc.weight.value.size
    assert aup.global_sparsity(model) == 1.0 - nz / total


def _history_digest(state):
    text = "\n".join(
        f"{r.round},{r.action},{r.p_r},{r.sparsity},{r.val_acc}"
        for r in state.history
    )
    return hashlib.sha256(text.encode()).hexdigest()


def test_deterministic_history_with_scripted_trainer():
    digests = []
    for _ in range(2):
        model = _tiny_model(seed=3)
        cfg = _base_config(target_sparsity=0.4, p_r=0.07)
        trainer = ScriptedTrainer([95.0, 10.0, 95.0], perturb=True)
        _, state = aup.run_aup(model, cfg, trainer)
        digests.append(_history_digest(state))
    assert digests[0] == digests[1]


def test_history_csv_format():
    model = _tiny_model()
    cfg = _base_config(target_sparsity=0.2)
    _, state = aup.run_aup(model, cfg, ScriptedTrainer([99.0], perturb=True))
    lines = aup.history_csv_lines(state)
    assert lines[0] == "round,action,p_r,global_sparsity,val_acc,wall_seconds"
    assert all(len(line.split(",")) == 6 for line in lines[1:])
