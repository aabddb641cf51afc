import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from colld.autodiff import Tensor, grad
from colld.exceptions import ConfigurationError, UsageError
from colld.losses import (DistillConfig, candidate_matrix, contrastive_layer_loss, init_heads, instance_norm,
                          l2_layer_loss, sample_distractors, total_loss)
from colld.mapping import LayerMap, layer_map
from colld.masking import MaskSpec

RNG = np.random.default_rng


def _mask(n, idx):
    return MaskSpec(n, np.asarray(idx), 0.0, 1)


def test_singleton_mask_gives_zero_loss():
    z, h = RNG(0).normal(size=(4, 3)), RNG(1).normal(size=(4, 3))
    loss = contrastive_layer_loss(z, h, _mask(4, [2]), 100, 0.1, RNG(0))
    assert float(loss.data) == 0.0


def test_opposite_distractor_closed_form():
    # frame 0: cos with own target 1, with the other -1; frame 1 mirrors it
    z = np.array([[1.0, 0.0], [-1.0, 0.0]])
    h = z.copy()
    for normalized in (True, False):
        loss = float(contrastive_layer_loss(z, h, _mask(2, [0, 1]), 1, 0.1, RNG(0), normalized=normalized).data)
        per_frame = math.log1p(math.exp(-20.0))
        assert loss == pytest.approx(per_frame * (1 if normalized else 2), abs=1e-12)
    assert per_frame == pytest.approx(2.06e-9, rel=1e-2)


@pytest.mark.parametrize("tau", [0.01, 0.1, 1.0, 7.0])
def test_symmetric_candidates_give_log_two(tau):
    # every cosine equals 0.5, so the softmax is uniform over two candidates
    a, b = np.array([1.0, 0.0]), np.array([0.5, math.sqrt(3) / 2])
    z = np.array([a, a])
    h = np.array([b, b])
    loss = contrastive_layer_loss(z, h, _mask(2, [0, 1]), 1, tau, RNG(0))
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)


def test_l2_oracles():
    z, h = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert float(l2_layer_loss(z, h, _mask(1, [0]), normalized=False).data) == 2.0
    assert float(l2_layer_loss(z, h, _mask(1, [0]), normalized=True).data) == 1.0
    assert float(l2_layer_loss(z, z, _mask(1, [0])).data) == 0.0


def test_shape_mismatch():
    with pytest.raises(ConfigurationError):
        l2_layer_loss(np.zeros((3, 2)), np.zeros((3, 4)), _mask(3, [0]))
    with pytest.raises(ConfigurationError):
        contrastive_layer_loss(np.zeros((3, 2)), np.zeros((3, 2)), _mask(3, [0]), 1, 0.0, RNG(0))


def test_distractor_examples():
    assert sample_distractors(_mask(10, [3]), 3, 100, RNG(0)).size == 0
    assert sample_distractors(_mask(10, [1, 2, 3]), 2, 0, RNG(0)).size == 0
    with pytest.raises(UsageError):
        sample_distractors(_mask(10, [1, 2]), 5, 3, RNG(0))


@given(st.integers(0, 2**32 - 1))
def test_distractors_distinct_and_exclude_anchor(seed):
    mask = _mask(201, np.arange(1, 201))
    d = sample_distractors(mask, 5, 100, RNG(seed))
    assert d.size == 100 and len(set(d.tolist())) == 100
    assert 5 not in d and all(x in mask for x in d)


@given(st.integers(1, 40), st.integers(0, 60), st.integers(0, 2**32 - 1))
def test_candidate_matrix_rows(n, k, seed):
    c = candidate_matrix(n, k, RNG(seed))
    k_eff = min(k, n - 1)
    assert c.shape == (n, 1 + max(k_eff, 0))
    assert np.array_equal(c[:, 0], np.arange(n))
    for i, row in enumerate(c):
        assert len(set(row.tolist())) == len(row)


@given(st.integers(0, 2**32 - 1))
def test_contrastive_ignores_vector_scale(seed):
    rng = RNG(seed)
    z, h = rng.normal(size=(12, 5)), rng.normal(size=(12, 5))
    mask = _mask(12, [0, 2, 3, 4, 7, 9, 11])
    base = float(contrastive_layer_loss(z, h, mask, 4, 0.1, RNG(1)).data)
    zs = z * rng.uniform(0.5, 5.0, size=(12, 1))
    hs = h * rng.uniform(0.5, 5.0, size=(12, 1))
    scaled = float(contrastive_layer_loss(zs, hs, mask, 4, 0.1, RNG(1)).data)
    assert scaled == pytest.approx(base, rel=1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(0, 8), st.sampled_from([0.05, 0.1, 1.0]))
def test_contrastive_bounds(seed, k, tau):
    rng = RNG(seed)
    z, h = rng.normal(size=(10, 4)), rng.normal(size=(10, 4))
    mask = _mask(10, [1, 2, 4, 5, 8])
    loss = float(contrastive_layer_loss(z, h, mask, k, tau, RNG(seed)).data)
    k_eff = min(k, len(mask) - 1)
    assert 0.0 <= loss <= math.log(k_eff + 1) + 2 / tau + 1e-9


def test_gradient_only_reaches_masked_frames():
    rng = RNG(3)
    z = Tensor(rng.normal(size=(8, 4)), requires_grad=True)
    h = rng.normal(size=(8, 4))
    mask = _mask(8, [1, 2, 6])
    for loss in (contrastive_layer_loss(z, h, mask, 2, 0.1, RNG(0)), l2_layer_loss(z, h, mask)):
        (g,) = grad(loss, [z])
        unmasked = np.setdiff1d(np.arange(8), mask.masked)
        assert not np.any(g[unmasked])
        assert np.any(g[mask.masked])


def test_contrastive_descends_on_toy_instance():
    rng = RNG(0)
    h = rng.normal(size=(30, 8))
    zv = rng.normal(size=(30, 8))
    mask = _mask(30, np.arange(0, 30, 2))
    cands = candidate_matrix(len(mask), 5, RNG(1))
    losses = []
    for _ in range(200):
        z = Tensor(zv, requires_grad=True)
        loss = contrastive_layer_loss(z, h, mask, 5, 0.1, None, candidates=cands)
        (g,) = grad(loss, [z])
        losses.append(float(loss.data))
        zv = zv - 0.05 * g
    increases = sum(b > a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]
    assert increases <= 0.05 * len(losses)


def _cfg(**kw):
    return DistillConfig(total_steps=10, warmup_steps=1, **kw)


def test_total_loss_identical_taps_l2_is_zero():
    rng = RNG(0)
    taps = {1: rng.normal(size=(2, 6, 4)), 2: rng.normal(size=(2, 6, 4))}
    lmap = layer_map(2, 2)
    masks = [_mask(6, [0, 3]), _mask(6, [1, 2, 5])]
    loss, per_layer = total_loss(taps, taps, {}, lmap, masks, _cfg(loss_kind="l2"), RNG(0))
    assert float(loss.data) == 0.0 and per_layer == [0.0, 0.0]


def test_total_loss_single_layer_single_utterance_is_the_layer_loss():
    rng = RNG(1)
    z, h = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    lmap = LayerMap(((1, 1),), 1, 1)
    mask = _mask(6, [0, 2, 3])
    loss, _ = total_loss({1: z}, {1: h}, {}, lmap, mask, _cfg(num_distractors=2), RNG(5))
    direct = contrastive_layer_loss(z, h, mask, 2, 0.1, RNG(5))
    assert float(loss.data) == float(direct.data)


def test_total_loss_is_batch_mean_and_layer_mean():
    rng = RNG(2)
    z = {1: rng.normal(size=(2, 5, 3)), 2: rng.normal(size=(2, 5, 3))}
    h = {1: rng.normal(size=(2, 5, 3)), 3: rng.normal(size=(2, 5, 3))}
    lmap = layer_map(2, 3)
    masks = [_mask(5, [0, 1]), _mask(5, [2, 3, 4])]
    loss, _ = total_loss(z, h, {}, lmap, masks, _cfg(loss_kind="l2"), RNG(0))
    per_utt = []
    for b in range(2):
        layer_losses = [float(l2_layer_loss(z[1][b], h[1][b], masks[b]).data),
                        float(l2_layer_loss(z[2][b], h[3][b], masks[b]).data)]
        per_utt.append(sum(layer_losses) / 2)
    assert float(loss.data) == pytest.approx(sum(per_utt) / 2, rel=1e-12)


def test_total_loss_skips_empty_masks():
    rng = RNG(3)
    z = {1: rng.normal(size=(2, 5, 3)), 2: rng.normal(size=(2, 5, 3))}
    lmap = layer_map(2, 2)
    both, _ = total_loss(z, {k: v * 0 + 1 for k, v in z.items()}, {}, lmap,
                         [_mask(5, [1]), MaskSpec.empty(5)], _cfg(loss_kind="l2"), RNG(0))
    alone, _ = total_loss({k: v[:1] for k, v in z.items()}, {k: v[:1] * 0 + 1 for k, v in z.items()}, {},
                          lmap, [_mask(5, [1])], _cfg(loss_kind="l2"), RNG(0))
    assert float(both.data) == float(alone.data)


def test_total_loss_missing_layer():
    with pytest.raises(UsageError):
        total_loss({1: np.zeros((4, 2))}, {1: np.zeros((4, 2))}, {}, layer_map(2, 2), _mask(4, [0]), _cfg(), RNG(0))


def test_total_loss_is_deterministic_given_rng():
    rng = RNG(4)
    z = {1: rng.normal(size=(1, 20, 3)), 2: rng.normal(size=(1, 20, 3))}
    h = {1: rng.normal(size=(1, 20, 3)), 4: rng.normal(size=(1, 20, 3))}
    mask = _mask(20, np.arange(3, 17))
    a, _ = total_loss(z, h, {}, layer_map(2, 4), mask, _cfg(num_distractors=3), RNG(9))
    b, _ = total_loss(z, h, {}, layer_map(2, 4), mask, _cfg(num_distractors=3), RNG(9))
    assert float(a.data) == float(b.data)


def test_projection_heads():
    lmap = layer_map(2, 4)
    heads = init_heads(lmap, 6, 10, seed=0)
    assert sorted(heads) == ["heads.1.bias", "heads.1.weight", "heads.2.bias", "heads.2.weight"]
    assert heads["heads.1.weight"].shape == (6, 10)
    assert init_heads(lmap, 6, 6, seed=0, projection="none") == {}
    with pytest.raises(ConfigurationError):
        init_heads(lmap, 6, 10, seed=0, projection="none")


def test_cross_width_needs_projection():
    z = {1: np.ones((1, 4, 3)), 2: np.ones((1, 4, 3))}
    h = {1: np.ones((1, 4, 5)), 2: np.ones((1, 4, 5))}
    with pytest.raises(ConfigurationError):
        total_loss(z, h, {}, layer_map(2, 2), _mask(4, [0, 1]), _cfg(), RNG(0))


def test_instance_norm_ignores_padding():
    h = np.concatenate([RNG(0).normal(size=(5, 3)), np.full((3, 3), 99.0)])
    out = instance_norm(h, 5)
    np.testing.assert_allclose(out[:5].mean(axis=0), 0, atol=1e-12)
    assert np.all(out[5:] == 0)


@pytest.mark.parametrize("kw,key", [
    ({"temperature": 0}, "temperature"), ({"num_distractors": -1}, "num_distractors"),
    ({"loss_kind": "l1"}, "loss_kind"), ({"warmup_steps": 0}, "warmup_steps"),
])
def test_distill_config_validation(kw, key):
    with pytest.raises(ConfigurationError) as info:
        DistillConfig(**kw)
    assert info.value.key == key


def test_distill_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError) as info:
        DistillConfig.from_dict({"tau": 0.1})
    assert info.value.key == "tau"


def test_default_hyperparameters():
    cfg = DistillConfig()
    assert (cfg.temperature, cfg.num_distractors, cfg.mask_prob, cfg.mask_span) == (0.1, 100, 0.065, 10)
    assert (cfg.peak_lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.warmup_steps) == (1e-4, 0.9, 0.98, 1e-2, 4000)
