import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import TINY, TINY_GAP, random_image, random_model
from services.attack_config import AttackConfig, EliminationMode, PatchOutConfig, SelectionMode, TgrConfig
from services.errors import ConfigError, DimensionError, DomainError
from services.tensor_core import make_rng
from services.tgr_attack import (
    attack,
    clip_project,
    mim_step,
    patchout_mask,
    regularize_attention_map,
    regularize_token_matrix,
    run_attacks,
    sample_patch_indices,
    select_extreme_tokens,
    tgr_hook,
)
from services.vit_net import ComponentKind, ModuleGradient, backward, cross_entropy, forward

ORACLE_CASES = 1000


def oracle_extremes(values, k, mode):
    """k largest then k smallest of the remaining, ties to the lowest index"""
    key = [abs(v) for v in values] if mode is SelectionMode.MAGNITUDE else list(values)
    order_top = sorted(range(len(key)), key=lambda i: (-key[i], i))
    top = order_top[:k]
    rest = [i for i in sorted(range(len(key)), key=lambda i: (key[i], i)) if i not in top]
    return top + rest[:k]


def oracle_token_matrix(grad, cfg, s, skip):
    mask = np.zeros(grad.shape, dtype=bool)
    if cfg.k:
        if cfg.elimination_mode is EliminationMode.PER_CHANNEL_ENTRY:
            for c in range(grad.shape[1]):
                for r in oracle_extremes(grad[skip:, c], cfg.k, cfg.selection_mode):
                    mask[r + skip, c] = True
        else:
            scores = np.abs(grad[skip:]).sum(axis=1)
            for r in oracle_extremes(scores, cfg.k, cfg.selection_mode):
                mask[r + skip, :] = True
    return np.where(mask, 0.0, grad * s)


def oracle_attention(grad, cfg, s, skip):
    M, S, _ = grad.shape
    span = S - skip
    mask = np.zeros(grad.shape, dtype=bool)
    if cfg.k:
        if cfg.elimination_mode is EliminationMode.PER_CHANNEL_ENTRY:
            for h in range(M):
                flat = grad[h, skip:, skip:].reshape(-1)
                for e in oracle_extremes(flat, cfg.k, cfg.selection_mode):
                    mask[h, e // span + skip, :] = True
                    mask[h, :, e % span + skip] = True
        else:
            flat = grad[:, skip:, skip:].reshape(-1)
            for e in oracle_extremes(flat, cfg.k, cfg.selection_mode):
                r, c = (e % (span * span)) // span + skip, e % span + skip
                mask[:, r, :] = True
                mask[:, :, c] = True
    return np.where(mask, 0.0, grad * s)


class TestSelectExtremeTokens:

    def test_signed(self):
        assert select_extreme_tokens(np.array([0.5, -2.0, 3.0, 0.1, -0.7]), 1) == [1, 2]

    def test_magnitude(self):
        values = np.array([0.5, -2.0, 3.0, 0.1, -0.7])
        assert select_extreme_tokens(values, 1, SelectionMode.MAGNITUDE) == [2, 3]

    def test_k2(self):
        values = np.array([4.0, -1.0, 0.0, 9.0, -5.0, 2.0])
        assert select_extreme_tokens(values, 2) == [0, 1, 3, 4]

    def test_ties_go_to_lowest_index(self):
        assert select_extreme_tokens(np.ones(5), 1) == [0, 1]
        assert select_extreme_tokens(np.ones(5), 2) == [0, 1, 2, 3]

    def test_k_zero(self):
        assert select_extreme_tokens(np.arange(3.0), 0) == []

    def test_k_too_large(self):
        with pytest.raises(ConfigError) as err:
            select_extreme_tokens(np.arange(4.0), 2)
        assert err.value.key == "tgr.k"


class TestRegularizeTokenMatrix:

    def test_hand_example_per_channel(self):
        grad = np.array([
            [1.0, -1.0],
            [5.0, 2.0],
            [-3.0, 0.5],
            [2.0, 7.0],
            [0.0, -4.0],
        ])
        out = regularize_token_matrix(grad, TgrConfig(k=1), s=0.5)
        expected = 0.5 * grad
        expected[1, 0] = expected[2, 0] = 0.0   # channel 0: max 5 at row 1, min -3 at row 2
        expected[3, 1] = expected[4, 1] = 0.0   # channel 1: max 7 at row 3, min -4 at row 4
        assert_array_equal(out, expected)

    def test_hand_example_global_rows(self):
        grad = np.array([
            [1.0, 1.0],
            [4.0, -4.0],
            [0.1, 0.0],
            [2.0, 0.0],
            [-1.0, 0.5],
        ])
        cfg = TgrConfig(k=1, elimination_mode=EliminationMode.GLOBAL_TOKEN_ROW)
        out = regularize_token_matrix(grad, cfg, s=1.0)
        expected = grad.copy()
        expected[1] = 0.0   # largest L1 norm
        expected[2] = 0.0   # smallest L1 norm
        assert_array_equal(out, expected)

    def test_skip_leading_protects_class_token(self):
        grad = np.array([[100.0], [1.0], [2.0], [3.0], [4.0]])
        out = regularize_token_matrix(grad, TgrConfig(k=1), s=1.0, skip_leading=1)
        assert out[0, 0] == 100.0
        assert_array_equal(out[1:, 0], [0.0, 2.0, 3.0, 0.0])

    def test_input_untouched(self):
        grad = make_rng(0).normal(size=(5, 3))
        before = grad.copy()
        regularize_token_matrix(grad, TgrConfig(k=1), s=0.25)
        assert_array_equal(grad, before)

    def test_k_zero_only_scales(self):
        grad = make_rng(1).normal(size=(5, 3))
        assert_array_equal(regularize_token_matrix(grad, TgrConfig(k=0), s=0.75), grad * 0.75)

    def test_wrong_rank(self):
        with pytest.raises(DimensionError):
            regularize_token_matrix(np.zeros((2, 5, 3)), TgrConfig(), s=1.0)


class TestRegularizeAttentionMap:

    def test_hand_example_per_head(self):
        grad = np.zeros((2, 3, 3))
        grad[0, 1, 2] = 5.0
        grad[0, 0, 0] = -4.0
        grad[1, 2, 1] = 3.0
        grad[1, 1, 0] = -6.0
        grad += 0.01 * np.arange(18).reshape(2, 3, 3) / 18.0
        out = regularize_attention_map(grad, TgrConfig(k=1), s=1.0)
        kept = np.ones_like(grad, dtype=bool)
        kept[0, [1, 0], :] = False
        kept[0, :, [2, 0]] = False
        kept[1, [2, 1], :] = False
        kept[1, :, [1, 0]] = False
        assert_array_equal(out, np.where(kept, grad, 0.0))

    def test_global_mode_zeroes_across_heads(self):
        grad = 0.01 * make_rng(2).uniform(size=(2, 4, 4))
        grad[1, 2, 3] = 9.0
        grad[0, 0, 1] = -9.0
        cfg = TgrConfig(k=1, elimination_mode=EliminationMode.GLOBAL_TOKEN_ROW)
        out = regularize_attention_map(grad, cfg, s=1.0)
        for h in range(2):
            assert np.all(out[h, 2, :] == 0.0) and np.all(out[h, :, 3] == 0.0)
            assert np.all(out[h, 0, :] == 0.0) and np.all(out[h, :, 1] == 0.0)
        assert out[0, 1, 0] == grad[0, 1, 0]

    def test_not_square(self):
        with pytest.raises(DimensionError):
            regularize_attention_map(np.zeros((2, 3, 4)), TgrConfig(), s=1.0)


class TestMaskOracle:

    @pytest.mark.parametrize("kind", list(ComponentKind))
    def test_random_gradients_match_brute_force(self, kind):
        rng = make_rng(list(ComponentKind).index(kind) + 1)
        for case in range(ORACLE_CASES):
            S = int(rng.integers(4, 8))
            skip = int(rng.integers(0, 2))
            k = int(rng.integers(0, (S - skip - 1) // 2 + 1))
            cfg = TgrConfig(
                k=k,
                selection_mode=SelectionMode.MAGNITUDE if rng.uniform() < 0.5 else SelectionMode.SIGNED,
                elimination_mode=EliminationMode.GLOBAL_TOKEN_ROW if rng.uniform() < 0.5
                else EliminationMode.PER_CHANNEL_ENTRY,
            )
            s = float(rng.uniform())
            if kind is ComponentKind.ATTENTION:
                grad = rng.normal(size=(int(rng.integers(1, 4)), S, S))
                if case % 7 == 0:
                    grad = np.round(grad)  # force ties
                out = regularize_attention_map(grad, cfg, s, skip_leading=skip)
                expected = oracle_attention(grad, cfg, s, skip)
            else:
                grad = rng.normal(size=(S, int(rng.integers(1, 6))))
                if case % 7 == 0:
                    grad = np.round(grad)
                out = regularize_token_matrix(grad, cfg, s, skip_leading=skip)
                expected = oracle_token_matrix(grad, cfg, s, skip)
            assert_array_equal(out, expected, err_msg=f"case {case}: {cfg}, s={s}, skip={skip}")
            # elimination can only remove energy from the scaled gradient
            bound = s * s * np.sum(grad * grad)
            energy = np.sum(out * out)
            assert energy <= bound * (1 + 1e-12)
            if s > 0 and np.any((out == 0) & (grad != 0)):
                assert energy < bound * (1 - 1e-12)


class TestTgrHook:

    def test_disabled_component_passes_through(self):
        cfg = TgrConfig(enabled_components=frozenset({ComponentKind.MLP}))
        grad = make_rng(0).normal(size=(5, 4))
        mg = ModuleGradient(ComponentKind.QKV, 0, grad, token_offset=1)
        assert tgr_hook(cfg)(mg) is grad

    def test_scales_per_component(self):
        cfg = TgrConfig(k=0)
        hook = tgr_hook(cfg)
        grad = make_rng(1).normal(size=(5, 4))
        assert_array_equal(hook(ModuleGradient(ComponentKind.QKV, 0, grad)), grad * 0.75)
        assert_array_equal(hook(ModuleGradient(ComponentKind.MLP, 0, grad)), grad * 0.25)
        attn = make_rng(2).normal(size=(2, 5, 5))
        assert_array_equal(hook(ModuleGradient(ComponentKind.ATTENTION, 0, attn)), attn * 0.25)

    def test_class_token_excluded(self):
        cfg = TgrConfig(k=1, s_mlp=1.0, include_class_token=False)
        grad = np.array([[50.0], [1.0], [2.0], [3.0], [-50.0]])
        out = tgr_hook(cfg)(ModuleGradient(ComponentKind.MLP, 0, grad, token_offset=1))
        assert out[0, 0] == 50.0
        assert out[4, 0] == 0.0


class TestMimStep:

    def test_l1_normalised(self):
        grad = np.array([1.0, -3.0, 0.0, 4.0])
        assert_array_equal(mim_step(np.zeros(4), grad, 1.0), grad / 8.0)

    def test_decay(self):
        m = np.array([1.0, 1.0])
        assert_array_equal(mim_step(m, np.array([0.0, 2.0]), 0.5), [0.5, 1.5])

    def test_zero_gradient(self):
        assert_array_equal(mim_step(np.ones(3), np.zeros(3), 0.5), np.full(3, 0.5))


class TestPatchOut:

    def test_indices_distinct(self):
        idx = sample_patch_indices(16, 11, make_rng(0))
        assert len(set(idx.tolist())) == 11
        assert idx.min() >= 0 and idx.max() < 16

    def test_bad_count(self):
        with pytest.raises(ConfigError):
            sample_patch_indices(4, 5, make_rng(0))

    def test_mask_covers_chosen_patches(self):
        mask = patchout_mask(4, 3, make_rng(1), patch_size=4, channels=3)
        assert mask.shape == (3, 8, 8)
        assert set(np.unique(mask).tolist()) == {0.0, 1.0}
        assert mask.sum() == 3 * 4 * 4 * 3

    def test_default_patch_count(self):
        assert PatchOutConfig().resolve(TINY) == 3  # ceil(0.66 * 4)


class TestClipProject:

    def test_box(self):
        x = np.array([0.0, 0.5, 1.0])
        out = clip_project(np.array([-0.5, 0.9, 0.95]), x, 0.1)
        assert_array_equal(out, [0.0, 0.6, 0.95])


class TestAttack:

    def _setup(self, config=TINY, seed=0):
        model = random_model(config, seed=seed)
        image = random_image(config, seed=seed + 100)
        label = int(np.argmax(forward(model, image)[0]))
        return model, image, label

    @pytest.mark.parametrize("cfg", [
        AttackConfig(steps=5),
        AttackConfig(steps=5, tgr=TgrConfig()),
        AttackConfig(steps=5, patchout=PatchOutConfig()),
        AttackConfig(steps=5, epsilon=4, tgr=TgrConfig(k=2), patchout=PatchOutConfig(num_patches=2)),
        AttackConfig(steps=3, alpha=40.0, tgr=TgrConfig(elimination_mode=EliminationMode.GLOBAL_TOKEN_ROW)),
    ])
    def test_linf_box(self, cfg):
        model, image, label = self._setup()
        result = attack(model, image, label, cfg)
        assert np.max(np.abs(result.x_adv - image)) <= cfg.epsilon_unit + 1e-12
        assert result.x_adv.min() >= 0.0 and result.x_adv.max() <= 1.0
        assert len(result.per_step_loss) == cfg.steps

    def test_zero_steps_returns_clean_image(self):
        model, image, label = self._setup()
        result = attack(model, image, label, AttackConfig(steps=0, tgr=TgrConfig()))
        assert_array_equal(result.x_adv, image)
        assert result.success_on_source is False

    def test_single_step_closed_form(self):
        model, image, label = self._setup(seed=3)
        cfg = AttackConfig(steps=1, epsilon=8)
        logits, cache = forward(model, image)
        grad, _ = backward(model, cache, cross_entropy(logits, label)[1])
        expected = clip_project(image + cfg.alpha_unit * np.sign(grad), image, cfg.epsilon_unit)
        assert_array_equal(attack(model, image, label, cfg).x_adv, expected)

    @pytest.mark.parametrize("patchout", [None, PatchOutConfig()])
    def test_degenerate_tgr_is_mim(self, patchout):
        model, image, label = self._setup(seed=5)
        mim = AttackConfig(steps=6, patchout=patchout)
        tgr = mim.with_tgr(k=0, s_attention=1.0, s_qkv=1.0, s_mlp=1.0)
        a = attack(model, image, label, mim, sample_index=4)
        b = attack(model, image, label, tgr, sample_index=4)
        assert_array_equal(a.x_adv, b.x_adv)
        assert a.per_step_loss == b.per_step_loss

    @pytest.mark.parametrize("patchout", [None, PatchOutConfig()])
    def test_degenerate_tgr_is_mim_over_fifty_samples(self, patchout):
        model = random_model(TINY, seed=9)
        images = np.stack([random_image(TINY, seed=200 + n) for n in range(50)])
        labels = [int(np.argmax(forward(model, x)[0])) for x in images]
        mim = AttackConfig(patchout=patchout)
        tgr = mim.with_tgr(k=0, s_attention=1.0, s_qkv=1.0, s_mlp=1.0)
        for a, b in zip(run_attacks(model, images, labels, mim), run_attacks(model, images, labels, tgr)):
            assert_array_equal(a.x_adv, b.x_adv)

    def test_empty_component_set_is_mim(self):
        model, image, label = self._setup(seed=6)
        mim = AttackConfig(steps=4)
        tgr = mim.with_tgr(enabled_components=frozenset())
        assert_array_equal(attack(model, image, label, mim).x_adv, attack(model, image, label, tgr).x_adv)

    def test_tgr_changes_the_trajectory(self):
        model, image, label = self._setup(seed=7)
        mim = attack(model, image, label, AttackConfig(steps=4))
        tgr = attack(model, image, label, AttackConfig(steps=4, tgr=TgrConfig()))
        assert not np.array_equal(mim.x_adv, tgr.x_adv)

    def test_loss_rises_on_the_source(self):
        model, image, label = self._setup(seed=8)
        result = attack(model, image, label, AttackConfig(steps=10))
        assert result.per_step_loss[-1] > result.per_step_loss[0]

    def test_patchout_depends_on_sample_index(self):
        model, image, label = self._setup(seed=9)
        cfg = AttackConfig(steps=6, patchout=PatchOutConfig(num_patches=1))
        a = attack(model, image, label, cfg, sample_index=0)
        b = attack(model, image, label, cfg, sample_index=0)
        c = attack(model, image, label, cfg, sample_index=1)
        assert_array_equal(a.x_adv, b.x_adv)
        assert not np.array_equal(a.x_adv, c.x_adv)

    def test_records_final_module_gradients(self):
        model, image, label = self._setup()
        result = attack(model, image, label, AttackConfig(steps=2, tgr=TgrConfig()), record_module_grads=True)
        assert len(result.final_module_grads) == 3 * TINY.depth

    def test_rejects_out_of_range_pixels(self):
        model, image, label = self._setup()
        with pytest.raises(DomainError):
            attack(model, image + 1.0, label, AttackConfig(steps=1))

    def test_rejects_k_too_large(self):
        model, image, label = self._setup(config=TINY_GAP)
        with pytest.raises(ConfigError) as err:
            attack(model, image, label, AttackConfig(steps=1, tgr=TgrConfig(k=2)))
        assert err.value.key == "tgr.k"

    def test_thread_count_does_not_change_results(self):
        model = random_model(TINY, seed=10)
        images = np.stack([random_image(TINY, s) for s in range(5)])
        labels = np.array([0, 1, 2, 0, 1])
        cfg = AttackConfig(steps=3, tgr=TgrConfig(), patchout=PatchOutConfig())
        serial = run_attacks(model, images, labels, cfg, indices=range(10, 15), threads=1)
        parallel = run_attacks(model, images, labels, cfg, indices=range(10, 15), threads=4)
        for a, b in zip(serial, parallel):
            assert a.sample_index == b.sample_index
            assert_array_equal(a.x_adv, b.x_adv)
