import unittest

import numpy as np

from neureg.config import EncoderConfig, LossConfig, TrainConfig
from neureg.encoder import *
from neureg.errors import InvalidInputError, ShapeMismatchError
from neureg.tensorautodiff import Tensor, cyclic_shift, grad_check
from neureg.training import PreparedSample, pair_loss


def tiny_config(**overrides):
    settings = dict(
        embed_dim=4, depths=[2, 1, 1, 1], heads=[2, 2, 2, 2], window=(2, 2, 2), mlp_ratio=1.0
    )
    settings.update(overrides)
    return EncoderConfig(**settings)


def reference_attention(x, params, prefix, heads, window):
    """Plain full self-attention over a flattened window."""
    n, c = x.shape
    d = c // heads
    qkv = (x @ params[prefix + "qkv.weight"].data + params[prefix + "qkv.bias"].data).reshape(n, 3, heads, d)
    index = relative_position_index(window, window)
    table = params[prefix + "rel_bias"].data
    out = np.zeros((n, c))
    for h in range(heads):
        q, k, v = qkv[:, 0, h], qkv[:, 1, h], qkv[:, 2, h]
        logits = q @ k.T / np.sqrt(d) + table[index, h]
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, h * d : (h + 1) * d] = weights @ v
    return out @ params[prefix + "proj.weight"].data + params[prefix + "proj.bias"].data


class TestParams(unittest.TestCase):
    def test_bias_table_size(self):
        self.assertEqual(bias_table_size((2, 3, 4)), 3 * 5 * 7)
        params = init_params(EncoderConfig(), seed=0)
        self.assertEqual(params["stage2.block1.attn.rel_bias"].shape, (105, 4))

    def test_seed_determinism(self):
        a, b = init_params(tiny_config(), 3), init_params(tiny_config(), 3)
        for x, y in zip(a, b):
            self.assertTrue(np.array_equal(x.data, y.data))

    def test_from_arrays_round_trip(self):
        params = init_params(tiny_config(), 1)
        rebuilt = ModelParams.from_arrays(tiny_config(), params.to_arrays())
        self.assertEqual(rebuilt.names, params.names)
        self.assertTrue(np.array_equal(rebuilt["head.weight"].data, params["head.weight"].data))

    def test_from_arrays_rejects_bad_shape(self):
        arrays = init_params(tiny_config(), 1).to_arrays()
        arrays["head.bias"] = np.zeros(4)
        with self.assertRaises(ShapeMismatchError):
            ModelParams.from_arrays(tiny_config(), arrays)

    def test_from_arrays_rejects_missing_name(self):
        arrays = init_params(tiny_config(), 1).to_arrays()
        del arrays["head.bias"]
        with self.assertRaises(ShapeMismatchError):
            ModelParams.from_arrays(tiny_config(), arrays)

    def test_copy_is_independent(self):
        params = init_params(tiny_config(), 1)
        clone = params.copy()
        clone["head.bias"].data += 1.0
        self.assertTrue(np.all(params["head.bias"].data == 0.0))


class TestPatchEmbedding(unittest.TestCase):
    def setUp(self):
        self.config = tiny_config()
        self.params = init_params(self.config, 0)

    def test_token_grid_shape(self):
        tokens = patch_embed(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)), self.params, self.config)
        self.assertEqual(tokens.shape, (4, 4, 4, 4))

    def test_odd_extents_are_padded(self):
        tokens = patch_embed(np.ones((7, 8, 5)), np.ones((7, 8, 5)), self.params, self.config)
        self.assertEqual(tokens.shape, (4, 4, 3, 4))

    def test_zero_input_gives_bias(self):
        self.params["patch_embed.bias"].data[:] = [0.1, -0.2, 0.3, 0.4]
        tokens = patch_embed(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)), self.params, self.config)
        self.assertTrue(np.allclose(tokens.data, [0.1, -0.2, 0.3, 0.4]))

    def test_swapping_inputs_changes_tokens(self):
        rng = np.random.default_rng(0)
        a, b = rng.uniform(size=(4, 4, 4)), rng.uniform(size=(4, 4, 4))
        ab = patch_embed(a, b, self.params, self.config).data
        ba = patch_embed(b, a, self.params, self.config).data
        self.assertGreater(np.abs(ab - ba).max(), 0.0)

    def test_dims_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            patch_embed(np.zeros((4, 4, 4)), np.zeros((4, 4, 2)), self.params, self.config)


class TestPatchMerging(unittest.TestCase):
    def setUp(self):
        self.config = tiny_config()
        self.params = init_params(self.config, 0)

    def test_shape(self):
        tokens = Tensor(np.random.default_rng(0).normal(size=(4, 4, 4, 4)))
        self.assertEqual(patch_merging(tokens, self.params, 0).shape, (2, 2, 2, 8))

    def test_odd_and_unit_extents(self):
        tokens = Tensor(np.random.default_rng(0).normal(size=(3, 1, 2, 4)))
        self.assertEqual(patch_merging(tokens, self.params, 0).shape, (2, 1, 1, 8))

    def test_constant_field_stays_constant(self):
        tokens = Tensor(np.tile(np.array([0.5, -1.0, 2.0, 0.0]), (4, 4, 4, 1)))
        merged = patch_merging(tokens, self.params, 0).data
        self.assertTrue(np.allclose(merged, merged[0, 0, 0]))

    def test_token_bookkeeping(self):
        self.assertEqual(token_grid_dims((9, 8, 7), self.config, 0), (5, 4, 4))
        self.assertEqual(token_grid_dims((9, 8, 7), self.config, 1), (3, 2, 2))
        self.assertEqual(token_grid_dims((9, 8, 7), self.config, 3), (1, 1, 1))


class TestWindowAttention(unittest.TestCase):
    def setUp(self):
        self.config = tiny_config()
        self.params = init_params(self.config, 5)
        rng = np.random.default_rng(2)
        for t in self.params:
            if "attn" in t.name:
                t.data[...] = rng.normal(scale=0.5, size=t.shape)
        self.prefix = "stage0.block0.attn."
        self.rng = rng

    def test_single_window_equals_full_attention(self):
        x = self.rng.normal(size=(2, 2, 2, 4))
        out = window_attention(Tensor(x), (2, 2, 2), (0, 0, 0), self.params, self.prefix, 2)
        expected = reference_attention(x.reshape(8, 4), self.params, self.prefix, 2, (2, 2, 2))
        self.assertTrue(np.allclose(out.data.reshape(8, 4), expected, atol=1e-12))

    def test_attention_rows_sum_to_one(self):
        captured = []
        x = Tensor(self.rng.normal(size=(4, 4, 4, 4)))
        window_attention(x, (2, 2, 2), (1, 1, 1), self.params, self.prefix, 2, attention_out=captured)
        self.assertEqual(captured[0].shape, (8, 2, 8, 8))
        self.assertTrue(np.allclose(captured[0].sum(axis=-1), 1.0, atol=1e-12))

    def test_mask_matches_brute_force(self):
        grid, window, shift = (4, 4, 4), (2, 2, 2), (1, 1, 1)
        mask = shifted_window_mask(grid, window, shift)
        positions = np.stack(np.indices(grid), axis=-1)
        windows = positions.reshape(2, 2, 2, 2, 2, 2, 3).transpose(0, 2, 4, 1, 3, 5, 6).reshape(8, 8, 3)
        for w in range(8):
            for i in range(8):
                for j in range(8):
                    wrapped_i = windows[w, i] + np.array(shift) >= np.array(grid)
                    wrapped_j = windows[w, j] + np.array(shift) >= np.array(grid)
                    allowed = bool(np.all(wrapped_i == wrapped_j))
                    self.assertEqual(mask[w, i, j] == 0.0, allowed)
                    if not allowed:
                        self.assertEqual(mask[w, i, j], -np.inf)

    def test_masked_pairs_get_zero_weight(self):
        captured = []
        x = Tensor(self.rng.normal(size=(4, 4, 4, 4)))
        window_attention(x, (2, 2, 2), (1, 1, 1), self.params, self.prefix, 2, attention_out=captured)
        mask = shifted_window_mask((4, 4, 4), (2, 2, 2), (1, 1, 1))
        blocked = np.broadcast_to(np.isinf(mask)[:, None], captured[0].shape)
        self.assertTrue(np.all(captured[0][blocked] == 0.0))

    def test_no_shift_has_no_mask(self):
        self.assertIsNone(shifted_window_mask((4, 4, 4), (2, 2, 2), (0, 0, 0)))

    def test_rectangular_window_with_padding(self):
        x = Tensor(self.rng.normal(size=(3, 4, 5, 4)))
        config = tiny_config(window=(2, 3, 4))
        params = init_params(config, 0)
        out = window_attention(
            x, (2, 3, 4), (1, 1, 2), params, self.prefix, 2, table_window=(2, 3, 4)
        )
        self.assertEqual(out.shape, (3, 4, 5, 4))

    def test_window_larger_than_grid(self):
        with self.assertRaises(InvalidInputError):
            window_attention(Tensor(np.zeros((2, 2, 2, 4))), (3, 2, 2), (0, 0, 0), self.params, self.prefix, 2)

    def test_effective_window_and_shift(self):
        self.assertEqual(effective_window((1, 4, 8), (2, 3, 4)), (1, 3, 4))
        self.assertEqual(shift_for((1, 4, 8), (2, 3, 4), shifted=True), (0, 1, 2))
        self.assertEqual(shift_for((2, 3, 4), (2, 3, 4), shifted=True), (0, 0, 0))
        self.assertEqual(shift_for((8, 8, 8), (2, 3, 4), shifted=False), (0, 0, 0))

    def test_shift_round_trip(self):
        x = self.rng.normal(size=(4, 4, 4, 3))
        back = cyclic_shift(cyclic_shift(x, (-1, -1, -2), (0, 1, 2)), (1, 1, 2), (0, 1, 2))
        self.assertTrue(np.array_equal(back.data, x))


class TestStages(unittest.TestCase):
    def setUp(self):
        self.config = tiny_config()
        self.params = init_params(self.config, 0)

    def test_zeroed_branches_give_identity(self):
        for t in self.params:
            if t.name.endswith("attn.proj.weight") or t.name.endswith("mlp.fc2.weight"):
                t.data[...] = 0.0
        tokens = Tensor(np.random.default_rng(1).normal(size=(4, 4, 4, 4)))
        out = swin_stage(tokens, 0, self.params, self.config)
        self.assertTrue(np.array_equal(out.data, tokens.data))

    def test_depth_two_alternates_shift(self):
        grid = (4, 4, 4)
        shifts = [shift_for(grid, self.config.window, shifted=b % 2 == 1) for b in range(2)]
        self.assertEqual(shifts, [(0, 0, 0), (1, 1, 1)])


class TestForward(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(9)
        self.fixed = rng.uniform(size=(8, 8, 8))
        self.moving = rng.uniform(size=(8, 8, 8))

    def test_output_shape(self):
        config = tiny_config()
        out = forward(self.fixed, self.moving, init_params(config, 0), config)
        self.assertEqual(out.shape, (3, 2, 2, 2))
        config = tiny_config(band_dims=(3, 2, 1))
        out = forward(self.fixed[:, :7, :6], self.moving[:, :7, :6], init_params(config, 0), config)
        self.assertEqual(out.shape, (3, 3, 2, 1))

    def test_zero_head_gives_zero_field(self):
        config = tiny_config()
        params = init_params(config, 0)
        params["head.weight"].data[...] = 0.0
        self.assertTrue(np.all(forward(self.fixed, self.moving, params, config).data == 0.0))

    def test_seeds_differ(self):
        config = tiny_config()
        a = forward(self.fixed, self.moving, init_params(config, 0), config).data
        b = forward(self.fixed, self.moving, init_params(config, 1), config).data
        self.assertGreater(np.abs(a - b).max(), 0.0)

    def test_encoder_gradient(self):
        config = tiny_config(init_std=0.3, head_init_std=0.3)
        params = init_params(config, 2)
        weights = np.random.default_rng(3).normal(size=(3, 2, 2, 2))
        report = grad_check(
            lambda: (forward(self.fixed, self.moving, params, config) * weights).sum(),
            list(params),
            n_samples=80,
        )
        self.assertTrue(report.passed, msg=str(report.failures[:3]))

    def test_end_to_end_gradient(self):
        encoder = tiny_config(init_std=0.3, head_init_std=0.3, band_dims=(2, 2, 2))
        config = TrainConfig(encoder=encoder, loss=LossConfig(similarity="MSE"), epochs=2, patience=1)
        params = init_params(encoder, 4)
        fixed = PreparedSample(0, self.fixed, self.fixed)
        moving = PreparedSample(1, self.moving, self.moving)
        report = grad_check(lambda: pair_loss(params, fixed, moving, config)[0], list(params), n_samples=250)
        self.assertTrue(report.passed, msg=str(report.failures[:3]))
        self.assertGreaterEqual(report.n_checked, 200)
        self.assertGreater(np.abs(params["stage0.block0.attn.qkv.weight"].grad).max(), 0.0)

    def test_end_to_end_gradient_ncc(self):
        encoder = tiny_config(init_std=0.3, head_init_std=0.3, band_dims=(2, 2, 2))
        loss = LossConfig(similarity="NCC", ncc_window=9)
        config = TrainConfig(encoder=encoder, loss=loss, epochs=2, patience=1)
        params = init_params(encoder, 5)
        fixed = PreparedSample(0, self.fixed, self.fixed)
        moving = PreparedSample(1, self.moving, self.moving)
        report = grad_check(lambda: pair_loss(params, fixed, moving, config)[0], list(params), n_samples=250)
        self.assertTrue(report.passed, msg=str(report.failures[:3]))
        self.assertGreaterEqual(report.n_checked, 200)
        self.assertGreater(np.abs(params["head.weight"].grad).max(), 0.0)


if __name__ == "__main__":
    unittest.main()
