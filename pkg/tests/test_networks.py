import numpy as np
import pytest

from core.config import ArchConfig
from core.engine import Tape, Tensor, backward, softmax_channels
from core.exceptions import InferenceError, ShapeError, TransferError
from core.models import Head
from core.networks import (
    MONET, PARAM_NAME, UNET, ModelParams, build_monet, build_unet, expected_shapes, forward,
    parameter_count, transfer_params,
)
from core.training import loss_full, loss_joint, loss_partial


def _closed_form_count(arch: ArchConfig, num_classes_list):
    """Hand-derived parameter count: encoder + bottleneck + one decoder per class count."""
    k3 = arch.kernel_size ** 3
    conv = lambda c_in, c_out: c_out * c_in * k3 + c_out  # noqa: E731
    total = 0
    c_prev = 1
    for level in range(arch.depth):
        c = arch.channels(level)
        total += conv(c_prev, c) + conv(c, c)
        c_prev = c
    cb = arch.channels(arch.depth)
    total += conv(c_prev, cb) + conv(cb, cb)
    for num_classes in num_classes_list:
        for level in range(arch.depth):
            c = arch.channels(level)
            total += conv(arch.channels(level + 1), c) + conv(2 * c, c) + conv(c, c)
        total += arch.channels(0) * num_classes + num_classes
    return total


class TestParameterCount:
    def test_smallest_unet_by_hand(self, tiny_arch):
        assert parameter_count(tiny_arch, UNET) == 1374
        assert build_unet(tiny_arch, seed=0).parameter_count() == 1374

    def test_smallest_monet_by_hand(self, tiny_arch):
        assert parameter_count(tiny_arch, MONET) == 1374 + 555

    @pytest.mark.parametrize("depth,base", [(1, 2), (2, 2), (3, 4)])
    def test_closed_form(self, depth, base):
        arch = ArchConfig(base_channels=base, depth=depth, num_partial_classes=5, num_full_classes=9)
        assert parameter_count(arch, UNET) == _closed_form_count(arch, [5])
        assert parameter_count(arch, MONET) == _closed_form_count(arch, [5, 9])

    def test_whole_brain_preset(self):
        arch = ArchConfig.whole_brain()
        assert parameter_count(arch, MONET) == _closed_form_count(arch, [16, 139])


class TestBuild:
    def test_same_seed_is_bit_identical(self, small_arch):
        assert build_unet(small_arch, seed=5).equals(build_unet(small_arch, seed=5))
        assert build_monet(small_arch, seed=5).equals(build_monet(small_arch, seed=5))

    def test_different_seeds_differ(self, small_arch):
        assert not build_unet(small_arch, seed=5).equals(build_unet(small_arch, seed=6))

    def test_names_follow_grammar(self, small_arch):
        for params in (build_unet(small_arch, 0), build_monet(small_arch, 0)):
            assert all(PARAM_NAME.match(name) for name in params)
            assert list(params) == list(expected_shapes(small_arch, params.kind))

    def test_monet_names_mirror_unet_decoder(self, small_arch):
        unet = build_unet(small_arch, 0)
        monet = build_monet(small_arch, 0)
        decoder = [n[len("decoder."):] for n in unet if n.startswith("decoder.")]
        assert [n[len("decoder_w."):] for n in monet if n.startswith("decoder_w.")] == decoder
        assert [n[len("decoder_s."):] for n in monet if n.startswith("decoder_s.")] == decoder
        assert [n for n in unet if n.startswith("encoder.")] == [n for n in monet if n.startswith("encoder.")]

    def test_biases_start_at_zero(self, small_arch):
        params = build_monet(small_arch, 1)
        assert all(np.all(params[n].data == 0) for n in params if n.endswith(".bias"))

    def test_validate_names_offending_tensor(self, small_arch):
        tensors = dict(build_unet(small_arch, 0).items())
        tensors["encoder.level0.conv1.weight"] = Tensor(np.zeros((1, 1, 3, 3, 3)))
        with pytest.raises(ShapeError, match="encoder.level0.conv1.weight"):
            ModelParams(small_arch, tensors, UNET)


class TestForward:
    def test_output_shapes(self):
        arch = ArchConfig(base_channels=2, depth=3, num_partial_classes=16, num_full_classes=5)
        out = forward(build_monet(arch, 0), np.zeros((1, 16, 16, 16), dtype=np.float32))
        assert out.logits_w.shape == (16, 16, 16, 16)
        assert out.logits_s.shape == (5, 16, 16, 16)

    def test_unet_has_only_partial_head(self, small_arch):
        out = forward(build_unet(small_arch, 0), np.zeros((1, 8, 8, 8)))
        assert out.logits_w.shape == (3, 8, 8, 8)
        assert out.logits_s is None
        with pytest.raises(InferenceError):
            out.for_head(Head.FULL)

    def test_zeroed_classifier_gives_uniform_softmax(self, small_arch, rng):
        params = build_unet(small_arch, 0)
        params["decoder.classifier.weight"].data[...] = 0
        params["decoder.classifier.bias"].data[...] = 0
        out = forward(params, rng.standard_normal((1, 8, 8, 8)))
        np.testing.assert_allclose(softmax_channels(out.logits_w).data, 1.0 / 3.0, rtol=1e-6)

    def test_indivisible_patch_rejected(self, small_arch):
        with pytest.raises(ShapeError):
            forward(build_unet(small_arch, 0), np.zeros((1, 6, 8, 8)))

    def test_missing_head_rejected(self, small_arch):
        with pytest.raises(InferenceError):
            forward(build_unet(small_arch, 0), np.zeros((1, 8, 8, 8)), heads=[Head.FULL])

    def test_decoder_s_perturbation_leaves_partial_logits(self, small_arch, rng):
        params = build_monet(small_arch, 2)
        patch = rng.standard_normal((1, 8, 8, 8))
        before = forward(params, patch)
        for name in params.subset("decoder_s."):
            params[name].data += 0.5
        after = forward(params, patch)
        np.testing.assert_array_equal(before.logits_w.data, after.logits_w.data)
        assert not np.array_equal(before.logits_s.data, after.logits_s.data)

    def test_inference_does_not_touch_gradients(self, small_arch):
        params = build_monet(small_arch, 0)
        forward(params, np.ones((1, 8, 8, 8)))
        assert all(params[n].grad is None for n in params)


class TestSharedEncoderGradient:
    def test_joint_gradient_is_weighted_sum_of_task_gradients(self, small_arch, rng):
        params = build_monet(small_arch, 3, dtype=np.float64)
        patch = rng.standard_normal((1, 8, 8, 8))
        target_w = rng.integers(0, small_arch.num_partial_classes, (8, 8, 8))
        target_s = rng.integers(0, small_arch.num_full_classes, (8, 8, 8))
        encoder = [n for n in params if n.startswith("encoder.")]

        def grads(loss_fn):
            params.zero_grad()
            tape = Tape()
            backward(loss_fn(forward(params, patch, tape=tape), tape), tape)
            return {n: params[n].grad.copy() for n in encoder}

        g_s = grads(lambda out, tape: loss_full(out.logits_s, target_s, tape))
        g_w = grads(lambda out, tape: loss_partial(out.logits_w, target_w, tape))
        g_joint = grads(lambda out, tape: loss_joint(out, target_s, target_w, 0.7, 0.3, tape))
        for name in encoder:
            np.testing.assert_allclose(g_joint[name], 0.7 * g_s[name] + 0.3 * g_w[name],
                                       rtol=1e-6, atol=1e-10)


class TestTransfer:
    def test_encoder_copied_bit_exact(self, small_arch):
        unet = build_unet(small_arch, 1)
        monet, _ = transfer_params(unet, build_monet(small_arch, 2))
        for name in unet.subset("encoder."):
            np.testing.assert_array_equal(monet[name].data, unet[name].data)

    def test_partial_logits_match_stage1(self, small_arch, rng):
        unet = build_unet(small_arch, 1)
        monet, _ = transfer_params(unet, build_monet(small_arch, 2))
        for _ in range(5):
            patch = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
            np.testing.assert_array_equal(forward(monet, patch).logits_w.data,
                                          forward(unet, patch).logits_w.data)

    def test_manifest_lists_fresh_classifier(self, small_arch):
        unet = build_unet(small_arch, 1)
        fresh = build_monet(small_arch, 2)
        classifier = fresh["decoder_s.classifier.weight"].data.copy()
        monet, manifest = transfer_params(unet, fresh)
        assert manifest.skipped == ["decoder_s.classifier.weight", "decoder_s.classifier.bias"]
        np.testing.assert_array_equal(monet["decoder_s.classifier.weight"].data, classifier)
        assert len(manifest.copied) == 2 * len(unet) - len(unet.subset("encoder.")) - 2

    def test_decoder_s_trunk_copied(self, small_arch):
        unet = build_unet(small_arch, 1)
        monet, _ = transfer_params(unet, build_monet(small_arch, 2))
        np.testing.assert_array_equal(monet["decoder_s.level0.conv2.weight"].data,
                                      unet["decoder.level0.conv2.weight"].data)

    def test_equal_class_counts_skip_nothing(self):
        arch = ArchConfig(base_channels=2, depth=1, num_partial_classes=3, num_full_classes=3)
        _, manifest = transfer_params(build_unet(arch, 0), build_monet(arch, 1))
        assert manifest.skipped == []

    def test_trunk_mismatch_rejected(self, small_arch):
        other = ArchConfig(base_channels=4, depth=2, num_partial_classes=3, num_full_classes=4)
        with pytest.raises(TransferError):
            transfer_params(build_unet(other, 0), build_monet(small_arch, 0))

    def test_target_must_be_dual_decoder(self, small_arch):
        with pytest.raises(TransferError):
            transfer_params(build_unet(small_arch, 0), build_unet(small_arch, 1))
