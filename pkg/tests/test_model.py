import numpy as np
import pytest
import torch

from ssda.data import ConfigurationError
from ssda.losses import classification_loss, pretext_loss
from ssda.model import (ArchitectureSpec, build_networks,
                        forward_discriminator, forward_main,
                        forward_pretext, gradient_check, load_checkpoint,
                        main_probability_map, parameter_hash,
                        save_checkpoint, to_tensor_batch)


def _nets(task="classification", tap="middle", K=4, C=4, seed=0):
    arch = ArchitectureSpec(feature_tap=tap)
    return build_networks(arch, task, K, C, seed), arch


class TestBuildNetworks:
    def test_seed_determinism(self):
        (a, *_), _ = _nets(seed=3)
        (b, *_), _ = _nets(seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seeds_differ(self):
        (a, *_), _ = _nets(seed=1)
        (b, *_), _ = _nets(seed=2)
        assert any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.parameters(), b.parameters()))

    def test_classification_shapes(self):
        (E, S, P, D), _ = _nets()
        x = torch.rand(8, 3, 32, 32)
        assert forward_main(E, S, x, "eval").shape == (8, 4)

    def test_segmentation_shapes(self):
        (E, S, P, D), _ = _nets(task="segmentation")
        x = torch.rand(2, 3, 48, 48)
        assert forward_main(E, S, x, "eval").shape == (2, 4, 48, 48)

    def test_invalid_k(self):
        with pytest.raises(ConfigurationError):
            build_networks(ArchitectureSpec(), "classification", 5, 4, 0)

    def test_invalid_c(self):
        with pytest.raises(ConfigurationError):
            build_networks(ArchitectureSpec(), "classification", 4, 1, 0)


class TestForward:
    def test_eval_deterministic(self):
        (E, S, P, D), _ = _nets()
        x = torch.rand(4, 3, 32, 32)
        a = forward_main(E, S, x, "eval")
        b = forward_main(E, S, x, "eval")
        assert torch.equal(a, b)

    def test_bn_stats_mode_contract(self):
        (E, S, P, D), _ = _nets()
        bn = E.blocks[0][1]
        before = bn.running_mean.clone()
        x = torch.rand(4, 3, 32, 32)
        forward_main(E, S, x, "eval")
        assert torch.equal(bn.running_mean, before)
        forward_main(E, S, x, "train")
        assert not torch.equal(bn.running_mean, before)

    def test_zero_input_equal_logits(self):
        (E, S, P, D), _ = _nets()
        x = torch.zeros(2, 3, 32, 32)
        logits = forward_main(E, S, x, "eval")
        # BN at init has zero running mean / unit var and zero beta, so
        # features are zero and the logits reduce to the zero head bias
        assert torch.allclose(logits, torch.zeros_like(logits), atol=1e-6)

    def test_pretext_logits_shape(self):
        (E, S, P, D), _ = _nets()
        patches = torch.rand(4, 3, 16, 16)
        assert forward_pretext(E, P, patches, "eval").shape == (4, 4)

    def test_final_tap_segmentation_consumes_prediction_map(self):
        (E, S, P, D), _ = _nets(task="segmentation", tap="final")
        assert P.fc.in_features == 4  # C channels of the pre-upsample map
        patches = torch.rand(2, 3, 16, 16)
        assert forward_pretext(E, P, patches, "eval", S).shape == (2, 4)

    def test_tap_choice_changes_logits(self):
        patches = torch.rand(4, 3, 16, 16)
        outs = {}
        for tap in ("middle", "final"):
            (E, S, P, D), _ = _nets(tap=tap)
            opt = torch.optim.SGD(list(E.parameters())
                                  + list(P.parameters()), lr=0.1)
            logits = forward_pretext(E, P, patches, "train")
            pretext_loss(logits, torch.tensor([0, 1, 2, 3])).backward()
            opt.step()
            outs[tap] = forward_pretext(E, P, patches, "eval")
        assert not torch.allclose(outs["middle"], outs["final"])

    def test_discriminator_stride_arithmetic(self):
        (E, S, P, D), _ = _nets(task="segmentation")
        x = torch.rand(2, 3, 48, 48)
        probs = main_probability_map(E, S, x, "eval")
        Z = forward_discriminator(D, probs)
        assert Z.shape == (2, 2, 6, 6)

    def test_discriminator_classification_degenerate(self):
        (E, S, P, D), _ = _nets()
        x = torch.rand(2, 3, 32, 32)
        probs = main_probability_map(E, S, x, "eval")
        assert probs.shape == (2, 4, 1, 1)
        Z = forward_discriminator(D, probs)
        assert Z.shape == (2, 2, 1, 1)

    def test_discriminator_softmax_normalized(self):
        (E, S, P, D), _ = _nets(task="segmentation")
        x = torch.rand(1, 3, 48, 48)
        Z = forward_discriminator(D, main_probability_map(E, S, x, "eval"))
        probs = torch.softmax(Z, dim=1)
        assert torch.allclose(probs.sum(dim=1), torch.ones(1, 6, 6),
                              atol=1e-6)

    def test_discriminator_channel_mismatch(self):
        (E, S, P, D), _ = _nets()
        with pytest.raises(ConfigurationError):
            forward_discriminator(D, torch.rand(1, 7, 8, 8))

    def test_probability_map_normalized(self):
        (E, S, P, D), _ = _nets()
        probs = main_probability_map(E, S, torch.rand(3, 3, 32, 32), "eval")
        assert torch.allclose(probs.sum(dim=1),
                              torch.ones_like(probs[:, 0]), atol=1e-6)


class TestGradientAccumulation:
    def test_two_backwards_sum(self):
        (E, S, P, D), _ = _nets()
        x1 = torch.rand(4, 3, 32, 32)
        x2 = torch.rand(4, 3, 32, 32)
        y = torch.tensor([0, 1, 2, 3])

        def grads_of(x):
            E.zero_grad(set_to_none=True)
            S.zero_grad(set_to_none=True)
            classification_loss(forward_main(E, S, x, "eval"), y).backward()
            return {n: p.grad.clone() for n, p in E.named_parameters()}

        g1 = grads_of(x1)
        g2 = grads_of(x2)
        E.zero_grad(set_to_none=True)
        S.zero_grad(set_to_none=True)
        classification_loss(forward_main(E, S, x1, "eval"), y).backward()
        classification_loss(forward_main(E, S, x2, "eval"), y).backward()
        for n, p in E.named_parameters():
            expected = g1[n] + g2[n]
            denom = expected.abs().max().clamp(min=1e-12)
            assert float((p.grad - expected).abs().max() / denom) < 1e-5


class TestGradientCheck:
    def test_affine_ce_closed_form(self):
        # zero-weight affine head: bias gradient = softmax(0) - onehot
        head = torch.nn.Linear(8, 4).double()
        with torch.no_grad():
            head.weight.zero_()
            head.bias.zero_()
        head.name = "head"
        x = torch.rand(1, 8, dtype=torch.float64)
        y = torch.tensor([2])
        loss = classification_loss(head(x), y)
        loss.backward()
        expected = torch.full((4,), 0.25, dtype=torch.float64)
        expected[2] -= 1.0
        assert torch.allclose(head.bias.grad, expected, atol=1e-12)

    def test_independent_parameter_zero_gradient(self):
        (E, S, P, D), _ = _nets()
        patches = torch.rand(4, 3, 16, 16, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3])
        for m in (E, S, P):
            m.double().eval()
        loss = pretext_loss(forward_pretext(E, P, patches, "eval"), labels)
        loss.backward()
        for p in S.parameters():
            assert p.grad is None or torch.all(p.grad == 0)

    def test_encoder_pretext_composition(self):
        (E, S, P, D), _ = _nets()
        patches = torch.rand(4, 3, 16, 16, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3])

        def loss_fn():
            return pretext_loss(forward_pretext(E, P, patches, "eval"),
                                labels)

        report = gradient_check([E, P], loss_fn, coords_per_tensor=5)
        assert report.passed, report.worst[:3]

    def test_non_finite_loss_rejected(self):
        (E, S, P, D), _ = _nets()

        def loss_fn():
            return torch.tensor(float("nan"), dtype=torch.float64)

        with pytest.raises(ValueError):
            gradient_check([E], loss_fn)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        (E, S, P, D), arch = _nets()
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(path, {"encoder": E, "main_head": S,
                               "pretext_head": P, "discriminator": D},
                        arch, "classification", 4, 4, "h")
        nets, arch2, payload = load_checkpoint(path)
        assert payload["config_hash"] == "h"
        assert parameter_hash(nets) == parameter_hash((E, S, P, D))
        x = torch.rand(2, 3, 32, 32)
        assert torch.equal(forward_main(E, S, x, "eval"),
                           forward_main(nets[0], nets[1], x, "eval"))

    def test_shape_mismatch_fails_loudly(self, tmp_path):
        (E, S, P, D), arch = _nets(C=4)
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(path, {"encoder": E, "main_head": S,
                               "pretext_head": P, "discriminator": D},
                        arch, "classification", 4, 4, "h")
        payload = torch.load(path, weights_only=False)
        payload["num_classes"] = 7  # declared C no longer matches tensors
        torch.save(payload, path)
        with pytest.raises(RuntimeError):
            load_checkpoint(path)

    def test_to_tensor_batch_layout(self):
        imgs = [np.zeros((5, 6, 3)), np.ones((5, 6, 3))]
        batch = to_tensor_batch(imgs)
        assert batch.shape == (2, 3, 5, 6)
        assert float(batch[1].mean()) == 1.0
