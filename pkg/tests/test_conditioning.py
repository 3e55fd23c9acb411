import numpy as np
import pytest
import torch

from conditioning import (
    EMBED_DIM,
    IMAGE_HIDDEN_DIM,
    IMAGE_TOKENS,
    TEXT_TOKENS,
    AdapterUnavailable,
    ConditioningBundle,
    ConditioningEncoder,
    ModalityMismatch,
    ProjectionLayer,
    ToyImageEncoder,
    ToyTextEncoder,
    Variant,
    make_adapters,
)
from pose_geometry import FLAT_POSE_DIM, Keypoint, PoseSkeleton, flatten_pose, neutral_skeleton
from tools.make_synthetic_videos import figure_skeleton

EXPECTED_ROWS = {Variant.C1: 257, Variant.C2: 258, Variant.C3: 334, Variant.C4: 335}


def crop(value=90, size=16):
    image = np.full((size, size, 3), value, dtype=np.uint8)
    image[size // 2:, :, 0] = 200
    return image


def bundle(variant, encoder=None):
    encoder = encoder or ConditioningEncoder(variant)
    caption = "She raises the right arm above the head." if variant.uses_text else None
    pose = figure_skeleton(16.0) if variant.uses_pose else None
    return encoder.bundle_for(crop(), caption, pose)


class TestVariant:
    @pytest.mark.parametrize('text,variant', [
        ('c1', Variant.C1), ('C2', Variant.C2), ('img-text', Variant.C3), (' img-pose-text ', Variant.C4)])
    def test_parse(self, text, variant):
        assert Variant.parse(text) is variant

    def test_parse_rejects_unknown(self):
        with pytest.raises(ValueError):
            Variant.parse('c5')

    def test_rows(self):
        assert {v: v.rows for v in Variant} == EXPECTED_ROWS


class TestAdapters:
    def test_image_adapter_is_deterministic(self):
        encoder = ToyImageEncoder(resolution=16)
        a = encoder.hidden_state(crop())
        assert a.shape == (IMAGE_TOKENS, IMAGE_HIDDEN_DIM)
        assert np.array_equal(a, encoder.hidden_state(crop()))
        assert not np.array_equal(a, encoder.hidden_state(crop(value=91)))

    def test_zero_image_gives_zero_state(self):
        assert not ToyImageEncoder(16).hidden_state(np.zeros((16, 16, 3), dtype=np.uint8)).any()

    def test_text_adapter(self):
        encoder = ToyTextEncoder()
        blank = encoder.encode('')
        assert blank.shape == (TEXT_TOKENS, EMBED_DIM)
        assert np.array_equal(blank, encoder.encode(None))
        assert not np.array_equal(blank, encoder.encode("He sits down."))

    def test_text_truncated_to_token_budget(self):
        encoder = ToyTextEncoder()
        long_caption = ' '.join(f"word{i}" for i in range(200))
        assert len(encoder.tokens(long_caption)) == TEXT_TOKENS
        assert encoder.encode(long_caption).shape == (TEXT_TOKENS, EMBED_DIM)

    def test_unknown_adapter(self):
        with pytest.raises(AdapterUnavailable):
            make_adapters('clip-vit-large')

    def test_missing_adapter(self):
        encoder = ConditioningEncoder(Variant.C1)
        encoder.image_adapter = None
        with pytest.raises(AdapterUnavailable):
            encoder.encode_image(crop())


class TestProjection:
    def test_initialisation(self):
        layer = ProjectionLayer(IMAGE_HIDDEN_DIM, EMBED_DIM, seed=3)
        bound = 1.0 / np.sqrt(IMAGE_HIDDEN_DIM)
        assert layer.weight.shape == (EMBED_DIM, IMAGE_HIDDEN_DIM)
        assert float(layer.weight.abs().max()) <= bound
        assert not layer.bias.any()
        assert torch.equal(layer.weight, ProjectionLayer(IMAGE_HIDDEN_DIM, EMBED_DIM, seed=3).weight)

    def test_zero_projection_gives_zero_context(self):
        encoder = ConditioningEncoder(Variant.C2)
        with torch.no_grad():
            for layer in (encoder.image_projection, encoder.pose_projection):
                layer.weight.zero_()
                layer.bias.zero_()
        assert not bundle(Variant.C2, encoder).context.any()

    def test_pose_row_is_affine_in_coordinates(self):
        encoder = ConditioningEncoder(Variant.C2).double()
        a = figure_skeleton(16.0)
        keypoints = list(a.keypoints)
        keypoints[7] = Keypoint(keypoints[7].x + 2.5, keypoints[7].y, keypoints[7].confidence)
        b = PoseSkeleton(tuple(keypoints))
        with torch.no_grad():
            difference = encoder.embed_pose(b) - encoder.embed_pose(a)
            expected = 2.5 * encoder.pose_projection.weight[:, 7 * 3]
        assert difference.shape == (1, EMBED_DIM)
        assert torch.allclose(difference[0], expected, atol=1e-10)

    def test_weight_gradient_matches_finite_differences(self):
        layer = ProjectionLayer(FLAT_POSE_DIM, EMBED_DIM, seed=7).double()
        x = torch.as_tensor(flatten_pose(figure_skeleton(20.0)) / 32.0, dtype=torch.float64)
        target = torch.linspace(-1.0, 1.0, EMBED_DIM, dtype=torch.float64)

        def loss():
            return ((layer(x) - target) ** 2).mean()

        loss().backward()
        analytic = layer.weight.grad.clone()
        h = 1e-3
        rng = np.random.default_rng(0)
        with torch.no_grad():
            for _ in range(25):
                i, j = int(rng.integers(EMBED_DIM)), int(rng.integers(FLAT_POSE_DIM))
                original = layer.weight[i, j].item()
                layer.weight[i, j] = original + h
                up = loss().item()
                layer.weight[i, j] = original - h
                down = loss().item()
                layer.weight[i, j] = original
                numeric = (up - down) / (2 * h)
                assert numeric == pytest.approx(analytic[i, j].item(), rel=1e-4, abs=1e-12)


class TestBundles:
    @pytest.mark.parametrize('variant', list(Variant))
    def test_shape_law(self, variant):
        b = bundle(variant)
        assert b.context.shape == (EXPECTED_ROWS[variant], EMBED_DIM)
        assert b.uncond_context.shape == b.context.shape
        assert torch.isfinite(b.context).all()

    def test_row_order_is_image_text_pose(self):
        encoder = ConditioningEncoder(Variant.C4)
        caption = "He bends forward at the waist."
        pose = figure_skeleton(16.0)
        with torch.no_grad():
            b = encoder.bundle_for(crop(), caption, pose)
            assert torch.equal(b.context[:IMAGE_TOKENS], encoder.encode_image(crop()))
            assert torch.equal(b.context[IMAGE_TOKENS:IMAGE_TOKENS + TEXT_TOKENS], encoder.encode_text(caption))
            assert torch.equal(b.context[-1:], encoder.embed_pose(pose))

    def test_deterministic(self):
        with torch.no_grad():
            assert torch.equal(bundle(Variant.C4).context, bundle(Variant.C4).context)

    def test_unconditional_slots(self):
        encoder = ConditioningEncoder(Variant.C4)
        with torch.no_grad():
            uncond = encoder.unconditional_context()
            zero_image = encoder.encode_image(np.zeros((16, 16, 3), dtype=np.uint8))
            bias = encoder.image_projection.bias.expand(IMAGE_TOKENS, EMBED_DIM)
            neutral = encoder.embed_pose(neutral_skeleton(32, 32))
            assert torch.equal(uncond[:IMAGE_TOKENS], zero_image)
            assert torch.equal(uncond[:IMAGE_TOKENS], bias)
            assert torch.equal(uncond[IMAGE_TOKENS:-1], encoder.encode_text(''))
            assert torch.equal(uncond[-1:], neutral)
            assert torch.equal(uncond, encoder.unconditional_context())

    def test_combined_pose_uses_both_skeletons(self):
        encoder = ConditioningEncoder(Variant.C2, combine_reference_pose=True)
        assert encoder.pose_projection.in_dim == 2 * FLAT_POSE_DIM
        with pytest.raises(ModalityMismatch):
            encoder.embed_pose(figure_skeleton(16.0))
        with torch.no_grad():
            b = encoder.bundle_for(crop(), None, figure_skeleton(16.0), figure_skeleton(24.0))
            assert b.context.shape == (258, EMBED_DIM)
            assert b.uncond_context.shape == (258, EMBED_DIM)

    def test_batch_context_matches_single(self):
        encoder = ConditioningEncoder(Variant.C4)
        caption = "She lifts the left knee."
        pose = figure_skeleton(16.0)
        with torch.no_grad():
            single = encoder.bundle_for(crop(), caption, pose)
            batched = encoder.batch_context(encoder.image_hidden(crop()).unsqueeze(0),
                                            encoder.encode_text(caption).unsqueeze(0),
                                            encoder.pose_vector(pose).unsqueeze(0))
            assert torch.allclose(batched[0], single.context, atol=1e-6)
            assert encoder.batch_unconditional(3).shape == (3, 335, EMBED_DIM)


class TestModalityMismatch:
    def test_caption_on_image_only_variant(self):
        with pytest.raises(ModalityMismatch):
            ConditioningEncoder(Variant.C1).bundle_for(crop(), "He waves.")

    def test_pose_on_text_variant(self):
        with pytest.raises(ModalityMismatch):
            ConditioningEncoder(Variant.C3).bundle_for(crop(), "He waves.", figure_skeleton(16.0))

    def test_missing_pose(self):
        with pytest.raises(ModalityMismatch):
            ConditioningEncoder(Variant.C4).bundle_for(crop(), "He waves.")

    def test_assemble_requires_exact_modalities(self):
        encoder = ConditioningEncoder(Variant.C2)
        image = torch.zeros(IMAGE_TOKENS, EMBED_DIM)
        with pytest.raises(ModalityMismatch):
            encoder.assemble_bundle(image)
        with pytest.raises(ModalityMismatch):
            encoder.assemble_bundle(image, torch.zeros(TEXT_TOKENS, EMBED_DIM), torch.zeros(1, EMBED_DIM))
        with pytest.raises(ModalityMismatch):
            encoder.assemble_bundle(image, pose_emb=torch.zeros(2, EMBED_DIM))

    def test_bundle_rejects_shape_disagreement(self):
        with pytest.raises(ModalityMismatch):
            ConditioningBundle(Variant.C1, torch.zeros(257, EMBED_DIM), torch.zeros(258, EMBED_DIM))
        with pytest.raises(ModalityMismatch):
            ConditioningBundle(Variant.C1, torch.full((257, EMBED_DIM), float('nan')), torch.zeros(257, EMBED_DIM))
