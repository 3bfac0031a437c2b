import numpy as np
import pytest
import torch

from alden.backbone import VisionBackbone, get_backbone, parameter_checksum, token_coordinates
from alden.config import BackboneSpec
from alden.data import NormalizedImage
from alden.errors import BackboneLoadError
from alden.errors import ConfigError


def rand_img(seed, size=64):
    return torch.from_numpy(np.random.default_rng(seed).random((1, 1, size, size)).astype(np.float32))


class TestPrepareInput:
    def test_resize_to_input_size(self):
        spec = BackboneSpec(input_size=224)
        out = get_backbone(spec).prepare_input(NormalizedImage(np.random.rand(64, 64)))
        assert out.shape == (1, 3, 224, 224)

    def test_constant_image_channels_identical(self, tiny_backbone):
        raw = tiny_backbone.prepare_input(torch.full((1, 1, 64, 64), 0.5), standardize=False)
        assert torch.equal(raw[:, 0], raw[:, 1]) and torch.equal(raw[:, 1], raw[:, 2])

    def test_identity_resize(self, tiny_backbone):
        img = rand_img(1)
        raw = tiny_backbone.prepare_input(img, standardize=False)
        assert torch.equal(raw[:, 0:1], img)

    def test_standardization(self, tiny_backbone, tiny_spec):
        out = tiny_backbone.prepare_input(torch.full((1, 1, 64, 64), 0.5))
        for c in range(3):
            expected = (0.5 - tiny_spec.mean[c]) / tiny_spec.std[c]
            assert torch.allclose(out[0, c], torch.tensor(expected), atol=1e-6)


class TestExtraction:
    def test_pyramid_shapes(self, tiny_backbone):
        pyr = tiny_backbone.extract_hierarchy(rand_img(2))
        for level in pyr.levels():
            assert level.shape == (1, 32, 8, 8)
        assert (pyr.low.level_tag, pyr.mid.level_tag, pyr.high.level_tag) == ("low", "mid", "high")

    def test_grid_independent_of_slice_size(self, tiny_backbone):
        assert tiny_backbone.extract_dense(rand_img(3, size=48)).values.shape == (1, 32, 8, 8)

    def test_deterministic(self, tiny_backbone):
        a = tiny_backbone.extract_hierarchy(rand_img(4))
        b = tiny_backbone.extract_hierarchy(rand_img(4))
        for x, y in zip(a.levels(), b.levels()):
            assert torch.equal(x, y)

    def test_levels_differ(self, tiny_backbone):
        pyr = tiny_backbone.extract_hierarchy(rand_img(5))
        assert not torch.equal(pyr.low.values, pyr.high.values)

    def test_frozen_after_many_passes(self, tiny_backbone):
        before = tiny_backbone.checksum()
        img = rand_img(6).requires_grad_(True)
        for _ in range(100):
            tiny_backbone.extract_hierarchy(img)
        tiny_backbone.extract_dense(img).values.sum().backward()
        assert tiny_backbone.checksum() == before
        assert all(not p.requires_grad for p in tiny_backbone.model.parameters())
        assert all(p.grad is None for p in tiny_backbone.model.parameters())

    def test_dense_equals_high(self, tiny_backbone):
        img = rand_img(7)
        assert torch.equal(tiny_backbone.extract_dense(img).values, tiny_backbone.extract_hierarchy(img).high.values)

    def test_one_pixel_sensitivity(self, tiny_backbone):
        a = rand_img(8)
        b = a.clone()
        b[0, 0, 10, 20] += 0.1
        fa = tiny_backbone.extract_dense(a).values
        fb = tiny_backbone.extract_dense(b).values
        assert (fa - fb).abs().max() > 0

    def test_seeded_init_is_reproducible(self, tiny_spec):
        assert VisionBackbone(tiny_spec).checksum() == VisionBackbone(tiny_spec).checksum()
        other = VisionBackbone(BackboneSpec(init_seed=99))
        assert other.checksum() != VisionBackbone(tiny_spec).checksum()


def test_input_jacobian_matches_finite_differences(tiny_backbone):
    psi = tiny_backbone.to(torch.float64)
    x = torch.from_numpy(np.random.default_rng(9).random((1, 1, 64, 64)))
    direction = torch.from_numpy(np.random.default_rng(10).standard_normal((1, 1, 64, 64)))

    def f(inp):
        return psi.extract_dense(inp).values

    _, jvp = torch.autograd.functional.jvp(f, x, direction)
    h = 1e-5
    fd = (f(x + h * direction) - f(x - h * direction)) / (2 * h)
    rel = (jvp - fd).norm() / fd.norm()
    assert rel <= 1e-3


def test_token_coordinates():
    spec = BackboneSpec(patch_size=8, input_size=16, num_blocks=12)
    assert token_coordinates(spec) == [(0, 0), (1, 0), (0, 1), (1, 1)]
    coords = token_coordinates(BackboneSpec())
    assert len(coords) == 64 and len(set(coords)) == 64


class TestSpecValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(tap_blocks=(4, 4, 12)),
        dict(tap_blocks=(0, 8, 12)),
        dict(tap_blocks=(4, 8, 13)),
        dict(input_size=60),
        dict(kind="mystery"),
        dict(kind="external-checkpoint"),
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            BackboneSpec(**kwargs)


class TestExternalCheckpoint:
    def test_missing_file(self, tmp_path):
        spec = BackboneSpec(kind="external-checkpoint", checkpoint_path=str(tmp_path / "none.pt"))
        with pytest.raises(BackboneLoadError, match="not found"):
            VisionBackbone(spec)

    def test_corrupt_file(self, tmp_path):
        p = tmp_path / "bad.pt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(BackboneLoadError):
            VisionBackbone(BackboneSpec(kind="external-checkpoint", checkpoint_path=str(p)))

    def test_round_trip_through_adapter(self, tmp_path, tiny_backbone):
        p = tmp_path / "vit.pt"
        torch.save(tiny_backbone.model.state_dict(), p)
        ext = VisionBackbone(BackboneSpec(kind="external-checkpoint", checkpoint_path=str(p)))
        img = rand_img(12)
        assert torch.equal(ext.extract_dense(img).values, tiny_backbone.extract_dense(img).values)
        assert parameter_checksum(ext.model) == tiny_backbone.checksum()
