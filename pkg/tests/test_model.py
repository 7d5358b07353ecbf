import pytest
import torch

from negattn.attention import AttentionConfig
from negattn.data import (IDENTIFIER, Vocabulary, VocabularyError, caption,
                          decode_latent, encode_image, make_dataset, parse_attributes, render,
                          subject_prompt)
from negattn.masks import MaskState
from negattn.numerics import Rng, gaussian
from negattn.training import build_model


@pytest.fixture(scope="module")
def model():
    m = build_model(seed=0, dtype=torch.float64)
    # the output conv starts at zero; give it weights so outputs depend on inputs
    torch.nn.init.normal_(m.unet.conv_out.weight, std=0.05, generator=torch.Generator().manual_seed(1))
    return m


@pytest.fixture(scope="module")
def dataset():
    return make_dataset(seed=0, count=64)


class TestVocabulary:
    def test_identifier_reserved(self, dataset):
        v = Vocabulary.default()
        assert v.tokens.count(IDENTIFIER) == 1
        for c in dataset.captions:
            assert IDENTIFIER not in c.split()

    def test_unknown(self):
        with pytest.raises(VocabularyError):
            Vocabulary.default().encode("a photo of a dragon")

    def test_attributes(self):
        words = caption("square", "red", "blue", hat=True).split()
        assert parse_attributes(words) == {"shape": "square", "color": "red",
                                           "background": "blue", "hat": True}
        assert parse_attributes("a photo of a sks circle on green background".split()) == {
            "shape": "circle", "background": "green"}


class TestData:
    def test_shapes_and_range(self, dataset):
        assert dataset.images.shape == (64, 3, 32, 32)
        assert dataset.images.min() >= -1 and dataset.images.max() <= 1
        assert 3 <= dataset.subject_images.shape[0] <= 5
        assert all(c == "a photo of a sks circle" for c in dataset.subject_captions)
        assert all(c == "a photo of a circle" for c in dataset.class_prior_captions)

    def test_reproducible(self, dataset):
        again = make_dataset(seed=0, count=64)
        assert torch.equal(again.images, dataset.images)
        assert again.captions == dataset.captions
        assert not torch.equal(make_dataset(seed=1, count=64).images, dataset.images)

    def test_subject_colours_absent_from_base(self, dataset):
        px = dataset.images.permute(0, 2, 3, 1).reshape(-1, 3)
        for rgb in [(1.0, 0.5, 0.0), (0.45, 0.0, 0.9), (0.5, 0.5, 0.5)]:
            target = torch.tensor(rgb, dtype=torch.float64) * 2 - 1
            assert ((px - target).abs().sum(-1) < 1e-9).sum() == 0

    def test_render_colours(self):
        img = render("square", "red", "blue", 16, 16, 8)
        assert torch.equal(torch.from_numpy(img[:, 16, 16]), torch.tensor([1.0, -1.0, -1.0], dtype=torch.float64))
        assert torch.equal(torch.from_numpy(img[:, 0, 0]), torch.tensor([-1.0, -1.0, 1.0], dtype=torch.float64))

    def test_latent_projection(self):
        x = torch.arange(3 * 32 * 32, dtype=torch.float64).reshape(1, 3, 32, 32)
        z = encode_image(x)
        assert z.shape == (1, 3, 16, 16)
        assert z[0, 0, 0, 0] == (0 + 1 + 32 + 33) / 4
        assert torch.equal(encode_image(decode_latent(z)), z)


class TestEncoder:
    def test_empty_prompt(self, model):
        e = model.encode_prompt("")
        assert e.shape == (1, model.cfg.d_cond)
        assert torch.equal(e[0], model.encoder.token[0] + model.encoder.position[0])

    def test_deterministic(self, model):
        p = "a photo of a red circle"
        assert torch.equal(model.encode_prompt(p), model.encode_prompt(p))

    def test_swap_changes_only_swapped_rows(self, model):
        a = model.encode_prompt("a photo of a red circle")
        b = model.encode_prompt("a photo of a circle red")
        same = (a == b).all(-1)
        # start token, then "a photo of a", then the swapped pair
        assert same.tolist() == [True, True, True, True, True, False, False]
        # each swapped row keeps its position embedding and takes the other token
        pos = model.encoder.position
        assert torch.equal(b[5] - pos[5], a[6] - pos[6])

    def test_start_token(self, model):
        e = model.encode_prompt("a photo")
        assert e.shape[0] == 3
        assert torch.equal(e[0], model.encode_prompt("")[0])

    def test_unknown_token(self, model):
        with pytest.raises(VocabularyError):
            model.encode_prompt("a photo of a dragon")

    def test_padding_is_masked(self, model):
        c = model.conditioning(["a photo", "a photo of a red circle"])
        assert c.key_mask.tolist()[0] == [True, True, True, False, False, False, False]
        assert c.identifier_index is None
        assert model.conditioning(subject_prompt()).identifier_index == 2

    def test_identifier_starts_blank(self):
        m = build_model(seed=5)
        assert not m.encoder.token[m.vocab.identifier_id].any()


class TestDenoise:
    def _inputs(self, model, b=2):
        z = gaussian(Rng(0), (b, *model.latent_shape))
        cond = model.conditioning("a photo of a sks circle on green background", b)
        subj = model.conditioning(subject_prompt(), b)
        return z, cond, subj

    def test_shape(self, model):
        z, cond, _ = self._inputs(model)
        with torch.no_grad():
            assert model.denoise(z, 500, cond).shape == z.shape

    def test_null_subject_is_baseline(self, model):
        z, cond, _ = self._inputs(model)
        with torch.no_grad():
            a = model.denoise(z, 500, cond, None, AttentionConfig(lam=0.8), MaskState(batch=2))
            b = model.denoise(z, 500, cond)
        assert torch.equal(a, b)

    def test_zero_scale_is_baseline(self, model):
        z, cond, subj = self._inputs(model)
        with torch.no_grad():
            a = model.denoise(z, 500, cond, subj, AttentionConfig(lam=0.0), MaskState(batch=2))
            b = model.denoise(z, 500, cond, subj, AttentionConfig(lam=0.7, negative_attention=False))
        assert torch.equal(a, b)

    def test_subject_branch_changes_output(self, model):
        z, cond, subj = self._inputs(model)
        with torch.no_grad():
            a = model.denoise(z, 500, cond, subj, AttentionConfig(lam=0.7, background_masking=False))
            b = model.denoise(z, 500, cond)
        assert not torch.equal(a, b)

    def test_records_base_resolution_only(self, model):
        z, cond, subj = self._inputs(model)
        state = MaskState(base_resolution=model.base_resolution, batch=2,
                          identifier_token_index=cond.identifier_index)
        state.begin_step(500)
        with torch.no_grad():
            model.denoise(z, 500, cond, subj, AttentionConfig(lam=0.6), state)
        # two 16x16 cross-attention blocks x 4 heads
        assert len(state.accumulated_maps) == 2 * model.cfg.heads
        assert state.accumulated_maps[0].shape == (2, 256)
        layers = [entry[1] for entry in state.log]
        assert layers == ["down0", "down1", "mid", "up1", "up0"]

    def test_subject_fallback_when_identifier_not_in_prompt(self, model):
        z, _, subj = self._inputs(model)
        cond = model.conditioning("a photo of a circle on green background", 2)
        state = MaskState(base_resolution=model.base_resolution, batch=2,
                          subject_identifier_index=subj.identifier_index)
        state.begin_step(500)
        with torch.no_grad():
            model.denoise(z, 500, cond, subj, AttentionConfig(lam=0.6), state)
        assert len(state.accumulated_maps) == 2 * model.cfg.heads
