import numpy as np
import pytest

from pislab.autodiff import Tensor
from pislab.losses import seg_loss
from pislab.model import PisModel, adapter_names, base_names, init_params, randomize_adapters
from pislab.scenes import make_record, object_masks, render
from pislab.vision import embed_image, patch_embed, patchify


def test_patchify_layout():
    img = np.arange(2 * 8 * 8 * 3, dtype=np.float32).reshape(2, 8, 8, 3)
    p = patchify(img, 4)
    assert p.shape == (2, 4, 48)
    np.testing.assert_array_equal(p[0, 1].reshape(4, 4, 3), img[0, :4, 4:8])
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 6, 6, 3)), 4)


def test_patch_count_and_wrong_resolution(model):
    feats = model.image_features(np.zeros((32, 32, 3), np.float32))
    assert feats.shape == (1, 64, 64)
    with pytest.raises(ValueError):
        model.image_features(np.zeros((1, 16, 16, 3), np.float32))


def test_blank_image_patch_embeddings_are_all_equal(params):
    emb = patch_embed(params, np.zeros((1, 32, 32, 3), np.float32), 4).data[0]
    assert np.all(emb == emb[0])


def test_image_features_are_deterministic(model, records):
    img = render(records[0].scene)[None]
    assert np.array_equal(model.image_features(img).data, model.image_features(img).data)


def test_zero_init_head_adapters_give_identical_maps(model, records):
    img = render(records[1].scene)[None]
    feats = model.image_features(img)
    text = [records[1].positives[0].text]
    ref = model.forward(feats, text, "concept").data
    for mode in ("simple", "complex"):
        assert np.array_equal(model.forward(feats, text, mode).data, ref)


def test_mask_shape_and_range(model, records):
    img = render(records[2].scene)[None]
    p = model.predict(img, [records[2].concept_np], "concept")
    assert p.shape == (1, 32, 32)
    assert np.all((p > 0) & (p < 1))


def test_patch_logits_upsample_to_constant_blocks(model, records):
    p = model.predict(render(records[3].scene)[None], ["object"], "concept")[0]
    blocks = p.reshape(8, 4, 8, 4)
    assert np.all(blocks == blocks[:, :1, :, :1])


def test_parameter_layout_splits_base_and_adapters(params):
    adapters = set(adapter_names(params, "S")) | set(adapter_names(params, "C"))
    base = set(base_names(params))
    assert adapters.isdisjoint(base) and adapters | base == set(params)
    assert all(n.startswith(("vision.", "text.", "head.")) for n in params)
    assert {n.split(".")[0] for n in adapters} == {"text", "head"}
    assert params.num_values(adapters) < 0.1 * params.num_values()


def test_gradient_check_through_mask_head(tiny_cfg):
    from pislab.autodiff import gradient_check

    params = init_params(tiny_cfg, seed=0)
    randomize_adapters(params, seed=1)
    rec = make_record(5)
    img = np.asarray(render(rec.scene)[::4, ::4])[None]  # 8x8 view of a real scene
    gt = np.zeros((1, 8, 8), np.float32)
    gt[0, :4, :4] = 1
    params.set_trainable(adapter_names(params, "S") + adapter_names(params, "C") + ["head.scale"])

    def f(p):
        m = PisModel(p, tiny_cfg)
        return seg_loss(m.forward(m.image_features(img), ["the red circle"], "complex"), gt)

    assert gradient_check(f, params, eps=1e-4, samples_per_tensor=1) < 1e-4


def test_gt_masks_align_to_patch_grid(records):
    for rec in records[:5]:
        for m in object_masks(rec.scene).values():
            blocks = m.reshape(8, 4, 8, 4)
            assert np.all(blocks == blocks[:, :1, :, :1])


def test_embed_image_accepts_single_image(params):
    out = embed_image(params, np.zeros((32, 32, 3)), 4, 2, 4, 32)
    assert isinstance(out, Tensor) and out.shape == (1, 64, 64)
