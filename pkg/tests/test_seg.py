import csv
import itertools
from fractions import Fraction

import numpy as np
import pytest
from PIL import Image

from emlrseg import config as C
from emlrseg import tensor as T
from emlrseg.seg import (
    TapSpec,
    bilinear_matrix,
    build_seg_model,
    encoder_state_from_checkpoint,
    export_png,
    finetune_loop,
    load_encoder,
    load_seg_checkpoint,
    miou,
    pyramid_fuse,
    seg_loss,
    segment,
    tap_features,
    write_report,
)
from emlrseg.vit import StackConfig, patchify


def brute_miou(pred, gt, k):
    """Pixel-by-pixel counting with exact fractions."""
    ious = []
    pairs = list(zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()))
    for c in range(k):
        inter = sum(1 for p, g in pairs if p == c and g == c)
        union = sum(1 for p, g in pairs if p == c or g == c)
        if union:
            ious.append(Fraction(inter, union))
    return sum(ious) / len(ious)


class TestMiou:
    def test_worked_example(self):
        res = miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
        assert res.ious == [0.5, pytest.approx(2 / 3)]
        assert res.mean == float(Fraction(7, 12))
        assert brute_miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2) == Fraction(7, 12)

    def test_perfect(self):
        g = np.array([[0, 1], [2, 3]])
        res = miou(g, g, 4)
        assert res.ious == [1.0] * 4 and res.mean == 1.0

    def test_disjoint(self):
        res = miou(np.zeros((2, 2), int), np.ones((2, 2), int), 2)
        assert res.ious == [0.0, 0.0]

    def test_absent_class_excluded(self):
        res = miou(np.zeros((2, 2), int), np.zeros((2, 2), int), 4)
        assert res.ious == [1.0, None, None, None]
        assert res.mean == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            miou(np.zeros((2, 2)), np.zeros((2, 3)), 2)

    def test_exhaustive_2x2(self):
        grids = [np.array(b).reshape(2, 2) for b in itertools.product((0, 1), repeat=4)]
        for p in grids:
            for g in grids:
                ref = float(brute_miou(p, g, 2))
                assert miou(p, g, 2).mean == pytest.approx(ref, abs=1e-12)
                assert miou(g, p, 2).mean == miou(p, g, 2).mean

    @pytest.mark.parametrize("side", [3, 4])
    def test_sampled_larger_grids(self, side):
        rng = np.random.default_rng(side)
        n = side * side
        for _ in range(2000):
            p = rng.integers(0, 2, (side, side))
            g = rng.integers(0, 2, (side, side))
            assert miou(p, g, 2).mean == pytest.approx(float(brute_miou(p, g, 2)), abs=1e-12)
        assert n == side * side


def seg_cfg(depth=4, dim=16, image=32, patch=8, fpn=8, seed=0, taps=()):
    cfg = C.RunConfig(seed=seed)
    cfg.model = C.ModelConfig(image_size=image, patch_size=patch,
                              encoder=StackConfig(depth=depth, dim=dim, heads=2, patch_size=patch),
                              decoder=StackConfig(depth=1, dim=dim, heads=2, patch_size=patch))
    cfg.data.image_size = image
    cfg.finetune = C.FinetuneConfig(fpn_dim=fpn, taps=list(taps), batch_size=4, epochs=2, warmup_epochs=1)
    return cfg


class TestTaps:
    @pytest.mark.parametrize("depth, expected", [(4, [1, 2, 3, 4]), (24, [6, 12, 18, 24]), (2, [1, 1, 2, 2]),
                                                 (6, [2, 3, 5, 6])])
    def test_rounding_rule(self, depth, expected):
        assert TapSpec.for_depth(depth).blocks == expected

    def test_grid_too_small_for_pyramid(self):
        with pytest.raises(ValueError, match="divisor"):
            build_seg_model(seg_cfg(image=16, patch=4))

    def test_tap_out_of_range(self):
        with pytest.raises(ValueError, match="tap index"):
            build_seg_model(seg_cfg(depth=2, taps=[1, 2, 3, 4]))

    def test_final_tap_is_encoder_output(self, rng):
        m = build_seg_model(seg_cfg(depth=3))
        img = rng.standard_normal((2, 1, 32, 32)).astype(np.float32)
        maps = tap_features(m, img)
        final = m.encoder(m.embed(T.Tensor(patchify(img, 8)))).data.reshape(2, 4, 4, -1)
        np.testing.assert_array_equal(maps[-1].data, final)

    def test_full_geometry(self, rng):
        cfg = seg_cfg(depth=24, dim=8, image=224, patch=16, fpn=4)
        m = build_seg_model(cfg)
        img = rng.standard_normal((1, 1, 224, 224)).astype(np.float32)
        with T.no_grad():
            maps = tap_features(m, img)
            assert [mp.shape for mp in maps] == [(1, 14, 14, 8)] * 4
            fused = pyramid_fuse(m, maps)
        assert fused.shape == (1, 56, 56, 4)


class TestHead:
    def test_single_map_is_lateral_only(self, rng):
        m = build_seg_model(seg_cfg(depth=2))
        m.taps = TapSpec([2], [8])
        m.laterals = [m.lateral1]
        x = T.Tensor(rng.standard_normal((1, 4, 4, 16)).astype(np.float32))
        np.testing.assert_array_equal(pyramid_fuse(m, [x]).data, m.lateral1(x).data)

    def test_zero_features_zero_fusion(self):
        m = build_seg_model(seg_cfg())
        zeros = [T.Tensor(np.zeros((1, 4, 4, 16), np.float32))] * 4
        assert not pyramid_fuse(m, zeros).data.any()

    def test_logits_shape_and_finite(self, rng):
        m = build_seg_model(seg_cfg())
        img = rng.standard_normal((3, 1, 32, 32)).astype(np.float32) * 100
        pred = segment(m, img)
        assert pred.logits.shape == (3, 4, 32, 32)
        assert pred.labels().shape == (3, 32, 32)
        assert np.isfinite(pred.logits.data).all()

    def test_bilinear_rows_sum_to_one(self):
        for n_out, n_in in [(32, 8), (64, 16), (7, 3)]:
            m = bilinear_matrix(n_out, n_in, np.float64)
            np.testing.assert_allclose(m.sum(1), 1.0)
        np.testing.assert_allclose(bilinear_matrix(4, 4, np.float64), np.eye(4))

    def test_gradcheck_head(self):
        from emlrseg.gradcheck import check_grads

        cfg = seg_cfg(depth=2, dim=8, image=32, patch=4, fpn=4)
        cfg.dtype = "float64"
        m = build_seg_model(cfg)
        rng = np.random.default_rng(0)
        for _, p in m.named_parameters():
            p.data[:] = p.data + rng.standard_normal(p.shape) * 0.2
        img = rng.standard_normal((1, 1, 32, 32))
        lab = rng.integers(0, 4, (1, 32, 32))
        params = [p for n, p in m.named_parameters() if n.startswith(("lateral", "classifier", "encoder.block1"))]
        errs = check_grads(lambda: seg_loss(segment(m, img), lab), params, max_entries=20)
        assert max(errs) <= 1e-4

    def test_overfit_single_batch(self, rng):
        from emlrseg.nn import AdamW

        m = build_seg_model(seg_cfg())
        img = rng.standard_normal((2, 1, 32, 32)).astype(np.float32)
        lab = rng.integers(0, 4, (2, 32, 32))
        lab[:, :16] = 0
        opt = AdamW(m.named_parameters(), lr=3e-3)
        losses = []
        for _ in range(50):
            loss = seg_loss(segment(m, img), lab)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        assert losses[-1] < losses[0]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])


class TestCheckpointsAndReports:
    def test_encoder_round_trip_bit_identical(self, tmp_path):
        cfg = seg_cfg()
        src = build_seg_model(cfg)
        state = {k: v.copy() for k, v in src.encoder_state().items()}
        dst = build_seg_model(seg_cfg(seed=9))
        load_encoder(dst, state)
        for k, v in dst.encoder_state().items():
            assert v.tobytes() == state[k].tobytes()

    def test_mismatch_lists_shapes(self):
        small = build_seg_model(seg_cfg(dim=16)).encoder_state()
        big = build_seg_model(seg_cfg(dim=32))
        with pytest.raises(C.ConfigError) as exc:
            load_encoder(big, small)
        assert any("vs model" in e for e in exc.value.errors)

    def test_scratch_and_pretrained_differ_only_in_encoder(self):
        a = build_seg_model(seg_cfg(seed=3))
        b = build_seg_model(seg_cfg(seed=3))
        load_encoder(b, build_seg_model(seg_cfg(seed=4)).encoder_state())
        for (k, va), vb in zip(a.state_dict().items(), b.state_dict().values()):
            if k.startswith(("embed.", "encoder.")) and va.ndim == 2:
                assert not np.array_equal(va, vb), k
            elif not k.startswith(("embed.", "encoder.")):
                assert np.array_equal(va, vb), k

    def test_report_csv(self, tmp_path):
        res = miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 4)
        write_report(tmp_path / "r.csv", res)
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == ["class_name", "iou"]
        assert rows[1] == ["background", "0.500000"]
        assert rows[3][1] == ""
        assert rows[-1] == ["mean", f"{7 / 12:.6f}"]

    def test_png_export(self, tmp_path):
        lab = np.array([[0, 1], [2, 3]], dtype=np.uint8)
        export_png(tmp_path / "p.png", lab)
        img = Image.open(tmp_path / "p.png")
        assert img.mode == "P"
        np.testing.assert_array_equal(np.array(img), lab)

    def test_finetune_loop_outputs(self, tmp_path, rng):
        cfg = seg_cfg()
        imgs = rng.standard_normal((4, 1, 32, 32)).astype(np.float32)
        labs = rng.integers(0, 4, (4, 32, 32))
        res = finetune_loop(cfg, (imgs, labs), (imgs, labs), None, tmp_path)
        assert len(res.history) == 2 and "miou" in res.history[-1]
        for name in ("finetune_metrics.jsonl", "ckpt_finetuned.bin", "eval_report.csv"):
            assert (tmp_path / name).exists()
        model, cfg2 = load_seg_checkpoint(tmp_path / "ckpt_finetuned.bin")
        for k, v in res.model.state_dict().items():
            assert np.array_equal(v, model.state_dict()[k])
        assert set(encoder_state_from_checkpoint(tmp_path / "ckpt_finetuned.bin")) == set(model.encoder_state())
