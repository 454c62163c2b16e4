import gzip
import struct

import numpy as np
import pytest

from atlasforge import data
from atlasforge.data import (
    Dataset,
    ItemMeta,
    build_simulated,
    encode_attributes,
    holdout_filter,
    load_idx,
    load_image_dir,
    make_template,
    pad_to,
    parse_holdout,
    quantize8,
    read_pgm,
    save_image_dir,
    split,
    synth_class_dataset,
    synth_oracle_dataset,
    synth_transform,
    write_pgm,
)


def idx_bytes(images: np.ndarray) -> bytes:
    n, h, w = images.shape
    return struct.pack(">IIII", 0x803, n, h, w) + images.tobytes()


def label_bytes(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 0x801, len(labels)) + labels.tobytes()


def tiny_dataset(n=12, n_classes=3, h=8, w=8, seed=0, scales=False):
    rng = np.random.default_rng(seed)
    images = (rng.integers(0, 256, size=(n, h, w)) / 255.0).astype(np.float32)
    meta = [
        ItemMeta(
            class_id=i % n_classes,
            scale=float(rng.uniform(0.7, 1.3)) if scales else None,
        )
        for i in range(n)
    ]
    attrs = np.stack(
        [encode_attributes(m.class_id, n_classes, scale=m.scale) for m in meta]
    )
    return Dataset(
        images=images,
        attributes=attrs,
        meta=meta,
        splits=np.full(n, "train"),
        n_classes=n_classes,
    )


class TestIdx:
    def test_roundtrip(self, tmp_path, rng):
        images = rng.integers(0, 256, size=(5, 4, 3)).astype(np.uint8)
        labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
        ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
        ip.write_bytes(idx_bytes(images))
        lp.write_bytes(label_bytes(labels))
        ds = load_idx(ip, lp)
        assert ds.n == 5 and ds.images.shape == (5, 4, 3)
        np.testing.assert_allclose(ds.images, images / 255.0)
        assert [m.class_id for m in ds.meta] == [0, 1, 2, 1, 0]
        assert ds.n_classes == 3 and ds.attributes.shape == (5, 3)

    def test_full_byte_is_one(self, tmp_path):
        ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
        ip.write_bytes(idx_bytes(np.full((1, 1, 1), 255, dtype=np.uint8)))
        lp.write_bytes(label_bytes(np.zeros(1, dtype=np.uint8)))
        assert load_idx(ip, lp).images[0, 0, 0] == 1.0

    def test_gzip_transparent(self, tmp_path):
        images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        labels = np.array([1, 0], dtype=np.uint8)
        ip, lp = tmp_path / "im.idx.gz", tmp_path / "lb.idx.gz"
        ip.write_bytes(gzip.compress(idx_bytes(images)))
        lp.write_bytes(gzip.compress(label_bytes(labels)))
        ds = load_idx(ip, lp)
        np.testing.assert_allclose(ds.images, images / 255.0)

    def test_bad_magic_with_offset(self, tmp_path):
        ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
        ip.write_bytes(struct.pack(">IIII", 0x123, 1, 1, 1) + b"\x00")
        lp.write_bytes(label_bytes(np.zeros(1, dtype=np.uint8)))
        with pytest.raises(ValueError, match="magic.*byte 0"):
            load_idx(ip, lp)

    def test_truncated_with_offset(self, tmp_path):
        ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
        ip.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 5)
        lp.write_bytes(label_bytes(np.zeros(2, dtype=np.uint8)))
        with pytest.raises(ValueError, match="truncated at byte 21"):
            load_idx(ip, lp)

    def test_count_mismatch_names_both(self, tmp_path):
        ip, lp = tmp_path / "im.idx", tmp_path / "lb.idx"
        ip.write_bytes(idx_bytes(np.zeros((3, 1, 1), dtype=np.uint8)))
        lp.write_bytes(label_bytes(np.zeros(2, dtype=np.uint8)))
        with pytest.raises(ValueError, match="3 images.*2 labels"):
            load_idx(ip, lp)


class TestPgm:
    def test_p5_roundtrip_bitexact(self, tmp_path, rng):
        img = (rng.integers(0, 256, size=(6, 9)) / 255.0).astype(np.float32)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        np.testing.assert_array_equal(read_pgm(path), img)

    def test_p2_with_comments(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_text("P2\n# a comment\n3 2\n255\n0 128 255\n10 20 30\n")
        img = read_pgm(path)
        assert img.shape == (2, 3)
        assert img[0, 1] == np.float32(128 / 255)

    def test_smaller_maxval_scales(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_text("P2\n2 1\n100\n0 100\n")
        np.testing.assert_allclose(read_pgm(path), [[0.0, 1.0]])

    def test_truncated_raster(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(ValueError, match="truncated"):
            read_pgm(path)

    def test_rejects_16bit(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_text("P2\n1 1\n65535\n9\n")
        with pytest.raises(ValueError, match="8-bit"):
            read_pgm(path)


class TestImageDir:
    def test_roundtrip_bitexact(self, tmp_path):
        ds = tiny_dataset(scales=True)
        save_image_dir(ds, tmp_path / "d")
        back = load_image_dir(tmp_path / "d")
        np.testing.assert_array_equal(back.images, ds.images)
        assert back.n_classes == ds.n_classes
        for a, b in zip(back.meta, ds.meta):
            assert a == b
        np.testing.assert_array_equal(back.attributes, ds.attributes)

    def test_png_roundtrip(self, tmp_path):
        ds = tiny_dataset(n=4)
        save_image_dir(ds, tmp_path / "d", fmt="png")
        back = load_image_dir(tmp_path / "d")
        np.testing.assert_array_equal(back.images, ds.images)

    def test_missing_file_named(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        (d / "attributes.csv").write_text(
            "filename,class,scale,rotation\nghost.pgm,0,,\n"
        )
        with pytest.raises(ValueError, match="ghost.pgm"):
            load_image_dir(d)

    def test_bad_row_numbered(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        write_pgm(d / "a.pgm", np.zeros((2, 2)))
        (d / "attributes.csv").write_text(
            "filename,class,scale,rotation\na.pgm,0,,\na.pgm,oops,,\n"
        )
        with pytest.raises(ValueError, match="row 3"):
            load_image_dir(d)

    def test_nonuniform_dims(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        write_pgm(d / "a.pgm", np.zeros((2, 2)))
        write_pgm(d / "b.pgm", np.zeros((3, 3)))
        (d / "attributes.csv").write_text(
            "filename,class,scale,rotation\na.pgm,0,,\nb.pgm,0,,\n"
        )
        with pytest.raises(ValueError, match="non-uniform"):
            load_image_dir(d)

    def test_partially_filled_column(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        write_pgm(d / "a.pgm", np.zeros((2, 2)))
        write_pgm(d / "b.pgm", np.zeros((2, 2)))
        (d / "attributes.csv").write_text(
            "filename,class,scale,rotation\na.pgm,0,0.8,\nb.pgm,0,,\n"
        )
        with pytest.raises(ValueError, match="scale"):
            load_image_dir(d)

    def test_header_enforced(self, tmp_path):
        d = tmp_path / "d"
        d.mkdir()
        (d / "attributes.csv").write_text("file,cls\nx.pgm,0\n")
        with pytest.raises(ValueError, match="filename,class,scale,rotation"):
            load_image_dir(d)


class TestSynthTransform:
    def test_identity(self, rng):
        img = rng.uniform(size=(9, 9)).astype(np.float32)
        np.testing.assert_allclose(synth_transform(img, 1.0, 0.0), img, atol=1e-6)

    def test_rotation_180_point_symmetry(self):
        img = np.zeros((9, 9), dtype=np.float32)
        img[2, 5] = 1.0
        out = synth_transform(img, 1.0, 180.0)
        assert out[9 - 1 - 2, 9 - 1 - 5] == pytest.approx(1.0, abs=1e-6)

    def test_scale_area_ratio(self):
        disk = make_template("disk", 48, 48)
        base = (disk > 0.5).sum()
        big = (synth_transform(disk, 1.3, 0.0) > 0.5).sum()
        assert abs(big / base - 1.3**2) < 0.1 * 1.3**2

    def test_scale_out_of_range(self):
        with pytest.raises(ValueError):
            synth_transform(np.zeros((4, 4)), 1.5, 0.0)


class TestBuildSimulated:
    def test_class_regime_unchanged(self):
        ds = tiny_dataset()
        out = build_simulated(ds, "class", seed=3)
        np.testing.assert_array_equal(out.images, ds.images)
        assert out.attributes.shape == (ds.n, ds.n_classes)
        np.testing.assert_allclose(out.attributes.sum(1), 1.0)

    def test_deterministic(self):
        ds = tiny_dataset()
        a = build_simulated(ds, "class-scale-rot", seed=11)
        b = build_simulated(ds, "class-scale-rot", seed=11)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.attributes, b.attributes)

    def test_scale_attr_appended(self):
        ds = tiny_dataset()
        out = build_simulated(ds, "class-scale", seed=1)
        assert out.attributes.shape == (ds.n, ds.n_classes + 1)
        assert all(m.scale is not None and m.rotation is None for m in out.meta)

    def test_scales_cover_uniformly(self):
        ds = tiny_dataset(n=10000, h=4, w=4)
        out = build_simulated(ds, "class-scale", seed=5)
        scales = np.sort([m.scale for m in out.meta])
        cdf = (scales - 0.7) / 0.6
        emp = np.arange(1, len(scales) + 1) / len(scales)
        ks = max(
            np.abs(emp - cdf).max(), np.abs(emp - 1 / len(scales) - cdf).max()
        )
        assert ks < 0.02

    def test_bad_regime(self):
        with pytest.raises(ValueError):
            build_simulated(tiny_dataset(), "class-rot", seed=0)


class TestOracleDataset:
    def test_single_item_field_is_zero(self):
        tpl = make_template("disk")
        ds, fields = synth_oracle_dataset(tpl, 1, 0.0, 3.0, seed=2)
        np.testing.assert_array_equal(fields, 0.0)
        np.testing.assert_allclose(ds.images[0], tpl, atol=1e-7)

    def test_zero_noise_zero_amplitude(self):
        tpl = make_template("ring")
        ds, fields = synth_oracle_dataset(tpl, 4, 0.0, 0.0, seed=2)
        for img in ds.images:
            np.testing.assert_array_equal(img, tpl.astype(np.float32))

    def test_fields_sum_bitwise_zero(self):
        tpl = make_template("disk")
        _, fields = synth_oracle_dataset(tpl, 37, 0.05, 3.0, seed=9)
        assert fields.dtype == np.float32
        assert np.all(fields.sum(axis=0) == 0.0)
        assert np.all(fields.astype(np.float64).sum(axis=0) == 0.0)

    def test_amplitude_respected_and_deterministic(self):
        tpl = make_template("disk")
        ds1, f1 = synth_oracle_dataset(tpl, 10, 0.05, 2.0, seed=4)
        ds2, f2 = synth_oracle_dataset(tpl, 10, 0.05, 2.0, seed=4)
        np.testing.assert_array_equal(ds1.images, ds2.images)
        np.testing.assert_array_equal(f1, f2)
        mags = np.sqrt((f1.astype(np.float64) ** 2).sum(-1)).max(axis=(1, 2))
        assert np.all(mags < 2.0 + 0.3) and mags.max() > 1.0

    def test_amplitude_cap(self):
        with pytest.raises(ValueError):
            synth_oracle_dataset(make_template("disk"), 2, 0.0, 6.0, seed=0)


class TestAttributes:
    def test_onehot_only(self):
        v = encode_attributes(3, 10)
        assert v.shape == (10,) and v[3] == 1.0 and v.sum() == 1.0

    def test_scale_endpoints(self):
        assert encode_attributes(0, 1, scale=0.7)[-1] == 0.0
        assert encode_attributes(0, 1, scale=1.3)[-1] == 1.0

    def test_rotation_half(self):
        v = encode_attributes(0, 2, rotation=180.0)
        assert v.shape == (3,) and v[-1] == 0.5

    def test_errors(self):
        with pytest.raises(ValueError):
            encode_attributes(5, 5)
        with pytest.raises(ValueError):
            encode_attributes(0, 1, scale=1.4)
        with pytest.raises(ValueError):
            encode_attributes(0, 1, rotation=360.0)


class TestSplit:
    def test_exact_thousand(self):
        ds = tiny_dataset(n=1000, n_classes=10, h=2, w=2)
        out = split(ds, (0.8, 0.1, 0.1), seed=0)
        assert len(out.indices("train")) == 800
        assert len(out.indices("val")) == 100
        assert len(out.indices("test")) == 100

    def test_deterministic(self):
        ds = tiny_dataset(n=100)
        a = split(ds, (0.8, 0.1, 0.1), seed=7)
        b = split(ds, (0.8, 0.1, 0.1), seed=7)
        np.testing.assert_array_equal(a.splits, b.splits)

    def test_stratified(self):
        ds = tiny_dataset(n=1000, n_classes=4, h=2, w=2)
        out = split(ds, (0.8, 0.1, 0.1), seed=1)
        classes = out.class_ids()
        for c in range(4):
            mask = classes == c
            frac = (out.splits[mask] == "train").mean()
            assert abs(frac - 0.8) <= 0.02

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split(tiny_dataset(), (0.8, 0.1, 0.2), seed=0)


class TestHoldout:
    def test_parse_forms(self):
        r = parse_holdout("classes=3,4,5;scale=0.9:1.1")
        assert r.classes == {3, 4, 5} and r.scale_range == (0.9, 1.1)
        r = parse_holdout("class=5;max=5")
        assert r.classes == {5} and r.max_count == 5

    def test_parse_errors(self):
        with pytest.raises(ValueError):
            parse_holdout("scale=0.9:1.1")
        with pytest.raises(ValueError):
            parse_holdout("classes=1;scale=1.1:0.9")
        with pytest.raises(ValueError):
            parse_holdout("classes=x")

    def test_removal_leaves_no_violators(self):
        ds = split(tiny_dataset(n=300, n_classes=6, scales=True), (0.8, 0.1, 0.1), 0)
        out = holdout_filter(ds, "classes=3,4,5;scale=0.9:1.1")
        for i in out.indices("train"):
            m = out.meta[i]
            assert not (m.class_id in (3, 4, 5) and 0.9 <= m.scale <= 1.1)

    def test_val_test_untouched(self):
        ds = split(tiny_dataset(n=300, n_classes=6, scales=True), (0.8, 0.1, 0.1), 0)
        out = holdout_filter(ds, "classes=3,4,5;scale=0.9:1.1")
        assert len(out.indices("val")) == len(ds.indices("val"))
        assert len(out.indices("test")) == len(ds.indices("test"))

    def test_cap_keeps_exactly_max(self):
        ds = tiny_dataset(n=60, n_classes=3)
        out = holdout_filter(ds, "class=2;max=5")
        kept = [out.meta[i].class_id for i in out.indices("train")]
        assert kept.count(2) == 5

    def test_cap_respects_availability(self):
        ds = tiny_dataset(n=9, n_classes=3)  # 3 items per class
        out = holdout_filter(ds, "class=1;max=5")
        kept = [out.meta[i].class_id for i in out.indices("train")]
        assert kept.count(1) == 3

    def test_trivial_rule_unchanged(self):
        ds = tiny_dataset()
        out = holdout_filter(ds, "classes=99")
        assert out.n == ds.n

    def test_empty_train_rejected(self):
        ds = tiny_dataset(n=6, n_classes=1)
        with pytest.raises(ValueError, match="every training item"):
            holdout_filter(ds, "classes=0")


class TestHelpers:
    def test_pad_centered(self):
        imgs = np.ones((2, 28, 28), dtype=np.float32)
        out = pad_to(imgs, 32, 32)
        assert out.shape == (2, 32, 32)
        assert out[:, 2:30, 2:30].min() == 1.0
        assert out[:, :2].max() == 0.0

    def test_quantize8_inverts_8bit(self, rng):
        k = rng.integers(0, 256, size=(5, 5)).astype(np.uint8)
        np.testing.assert_array_equal(quantize8(k / 255.0), k)

    def test_templates_valid(self):
        for kind in data.TEMPLATE_KINDS:
            t = make_template(kind)
            assert t.shape == (32, 32)
            assert t.min() >= 0.0 and t.max() <= 1.0
            assert (t > 0.5).sum() > 20  # has real foreground

    def test_class_dataset(self):
        ds = synth_class_dataset(("disk", "ring", "cross"), 4, "class-scale", seed=2)
        assert ds.n == 12 and ds.n_classes == 3
        assert ds.attributes.shape == (12, 4)
        b = synth_class_dataset(("disk", "ring", "cross"), 4, "class-scale", seed=2)
        np.testing.assert_array_equal(ds.images, b.images)
