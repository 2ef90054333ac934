import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbcnet.data import (
    HEADER,
    AugmentSpec,
    Dataset,
    augment,
    decode_dataset,
    default_grating_classes,
    encode_dataset,
    generate_gratings,
    hflip,
    load_dataset,
    read_pgm,
    rotate_bilinear,
    save_dataset,
    split,
    to_pgm_bytes,
    write_weights_csv,
)
from cbcnet.errors import ConfigError, DatasetFormatError, ShapeError


def random_dataset(rng, n=None):
    n = int(rng.integers(0, 6)) if n is None else n
    c, h, w, k = (int(v) for v in rng.integers(1, 4, size=4))
    k += 1
    pixels = rng.integers(0, 256, size=(n, c, h, w))
    return Dataset(pixels / 255.0, rng.integers(0, k, size=n), k)


class TestCodec:
    def test_handcrafted_fixture(self):
        # header, then label 1 with pixels 0,255,0,255 and label 0 with 255,0,255,0
        buf = struct.pack("<4sHIBHHH", b"CBC1", 1, 2, 1, 2, 2, 2)
        buf += struct.pack("<H4B", 1, 0, 255, 0, 255) + struct.pack("<H4B", 0, 255, 0, 255, 0)
        data = decode_dataset(buf)
        np.testing.assert_array_equal(data.labels, [1, 0])
        np.testing.assert_array_equal(data.images[0, 0], [[0.0, 1.0], [0.0, 1.0]])
        np.testing.assert_array_equal(data.images[1, 0], [[1.0, 0.0], [1.0, 0.0]])
        assert encode_dataset(data) == buf

    def test_header_size(self):
        assert HEADER.size == 17

    def test_round_trip_bytes(self, tmp_path):
        data = random_dataset(np.random.default_rng(0), n=5)
        path = tmp_path / "d.cbc1"
        save_dataset(data, path)
        raw = path.read_bytes()
        back = load_dataset(path)
        np.testing.assert_array_equal(back.images, data.images)
        np.testing.assert_array_equal(back.labels, data.labels)
        assert encode_dataset(back) == raw

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_round_trip_property(self, seed):
        data = random_dataset(np.random.default_rng(seed))
        buf = encode_dataset(data)
        back = decode_dataset(buf)
        assert encode_dataset(back) == buf
        assert back.num_classes == data.num_classes

    def test_truncated_payload(self):
        buf = encode_dataset(random_dataset(np.random.default_rng(1), n=3))
        with pytest.raises(DatasetFormatError) as exc:
            decode_dataset(buf[:-1])
        assert exc.value.category == "truncated"

    def test_truncated_header(self):
        with pytest.raises(DatasetFormatError) as exc:
            decode_dataset(b"CBC1\x01")
        assert exc.value.category == "truncated"

    def test_bad_magic(self):
        buf = encode_dataset(random_dataset(np.random.default_rng(2), n=1))
        with pytest.raises(DatasetFormatError) as exc:
            decode_dataset(b"XBC1" + buf[4:])
        assert exc.value.category == "bad_magic"

    def test_bad_version(self):
        buf = bytearray(encode_dataset(random_dataset(np.random.default_rng(2), n=1)))
        buf[4] = 9
        with pytest.raises(DatasetFormatError) as exc:
            decode_dataset(bytes(buf))
        assert exc.value.category == "bad_version"

    def test_trailing_data(self):
        buf = encode_dataset(random_dataset(np.random.default_rng(3), n=1))
        with pytest.raises(DatasetFormatError) as exc:
            decode_dataset(buf + b"\x00")
        assert exc.value.category == "trailing_data"

    def test_label_out_of_range(self):
        buf = bytearray(struct.pack("<4sHIBHHH", b"CBC1", 1, 1, 1, 1, 1, 2) + struct.pack("<HB", 2, 7))
        with pytest.raises(DatasetFormatError) as exc:
            decode_dataset(bytes(buf))
        assert exc.value.category == "label_out_of_range"

    def test_empty_file_with_huge_dims(self):
        buf = struct.pack("<4sHIBHHH", b"CBC1", 1, 0, 255, 65535, 65535, 3)
        data = decode_dataset(buf)
        assert len(data) == 0 and data.sample_shape == (255, 65535, 65535)

    @settings(max_examples=300, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), pos=st.integers(0, 16), value=st.integers(0, 255))
    def test_header_mutation_is_categorized(self, seed, pos, value):
        buf = bytearray(encode_dataset(random_dataset(np.random.default_rng(seed))))
        buf[pos] = value
        try:
            decode_dataset(bytes(buf))
        except DatasetFormatError as exc:
            assert exc.category in {"bad_magic", "bad_version", "bad_header", "truncated",
                                    "trailing_data", "label_out_of_range"}

    def test_encode_rejects_bad_labels(self):
        with pytest.raises(ShapeError):
            encode_dataset(Dataset(np.zeros((1, 1, 1, 1)), [3], 2))

    def test_pixels_quantized(self):
        data = Dataset(np.array([[[[0.5, 1.2]]]]), [0], 2)
        back = decode_dataset(encode_dataset(data))
        np.testing.assert_array_equal(back.images, [[[[128 / 255, 1.0]]]])


class TestSplit:
    def test_disjoint_and_complete(self):
        data = Dataset(np.arange(10.0).reshape(10, 1, 1, 1), np.arange(10) % 2, 2)
        tr, va = split(data, 0.2, seed=0)
        assert len(tr) == 8 and len(va) == 2
        values = sorted(tr.images.ravel().tolist() + va.images.ravel().tolist())
        assert values == list(range(10))

    def test_degenerate(self):
        data = Dataset(np.zeros((2, 1, 1, 1)), [0, 1], 2)
        with pytest.raises(ValueError):
            split(data, 0.0, seed=0)


class TestGratings:
    def test_formula(self):
        # with zero noise the only draws are the per-sample phases, in sample order
        classes = [(0.0, math.pi / 2), (90.0, math.pi / 2)]
        data = generate_gratings(3, classes, 8, 0.0, seed=4)
        phases = np.random.default_rng(4).uniform(0.0, 2 * math.pi, size=len(data))
        for img, lab, phase in zip(data.images, data.labels, phases):
            theta, w = classes[lab]
            t = math.radians(theta)
            for y in range(8):
                for x in range(8):
                    ref = 0.5 + 0.5 * math.cos(w * (x * math.cos(t) + y * math.sin(t)) + phase)
                    assert img[0, y, x] == pytest.approx(ref, abs=1e-12)

    def test_orientation_structure(self):
        data = generate_gratings(2, [(0.0, math.pi / 2), (90.0, math.pi / 2)], 8, 0.0, seed=1)
        horiz = data.images[data.labels == 0][0, 0]
        vert = data.images[data.labels == 1][0, 0]
        # theta=0 varies along x only, theta=90 along y only
        np.testing.assert_allclose(horiz, np.tile(horiz[0], (8, 1)), atol=1e-12)
        np.testing.assert_allclose(vert, np.tile(vert[:, :1], (1, 8)), atol=1e-12)

    def test_same_seed_same_bytes(self):
        cls = default_grating_classes(4)
        a = encode_dataset(generate_gratings(5, cls, 16, 0.05, seed=9))
        b = encode_dataset(generate_gratings(5, cls, 16, 0.05, seed=9))
        assert a == b

    def test_zero_frequency_rejected(self):
        with pytest.raises(ConfigError):
            generate_gratings(2, [(0.0, 0.0), (90.0, 0.0)], 8, 0.0, seed=0)

    @pytest.mark.parametrize("dup", [(0.0, 1.0), (180.0, 1.0), (0.0, -1.0)])
    def test_duplicate_rejected(self, dup):
        with pytest.raises(ConfigError):
            generate_gratings(2, [(0.0, 1.0), dup], 8, 0.0, seed=0)

    def test_balanced_and_bounded(self):
        data = generate_gratings(10, default_grating_classes(4), 16, 0.3, seed=2)
        assert np.bincount(data.labels).tolist() == [10] * 4
        assert data.images.min() >= 0.0 and data.images.max() <= 1.0

    def test_default_classes(self):
        assert default_grating_classes(4) == [(0.0, math.pi / 2), (45.0, math.pi / 2),
                                              (90.0, math.pi / 2), (135.0, math.pi / 2)]


class TestAugment:
    def test_hflip_reverses_columns(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        out = augment(img, AugmentSpec(hflip_prob=1.0), np.random.default_rng(0))
        for r in range(4):
            for c in range(4):
                assert out[0, r, c] == img[0, r, 3 - c]

    def test_hflip_involution(self):
        img = np.random.default_rng(0).random((2, 5, 3))
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_zero_rotation_identity(self):
        img = np.random.default_rng(1).random((1, 6, 6))
        out = augment(img, AugmentSpec(rotation_range=(0.0, 0.0)), np.random.default_rng(0))
        np.testing.assert_array_equal(out, img)

    def test_rotate_90_bilinear(self):
        img = np.arange(9.0).reshape(1, 3, 3)
        # positive angles turn clockwise as displayed (rows pointing down)
        np.testing.assert_allclose(rotate_bilinear(img, 90.0)[0], np.rot90(img[0], -1), atol=1e-12)

    def test_rotation_zero_fill(self):
        out = rotate_bilinear(np.ones((1, 5, 5)), 45.0)
        assert out[0, 0, 0] < 1.0 and out[0, 2, 2] == pytest.approx(1.0)

    def test_crop_shape_and_content(self):
        img = np.random.default_rng(2).random((1, 6, 6))
        out = augment(img, AugmentSpec(crop=(6, 0)), np.random.default_rng(0))
        np.testing.assert_array_equal(out, img)
        out = augment(img, AugmentSpec(crop=(4, 1)), np.random.default_rng(0))
        assert out.shape == (1, 4, 4)

    def test_crop_too_large(self):
        with pytest.raises(ShapeError):
            augment(np.zeros((1, 4, 4)), AugmentSpec(crop=(7, 1)), np.random.default_rng(0))

    @pytest.mark.parametrize("kwargs", [{"hflip_prob": 1.5}, {"rotation_range": (10.0, 5.0)},
                                        {"rotation_range": (0.0, 360.0)}, {"crop": (0, 1)}])
    def test_invalid_spec(self, kwargs):
        with pytest.raises(ConfigError):
            AugmentSpec(**kwargs)

    def test_does_not_mutate_input(self):
        img = np.random.default_rng(3).random((1, 5, 5))
        before = img.copy()
        augment(img, AugmentSpec(0.5, (0.0, 30.0), (5, 2)), np.random.default_rng(1))
        np.testing.assert_array_equal(img, before)


class TestGallery:
    def test_pgm_valid(self):
        plane = np.array([[0.0, 0.5], [1.0, -1.0]])
        raw = to_pgm_bytes(plane)
        assert raw.startswith(b"P5\n2 2\n255\n")
        np.testing.assert_array_equal(read_pgm(raw), [[128, 191], [255, 0]])

    def test_pgm_constant(self):
        np.testing.assert_array_equal(read_pgm(to_pgm_bytes(np.full((3, 2), 0.7))), 128)

    def test_pgm_whitespace_bytes_in_payload(self):
        plane = np.array([[10.0, 32.0, 9.0, 0.0, 255.0]])
        px = read_pgm(to_pgm_bytes(plane))
        assert px.shape == (1, 5)

    def test_pillow_can_open(self):
        # optional cross-check against an independent reader
        image_mod = pytest.importorskip("PIL.Image")
        import io

        plane = np.random.default_rng(0).random((5, 7))
        img = image_mod.open(io.BytesIO(to_pgm_bytes(plane)))
        assert img.size == (7, 5)
        np.testing.assert_array_equal(np.asarray(img), read_pgm(to_pgm_bytes(plane)))

    def test_csv_exact(self, tmp_path):
        w = np.random.default_rng(1).normal(size=(2, 3, 3))
        path = tmp_path / "w.csv"
        write_weights_csv(w, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "channel,row,col,value"
        assert len(lines) == 1 + w.size
        back = np.zeros_like(w)
        for line in lines[1:]:
            c, r, col, v = line.split(",")
            back[int(c), int(r), int(col)] = float(v)
        np.testing.assert_array_equal(back, w)
