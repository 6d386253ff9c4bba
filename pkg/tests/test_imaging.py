import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cxrdr.imaging import (
    BinaryMask,
    ImageGrid,
    RawLayout,
    apply_mask,
    combine_masks,
    decode_pgm,
    dump_raw_image,
    encode_pgm,
    load_mask,
    load_raw_image,
    mask_area_fraction,
    mask_to_image,
    point_in_mask,
    reduction_factor,
    resize_image,
)


def mask(rows):
    return BinaryMask(np.array(rows, dtype=np.uint8))


class TestTypes:
    def test_image_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageGrid(np.array([[4096]]), 12)

    def test_image_rejects_bad_depth(self):
        with pytest.raises(ValueError):
            ImageGrid(np.zeros((2, 2)), 10)

    def test_mask_rejects_non_binary(self):
        with pytest.raises(ValueError):
            BinaryMask(np.array([[0, 2]]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ImageGrid(np.zeros((0, 3)), 8)

    def test_image_is_immutable(self):
        img = ImageGrid(np.zeros((2, 2)), 8)
        with pytest.raises(ValueError):
            img.pixels[0, 0] = 1


class TestRaw:
    def test_big_endian(self):
        img = load_raw_image(bytes([0x01, 0x00]), RawLayout(1, 1, "big_endian", 16))
        assert img.pixels[0, 0] == 256

    def test_little_endian(self):
        img = load_raw_image(bytes([0x01, 0x00]), RawLayout(1, 1, "little_endian", 16))
        assert img.pixels[0, 0] == 1

    def test_size_mismatch(self):
        with pytest.raises(ValueError, match="size mismatch"):
            load_raw_image(bytes(3), RawLayout(1, 1))

    def test_full_size_out_of_range_sample(self):
        layout = RawLayout()  # 2048 x 2048, 12-bit, big-endian
        data = bytearray(layout.file_size)
        assert len(data) == 8_388_608
        offset = 2 * (1000 * 2048 + 17)
        data[offset : offset + 2] = (4096).to_bytes(2, "big")
        with pytest.raises(ValueError, match="exceeds 12-bit"):
            load_raw_image(bytes(data), layout)

    def test_row_major_offsets(self):
        layout = RawLayout(3, 2, "big_endian", 16)
        data = b"".join(v.to_bytes(2, "big") for v in range(6))
        img = load_raw_image(data, layout)
        assert img.pixels.tolist() == [[0, 1, 2], [3, 4, 5]]

    @settings(max_examples=50)
    @given(
        arrays(np.uint16, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 4095)),
        st.sampled_from(["big_endian", "little_endian"]),
    )
    def test_round_trip(self, pixels, order):
        layout = RawLayout(pixels.shape[1], pixels.shape[0], order, 12)
        data = pixels.astype(layout.dtype).tobytes()
        assert dump_raw_image(load_raw_image(data, layout), layout) == data


class TestPgm:
    def test_round_trip_16bit(self):
        img = ImageGrid(np.array([[0, 4095], [1234, 7]]), 12)
        data = encode_pgm(img)
        assert data.startswith(b"P5\n2 2\n4095\n")
        # big-endian sample order
        assert data[-8:-6] == (0).to_bytes(2, "big") and data[-6:-4] == (4095).to_bytes(2, "big")
        assert decode_pgm(data) == img

    def test_round_trip_8bit_mask(self):
        m = mask([[1, 0, 1]])
        back = load_mask(decode_pgm(encode_pgm(mask_to_image(m))))
        assert back == m

    def test_header_comments(self):
        data = b"P5\n# made by hand\n2 1\n# depth\n255\n" + bytes([3, 200])
        assert decode_pgm(data).pixels.tolist() == [[3, 200]]

    def test_rejects_ascii_pgm(self):
        with pytest.raises(ValueError):
            decode_pgm(b"P2\n1 1\n255\n0\n")


class TestMaskOps:
    def test_load_mask_threshold(self):
        img = ImageGrid(np.array([[0, 255]]), 8)
        assert load_mask(img, 128).bits.tolist() == [[0, 1]]
        assert load_mask(img, 0).bits.tolist() == [[1, 1]]
        assert load_mask(ImageGrid(np.zeros((2, 2)), 8), 1).bits.sum() == 0

    def test_load_mask_threshold_too_high(self):
        with pytest.raises(ValueError):
            load_mask(ImageGrid(np.zeros((1, 1)), 8), 256)

    def test_apply_mask(self):
        img = ImageGrid(np.array([[5, 7], [1, 3]]), 8)
        out = apply_mask(img, mask([[1, 0], [0, 1]]))
        assert out.pixels.tolist() == [[5, 0], [0, 3]]
        assert out.bit_depth == 8
        assert apply_mask(img, mask([[1, 1], [1, 1]])) == img
        assert apply_mask(img, mask([[0, 0], [0, 0]])).pixels.sum() == 0

    def test_apply_mask_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(ImageGrid(np.zeros((2, 2)), 8), mask([[1, 0]]))

    def test_combine(self):
        a, b = mask([[1, 0]]), mask([[0, 1]])
        assert combine_masks([a, b], "union").bits.tolist() == [[1, 1]]
        assert combine_masks([a, b], "intersection").bits.tolist() == [[0, 0]]

    def test_combine_mean_majority(self):
        ms = [mask([[1, 0]]), mask([[1, 1]]), mask([[0, 0]])]
        assert combine_masks(ms, "mean").bits.tolist() == [[1, 0]]

    def test_combine_mean_exact_half_is_set(self):
        assert combine_masks([mask([[1]]), mask([[0]])], "mean").bits.tolist() == [[1]]

    @pytest.mark.parametrize("op", ["union", "intersection", "mean"])
    def test_combine_idempotent(self, op):
        m = mask([[1, 0, 1], [0, 0, 1]])
        assert combine_masks([m, m, m], op) == m

    def test_combine_errors(self):
        with pytest.raises(ValueError):
            combine_masks([], "union")
        with pytest.raises(ValueError):
            combine_masks([mask([[1]]), mask([[1, 0]])], "union")
        with pytest.raises(ValueError):
            combine_masks([mask([[1]])], "xor")

    def test_area_fraction(self):
        bits = np.zeros(16, dtype=np.uint8)
        bits[:5] = 1
        assert mask_area_fraction(BinaryMask(bits.reshape(4, 4))) == 0.3125
        assert mask_area_fraction(mask([[1, 1]])) == 1.0

    def test_reduction_factor(self):
        assert reduction_factor(0.32) == pytest.approx(3.125)
        assert reduction_factor(1.0) == 1.0
        assert reduction_factor(0.5) == 2.0
        with pytest.raises(ValueError):
            reduction_factor(0.0)

    def test_point_in_mask(self):
        m = mask([[1, 0], [0, 0]])
        assert point_in_mask(m, 0, 0) is True
        assert point_in_mask(m, 1, 0) is False
        with pytest.raises(IndexError):
            point_in_mask(m, 2, 0)
        with pytest.raises(IndexError):
            point_in_mask(m, 0, -1)


class TestResize:
    def test_block_mean(self):
        img = ImageGrid(np.array([[0, 0], [2, 2]]), 8)
        assert resize_image(img, 1, 1).pixels.tolist() == [[1]]

    def test_rounding_half_up(self):
        img = ImageGrid(np.array([[0, 1]]), 8)
        assert resize_image(img, 1, 1).pixels.tolist() == [[1]]

    def test_constant(self):
        img = ImageGrid(np.full((8, 8), 77), 8)
        for side in (1, 2, 4, 8):
            assert np.all(resize_image(img, side, side).pixels == 77)

    def test_jsrt_to_256_uses_8x8_blocks(self):
        big = np.zeros((2048, 2048), dtype=np.uint16)
        big[:8, :8] = 64  # exactly one 8x8 block
        out = resize_image(ImageGrid(big, 12), 256, 256)
        assert out.shape == (256, 256)
        assert out.pixels[0, 0] == 64 and out.pixels[0, 1] == 0 and out.pixels[1, 0] == 0

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            resize_image(ImageGrid(np.zeros((6, 6)), 8), 4, 4)

    def test_upscale_rejected(self):
        with pytest.raises(ValueError):
            resize_image(ImageGrid(np.zeros((2, 2)), 8), 4, 4)

    @settings(max_examples=50)
    @given(arrays(np.uint16, (8, 8), elements=st.integers(0, 4095)), st.sampled_from([1, 2, 4]))
    def test_global_mean_preserved(self, pixels, side):
        out = resize_image(ImageGrid(pixels, 12), side, side)
        assert abs(out.pixels.mean() - pixels.mean()) <= 0.5


masks_2x3 = arrays(np.uint8, (2, 3), elements=st.integers(0, 1))


class TestProperties:
    @given(arrays(np.uint16, (2, 3), elements=st.integers(0, 255)), masks_2x3, masks_2x3)
    def test_union_dominates(self, pixels, a, b):
        img = ImageGrid(pixels, 8)
        u = combine_masks([BinaryMask(a), BinaryMask(b)], "union")
        assert np.all(apply_mask(img, u).pixels >= apply_mask(img, BinaryMask(a)).pixels)

    @given(st.lists(masks_2x3, min_size=1, max_size=5))
    def test_area_ordering(self, arrs):
        ms = [BinaryMask(a) for a in arrs]
        lo = mask_area_fraction(combine_masks(ms, "intersection"))
        hi = mask_area_fraction(combine_masks(ms, "union"))
        for m in ms:
            assert lo <= mask_area_fraction(m) <= hi
