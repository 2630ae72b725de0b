import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cansim import codec
from cansim.codec import (
    DOMINANT,
    EXTENDED,
    RECESSIVE,
    STANDARD,
    FieldMap,
    Frame,
    FrameId,
    crc15,
    decode_frame,
    destuff,
    encode_frame,
    error_frame_bits,
    stuff,
)
from cansim.errors import CrcMismatch, FormError, StuffViolation

from .oracles import crc15_longdiv, destuff_oracle, stuff_oracle

bit_lists = st.lists(st.integers(0, 1), max_size=200)


def random_frame(rng) -> Frame:
    extended = rng.integers(0, 4) == 0
    kind = EXTENDED if extended else STANDARD
    ident = int(rng.integers(0, 1 << (29 if extended else 11)))
    rtr = rng.integers(0, 8) == 0
    dlc = int(rng.integers(0, 9))
    data = b"" if rtr else bytes(rng.integers(0, 256, dlc).tolist())
    return Frame(FrameId(ident, kind), rtr=bool(rtr), dlc=dlc, data=data)


class TestCrc15:
    def test_empty_is_zero(self):
        assert crc15([]) == 0

    def test_all_dominant_44(self):
        # frozen via the long-division oracle: zero input, zero init
        assert crc15_longdiv([0] * 44) == 0
        assert crc15([0] * 44) == 0

    def test_frozen_values(self):
        # values computed once with crc15_longdiv and pinned
        assert crc15([1] * 44) == 22702
        seq = [1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 0, 1, 1, 1, 0, 0, 0, 1, 0]
        assert crc15(seq) == 0x1A4F
        rng = np.random.default_rng(1234)
        for n, expected in ((7, 0x4BD7), (30, 0x7E91), (83, 0x7356)):
            s = rng.integers(0, 2, n).tolist()
            assert crc15_longdiv(s) == expected
            assert crc15(s) == expected

    @given(bit_lists)
    def test_matches_long_division_oracle(self, bits):
        assert crc15(bits) == crc15_longdiv(bits)

    def test_single_flip_changes_crc(self):
        rng = np.random.default_rng(77)
        for _ in range(1000):
            n = int(rng.integers(1, 120))
            bits = rng.integers(0, 2, n)
            k = int(rng.integers(0, n))
            flipped = bits.copy()
            flipped[k] ^= 1
            assert crc15_longdiv(bits) != crc15_longdiv(flipped)
            assert crc15(bits) != crc15(flipped)


class TestStuffing:
    def test_run_of_five_gets_stuffed(self):
        assert stuff([1, 1, 1, 1, 1]).tolist() == [1, 1, 1, 1, 1, 0]

    def test_no_run_unchanged(self):
        assert stuff([1, 0, 1, 0, 1, 0]).tolist() == [1, 0, 1, 0, 1, 0]

    def test_inserted_bit_joins_next_run(self):
        # the inserted 0 extends the zero run, forcing a second stuff bit
        assert stuff([1, 1, 1, 1, 1, 0, 0, 0, 0, 0]).tolist() == [
            1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 1, 0,
        ]

    def test_destuff_single_removal(self):
        assert destuff([1, 1, 1, 1, 1, 0]).tolist() == [1, 1, 1, 1, 1]

    def test_six_equal_violates(self):
        with pytest.raises(StuffViolation):
            destuff([1, 1, 1, 1, 1, 1])
        with pytest.raises(StuffViolation):
            destuff([0, 1, 0, 0, 0, 0, 0, 0])

    @given(bit_lists)
    def test_roundtrip_identity(self, bits):
        assert destuff(stuff(bits)).tolist() == list(bits)

    @given(bit_lists)
    def test_matches_stuffing_oracle(self, bits):
        assert stuff(bits).tolist() == stuff_oracle(bits)

    @given(bit_lists)
    def test_no_six_runs_and_length_bound(self, bits):
        out = stuff(bits).tolist()
        run = 0
        prev = None
        for b in out:
            run = run + 1 if b == prev else 1
            prev = b
            assert run <= 5
        assert len(out) <= len(bits) + (len(bits) + 3) // 4

    @given(bit_lists)
    def test_destuff_agrees_with_oracle(self, bits):
        expected, violation = destuff_oracle(bits)
        if violation is None:
            assert destuff(bits).tolist() == expected
        else:
            with pytest.raises(StuffViolation) as err:
                destuff(bits)
            assert err.value.index == violation


class TestEncodeDecode:
    def test_unstuffed_length_dlc0(self):
        bits, fmap = encode_frame(Frame(FrameId(0x555), dlc=0))
        raw = destuff(bits[: fmap.end("CRC")])
        assert len(raw) + 10 == 44  # + CRC_DEL, ACK, ACK_DEL, EOF(7)

    def test_unstuffed_length_dlc8(self):
        frame = Frame(FrameId(0x2A5), dlc=8, data=bytes(range(8)))
        bits, fmap = encode_frame(frame)
        raw = destuff(bits[: fmap.end("CRC")])
        assert len(raw) + 10 == 108

    def test_msg1_roundtrip(self):
        frame = Frame(FrameId(0x199), dlc=1, data=bytes([0x0A]))
        bits, _ = encode_frame(frame)
        assert decode_frame(bits) == frame

    def test_roundtrip_random_frames(self):
        rng = np.random.default_rng(2024)
        for _ in range(300):
            frame = random_frame(rng)
            bits, _ = encode_frame(frame)
            assert decode_frame(bits) == frame

    def test_fieldmap_tiles_stream(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            frame = random_frame(rng)
            bits, fmap = encode_frame(frame)
            pos = 0
            for name, (start, length) in fmap.ranges.items():
                assert start == pos, name
                pos += length
            assert pos == len(bits)

    def test_stuffed_region_matches_kernel(self):
        # encode's label-carrying stuffing must equal the plain kernel
        rng = np.random.default_rng(6)
        for _ in range(100):
            frame = random_frame(rng)
            bits, fmap = encode_frame(frame)
            region = bits[: fmap.end("CRC")]
            assert stuff(destuff(region)).tolist() == region.tolist()

    def test_data_flip_crc_mismatch(self):
        frame = Frame(FrameId(0x2B4), dlc=4, data=b"\x12\x34\x56\x78")
        bits, fmap = encode_frame(frame)
        start, length = fmap.ranges["DATA"]
        hits = 0
        for k in range(start, start + length):
            mutated = bits.copy()
            mutated[k] ^= 1
            try:
                decode_frame(mutated)
                raise AssertionError(f"silent acceptance at bit {k}")
            except CrcMismatch:
                hits += 1
            except StuffViolation:
                pass
        assert hits > 0

    def test_eof_dominant_is_form_error(self):
        bits, fmap = encode_frame(Frame(FrameId(0x100), dlc=0))
        mutated = bits.copy()
        mutated[fmap.start("EOF") + 2] = DOMINANT
        with pytest.raises(FormError):
            decode_frame(mutated)

    def test_crc_delimiter_dominant_is_form_error(self):
        bits, fmap = encode_frame(Frame(FrameId(0x100), dlc=0))
        mutated = bits.copy()
        mutated[fmap.start("CRC_DEL")] = DOMINANT
        with pytest.raises(FormError):
            decode_frame(mutated)

    def test_ack_slot_value_ignored(self):
        frame = Frame(FrameId(0x199), dlc=1, data=b"\x0a")
        bits, fmap = encode_frame(frame)
        acked = bits.copy()
        acked[fmap.ack_slot] = DOMINANT
        assert decode_frame(acked) == frame

    def test_truncated_frame_is_form_error(self):
        bits, _ = encode_frame(Frame(FrameId(0x321), dlc=2, data=b"ab"))
        with pytest.raises(FormError):
            decode_frame(bits[:-3])

    def test_extended_layout_has_srr_and_extension(self):
        frame = Frame(FrameId(0x1ABCDE99, EXTENDED), dlc=1, data=b"\x55")
        bits, fmap = encode_frame(frame)
        for name in ("SRR", "IDE", "ID_EXT", "R1"):
            assert name in fmap.ranges
        assert fmap.ranges["ID_EXT"][1] >= 18
        assert decode_frame(bits) == frame


class TestErrorFrame:
    def test_active_pattern(self):
        bits = error_frame_bits("active")
        assert len(bits) == 14
        assert bits[:6].tolist() == [DOMINANT] * 6
        assert bits[6:].tolist() == [RECESSIVE] * 8

    def test_passive_pattern(self):
        bits = error_frame_bits("passive")
        assert len(bits) == 14
        assert bits.tolist() == [RECESSIVE] * 14

    def test_active_flag_always_violates_stuffing(self):
        rng = np.random.default_rng(99)
        flag = error_frame_bits("active")[:6].tolist()
        for _ in range(200):
            frame = random_frame(rng)
            bits, fmap = encode_frame(frame)
            crc_end = fmap.end("CRC")
            cut = int(rng.integers(1, crc_end))
            wire = bits[:cut].tolist() + flag
            _, violation = destuff_oracle(wire)
            assert violation is not None
            with pytest.raises(StuffViolation):
                destuff(wire)
