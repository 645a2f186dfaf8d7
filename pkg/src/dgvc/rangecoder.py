"""Byte-oriented renormalizing range coder.

32-bit range, byte-at-a-time renormalization, carry propagation handled with
the cache/pending-0xFF scheme: a finished carry rewrites the cached byte and
turns every pending 0xFF into 0x00. The encoder emits one leading byte from
the initial cache; the decoder consumes five bytes to prime its window, so a
stream can never be shorter than five bytes (empty symbol runs are handled a
layer above and never reach the coder).
"""
from __future__ import annotations

from .core import CorruptStreamError

_TOP = 1 << 24
_MASK32 = (1 << 32) - 1
_CARRY_EDGE = 0xFF000000


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._pending = 1
        self._out = bytearray()

    def encode(self, cum: int, freq: int, total: int) -> None:
        """Narrow the interval to [cum, cum+freq) out of total."""
        r = self._range // total
        self._low += r * cum
        self._range = r * freq
        while self._range < _TOP:
            self._shift_low()
            self._range <<= 8

    def encode_bits(self, value: int, bits: int) -> None:
        """Bypass-code raw bits (uniform byte symbols, most significant first)."""
        assert bits % 8 == 0
        for shift in range(bits - 8, -8, -8):
            b = (value >> shift) & 0xFF
            self.encode(b, 1, 256)

    def _shift_low(self) -> None:
        low = self._low
        if low < _CARRY_EDGE or low > _MASK32:
            carry = low >> 32
            out = self._out
            out.append((self._cache + carry) & 0xFF)
            if self._pending > 1:
                filler = (0xFF + carry) & 0xFF
                out.extend(bytes([filler]) * (self._pending - 1))
            self._cache = (low >> 24) & 0xFF
            self._pending = 0
        self._pending += 1
        self._low = (low << 8) & _MASK32

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        self._read()  # leading cache byte; value is part of the interval prefix
        for _ in range(4):
            self._code = (self._code << 8) | self._read()
        self._r = 0

    def _read(self) -> int:
        if self._pos >= len(self._data):
            raise CorruptStreamError("range-coded payload truncated",
                                     byte_offset=self._pos)
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_target(self, total: int) -> int:
        """Cumulative-frequency bucket of the next symbol; clamped in-range."""
        self._r = self._range // total
        t = self._code // self._r
        return t if t < total else total - 1

    def decode_update(self, cum: int, freq: int) -> None:
        self._code -= cum * self._r
        self._range = self._r * freq
        while self._range < _TOP:
            # Mask keeps the window at 32 bits even on corrupt input.
            self._code = ((self._code << 8) | self._read()) & _MASK32
            self._range <<= 8

    def decode_bits(self, bits: int) -> int:
        assert bits % 8 == 0
        value = 0
        for _ in range(bits // 8):
            b = self.decode_target(256)
            self.decode_update(b, 1)
            value = (value << 8) | b
        return value

    @property
    def consumed(self) -> int:
        return self._pos
