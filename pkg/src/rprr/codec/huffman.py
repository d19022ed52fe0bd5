"""Canonical Huffman tables and MSB-first bit packing."""

from __future__ import annotations

import heapq

import numpy as np

from ..errors import DecodeError

MAX_CODE_LEN = 15


def code_lengths(freqs, max_len=MAX_CODE_LEN) -> np.ndarray:
    """Huffman code lengths for ``freqs`` (zero-frequency symbols get 0).

    A lone symbol gets length 0: it costs no bits. Lengths are kept within
    ``max_len`` by halving the counts and rebuilding.
    """
    freqs = np.asarray(freqs, dtype=np.int64)
    lengths = np.zeros(len(freqs), dtype=np.int64)
    used = np.flatnonzero(freqs > 0)
    if len(used) <= 1:
        return lengths
    f = freqs[used].copy()
    while True:
        heap = [(int(c), k, (k,)) for k, c in enumerate(f)]
        heapq.heapify(heap)
        depth = np.zeros(len(f), dtype=np.int64)
        tie = len(f)
        while len(heap) > 1:
            c1, _, s1 = heapq.heappop(heap)
            c2, _, s2 = heapq.heappop(heap)
            for s in s1 + s2:
                depth[s] += 1
            heapq.heappush(heap, (c1 + c2, tie, s1 + s2))
            tie += 1
        if depth.max() <= max_len:
            lengths[used] = depth
            return lengths
        f = np.maximum(f // 2, 1)


def canonical_codes(lengths) -> np.ndarray:
    """Canonical code values for given lengths (ordered by length, then symbol)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    codes = np.zeros(len(lengths), dtype=np.int64)
    order = sorted((int(l), s) for s, l in enumerate(lengths) if l > 0)
    code, prev = 0, 0
    for l, s in order:
        code <<= l - prev
        codes[s] = code
        code += 1
        prev = l
    return codes


def decode_table(lengths, max_len=MAX_CODE_LEN):
    """Flat lookup table indexed by the next ``max_len`` bits.

    Returns parallel lists ``(symbol, length)``; unused prefixes hold
    symbol -1.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    size = 1 << max_len
    sym = np.full(size, -1, dtype=np.int64)
    ln = np.zeros(size, dtype=np.int64)
    used = np.flatnonzero(lengths > 0)
    if len(used) == 0:
        return sym.tolist(), ln.tolist()
    codes = canonical_codes(lengths)
    for s in used:
        l = int(lengths[s])
        lo = int(codes[s]) << (max_len - l)
        sym[lo:lo + (1 << (max_len - l))] = s
        ln[lo:lo + (1 << (max_len - l))] = l
    return sym.tolist(), ln.tolist()


def pack_bits(values, lengths) -> tuple[bytes, int]:
    """Concatenate ``values[k]`` written in ``lengths[k]`` bits, MSB first.

    Returns ``(bytes, nbits)``; the last byte is zero-padded.
    """
    values = np.asarray(values, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    keep = lengths > 0
    values, lengths = values[keep], lengths[keep]
    total = int(lengths.sum())
    if total == 0:
        return b"", 0
    item = np.repeat(np.arange(len(lengths)), lengths)
    start = np.cumsum(lengths) - lengths
    offs = np.arange(total) - start[item]
    bits = (values[item] >> (lengths[item] - 1 - offs)) & 1
    return np.packbits(bits.astype(np.uint8)).tobytes(), total


class BitReader:
    """Sequential MSB-first reader over a byte string.

    ``base`` is the byte offset of ``data`` inside the enclosing stream and is
    only used to report positions in errors.
    """

    def __init__(self, data: bytes, nbits=None, base=0):
        self.data = bytes(data)
        self.nbits = len(self.data) * 8 if nbits is None else nbits
        self.pos = 0
        self.base = base
        # 64-bit big-endian window starting at every byte offset
        pad = np.frombuffer(self.data + b"\0" * 8, dtype=np.uint8).astype(np.uint64)
        n = len(self.data)
        win = np.zeros(n + 1, dtype=np.uint64)
        for k in range(8):
            win |= pad[k:k + n + 1] << np.uint64(56 - 8 * k)
        self._win = win.tolist()

    def offset(self):
        return self.base + self.pos // 8

    def peek(self, n):
        """Next ``n`` bits (n <= 56) without consuming; zero past the end."""
        p = self.pos
        return ((self._win[p >> 3] << (p & 7)) & 0xFFFFFFFFFFFFFFFF) >> (64 - n)

    def read(self, n):
        if n == 0:
            return 0
        if self.pos + n > self.nbits:
            raise DecodeError("stream truncated", self.offset())
        v = self.peek(n)
        self.pos += n
        return v

    def skip(self, n):
        if self.pos + n > self.nbits:
            raise DecodeError("stream truncated", self.offset())
        self.pos += n


class Table:
    """Code lengths plus the symbol a zero-bit single-symbol table stands for."""

    def __init__(self, lengths, single=None):
        self.lengths = np.asarray(lengths, dtype=np.int64)
        self.single = single
        self.codes = canonical_codes(self.lengths)
        self._lut = None

    @classmethod
    def from_freqs(cls, freqs):
        freqs = np.asarray(freqs)
        used = np.flatnonzero(freqs > 0)
        single = int(used[0]) if len(used) == 1 else None
        return cls(code_lengths(freqs), single)

    @property
    def symbols(self):
        if self.single is not None:
            return [self.single]
        return [s for s, l in enumerate(self.lengths) if l > 0]

    def descriptor(self):
        syms = self.symbols
        vals, lens = [len(syms)], [5]
        for s in syms:
            vals += [s, int(self.lengths[s])]
            lens += [5, 4]
        return vals, lens

    @classmethod
    def read_descriptor(cls, reader: BitReader, nsym):
        count = reader.read(5)
        lengths = np.zeros(nsym, dtype=np.int64)
        syms = []
        for _ in range(count):
            s, l = reader.read(5), reader.read(4)
            if s >= nsym or s in syms:
                raise DecodeError(f"bad symbol {s} in table descriptor", reader.offset())
            syms.append(s)
            lengths[s] = l
        single = None
        if count == 1:
            if lengths[syms[0]] != 0:
                raise DecodeError("single-symbol table must have length 0", reader.offset())
            single = syms[0]
        elif count > 1:
            if np.any(lengths[syms] == 0):
                raise DecodeError("zero code length in multi-symbol table", reader.offset())
            kraft = np.sum(2.0 ** -lengths[syms])
            if kraft > 1.0 + 1e-12:
                raise DecodeError("table descriptor violates the Kraft inequality", reader.offset())
        return cls(lengths, single)

    def lut(self):
        if self._lut is None:
            self._lut = decode_table(self.lengths)
        return self._lut
