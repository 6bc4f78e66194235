"""Locally-adaptive vector quantization (LVQ).

Vectors are centered with a dataset-wide mean, then each vector gets its own
uniform scalar grid spanning ``[min, max]`` of its residual. The optional
second level quantizes the first-level rounding error, which lives in
``[-delta/2, delta/2]``, on a finer grid.

The per-vector scalars ``lo`` and ``delta`` are kept in float64, which makes
a flat (constant-residual) vector decode exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

VALID_B1 = (4, 8)
VALID_B2 = (0, 8)


@dataclass(frozen=True)
class LvqCodec:
    dim: int
    mean: np.ndarray
    b1: int = 8
    b2: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("codec dimension must be >= 1")
        if self.b1 not in VALID_B1:
            raise ValidationError(f"b1 must be one of {VALID_B1}, got {self.b1}")
        if self.b2 not in VALID_B2:
            raise ValidationError(f"b2 must be one of {VALID_B2}, got {self.b2}")
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.shape != (self.dim,) or not np.all(np.isfinite(mean)):
            raise ValidationError("codec mean must be a finite vector of length dim")
        object.__setattr__(self, "mean", mean)

    @property
    def levels1(self) -> int:
        return (1 << self.b1) - 1

    @property
    def name(self) -> str:
        return f"LVQ{self.b1}" if self.b2 == 0 else f"LVQ{self.b1}x{self.b2}"


@dataclass(frozen=True)
class LvqCode:
    """One encoded vector. ``codes1``/``codes2`` hold packed bytes."""

    codes1: bytes
    codes2: bytes | None
    lo: float
    delta: float


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack unsigned codes along the last axis; 4-bit codes go low nibble first."""
    codes = np.asarray(codes, dtype=np.uint8)
    if bits == 8:
        return codes.copy()
    if bits != 4:
        raise ValidationError(f"unsupported code width {bits}")
    if codes.shape[-1] % 2:
        pad = np.zeros(codes.shape[:-1] + (1,), dtype=np.uint8)
        codes = np.concatenate([codes, pad], axis=-1)
    return (codes[..., 0::2] | (codes[..., 1::2] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, bits: int, dim: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if bits == 8:
        return packed[..., :dim].copy()
    if bits != 4:
        raise ValidationError(f"unsupported code width {bits}")
    out = np.empty(packed.shape[:-1] + (packed.shape[-1] * 2,), dtype=np.uint8)
    out[..., 0::2] = packed & 0x0F
    out[..., 1::2] = packed >> 4
    return out[..., :dim]


def packed_width(dim: int, bits: int) -> int:
    return dim if bits == 8 else (dim + 1) // 2


def fit_codec(vectors, b1: int = 8, b2: int = 0) -> LvqCodec:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("fit_codec needs a non-empty n x dim matrix")
    if not np.all(np.isfinite(x)):
        raise ValidationError("fit_codec input contains non-finite values")
    return LvqCodec(dim=x.shape[1], mean=x.mean(axis=0), b1=b1, b2=b2)


def _encode_rows(codec: LvqCodec, x: np.ndarray):
    """Vectorized encoder: returns unpacked codes1, codes2 (or None), lo, delta."""
    if x.shape[1] != codec.dim:
        raise ValidationError(f"expected vectors of dimension {codec.dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("cannot encode non-finite values")
    r = x - codec.mean
    lo64 = r.min(axis=1)
    hi = r.max(axis=1)
    d64 = (hi - lo64) / codec.levels1
    flat = d64 == 0.0
    safe = np.where(flat, 1.0, d64)[:, None]
    scaled = (r - lo64[:, None]) / safe
    c1 = np.clip(np.floor(scaled + 0.5), 0, codec.levels1)
    c1[flat] = 0
    c2 = None
    if codec.b2:
        levels2 = 1 << codec.b2
        err = r - (lo64[:, None] + c1 * d64[:, None])
        step2 = safe / levels2
        c2 = np.clip(np.floor((err + 0.5 * safe) / step2), 0, levels2 - 1)
        c2[flat] = 0
        c2 = c2.astype(np.uint8)
    return c1.astype(np.uint8), c2, lo64, d64


def _decode_rows(codec: LvqCodec, c1, c2, lo, delta) -> np.ndarray:
    lo = np.asarray(lo, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    out = codec.mean + lo[:, None] + c1.astype(np.float64) * delta[:, None]
    if codec.b2:
        step2 = delta / (1 << codec.b2)
        level2 = -0.5 * delta[:, None] + (c2.astype(np.float64) + 0.5) * step2[:, None]
        out = out + level2
    return out


def encode(codec: LvqCodec, x) -> LvqCode:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (codec.dim,):
        raise ValidationError(f"expected a vector of length {codec.dim}, got shape {x.shape}")
    c1, c2, lo, delta = _encode_rows(codec, x[None, :])
    return LvqCode(
        codes1=pack_codes(c1[0], codec.b1).tobytes(),
        codes2=None if c2 is None else pack_codes(c2[0], codec.b2).tobytes(),
        lo=float(lo[0]),
        delta=float(delta[0]),
    )


def _unpack_code(codec: LvqCodec, code: LvqCode):
    c1 = np.frombuffer(code.codes1, dtype=np.uint8)
    if c1.size != packed_width(codec.dim, codec.b1):
        raise ValidationError("code length does not match the codec dimension")
    c1 = unpack_codes(c1, codec.b1, codec.dim)
    c2 = None
    if codec.b2:
        if code.codes2 is None:
            raise ValidationError("two-level codec needs second-level codes")
        c2 = unpack_codes(np.frombuffer(code.codes2, dtype=np.uint8), codec.b2, codec.dim)
        if c2.size != codec.dim:
            raise ValidationError("second-level code length does not match the codec dimension")
    return c1, c2


def decode(codec: LvqCodec, code: LvqCode) -> np.ndarray:
    c1, c2 = _unpack_code(codec, code)
    return _decode_rows(
        codec, c1[None, :], None if c2 is None else c2[None, :], [code.lo], [code.delta]
    )[0]


def inner_product_quantized(codec: LvqCodec, code: LvqCode, q) -> float:
    """<q, decode(code)> without materializing the decoded vector."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (codec.dim,):
        raise ValidationError(f"expected a query of length {codec.dim}, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValidationError("query contains non-finite values")
    c1, c2 = _unpack_code(codec, code)
    qsum = q.sum()
    total = q @ codec.mean + code.lo * qsum + code.delta * (q @ c1.astype(np.float64))
    if codec.b2:
        step2 = code.delta / (1 << codec.b2)
        total += step2 * (q @ c2.astype(np.float64)) + (0.5 * step2 - 0.5 * code.delta) * qsum
    return float(total)


@dataclass
class LvqStore:
    """A whole dataset of LVQ codes, kept unpacked in memory for scoring."""

    codec: LvqCodec
    codes1: np.ndarray  # n x dim uint8
    codes2: np.ndarray | None
    lo: np.ndarray
    delta: np.ndarray
    _decoded: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def encode(cls, codec: LvqCodec, vectors, chunk_rows: int = 8192) -> "LvqStore":
        x = np.asarray(vectors, dtype=np.float64)
        if x.ndim != 2:
            raise ValidationError("expected an n x dim matrix")
        parts = [_encode_rows(codec, x[s:s + chunk_rows]) for s in range(0, x.shape[0], chunk_rows)]
        if not parts:
            empty = np.zeros((0, codec.dim), dtype=np.uint8)
            return cls(codec, empty, empty.copy() if codec.b2 else None,
                       np.zeros(0), np.zeros(0))
        c1 = np.concatenate([p[0] for p in parts])
        c2 = np.concatenate([p[1] for p in parts]) if codec.b2 else None
        return cls(codec, c1, c2, np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts]))

    def __len__(self):
        return self.codes1.shape[0]

    @property
    def dim(self) -> int:
        return self.codec.dim

    def code(self, i: int) -> LvqCode:
        return LvqCode(
            codes1=pack_codes(self.codes1[i], self.codec.b1).tobytes(),
            codes2=None if self.codes2 is None else pack_codes(self.codes2[i], self.codec.b2).tobytes(),
            lo=float(self.lo[i]),
            delta=float(self.delta[i]),
        )

    def decode_rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.intp)
        c2 = None if self.codes2 is None else self.codes2[ids]
        return _decode_rows(self.codec, self.codes1[ids], c2, self.lo[ids], self.delta[ids])

    def decoded(self) -> np.ndarray:
        """All reconstructed vectors as float32 (cached)."""
        if self._decoded is None:
            self._decoded = self.decode_rows(np.arange(len(self))).astype(np.float32)
        return self._decoded

    def inner_products(self, q, ids) -> np.ndarray:
        """<q, x_hat_i> for each id, from the codes directly."""
        ids = np.asarray(ids, dtype=np.intp)
        q = np.asarray(q, dtype=np.float64)
        qsum = q.sum()
        lo = self.lo[ids]
        delta = self.delta[ids]
        out = q @ self.codec.mean + lo * qsum + delta * (self.codes1[ids] @ q)
        if self.codes2 is not None:
            step2 = delta / (1 << self.codec.b2)
            out += step2 * (self.codes2[ids] @ q) + (0.5 * step2 - 0.5 * delta) * qsum
        return out
