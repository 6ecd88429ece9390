"""Additive M-of-M secret sharing over Z_{2^64} with two's-complement fixed point.

Every participant ``i`` splits its secret vector into M rows that sum (mod 2^64) to
the encoded secret, sends row ``k`` to participant ``k``, and each participant
forwards only the column sums of what it holds. The server adds those sums and
decodes. Both the news-pool union (integers, ``frac_bits=0``) and gradient
aggregation (``frac_bits=24``) go through the same path.

Note: the reconstructed membership sum exposes per-news click *counts* within the
group, not just the union.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

U64 = np.uint64
RING_BITS = 64


class EncodingError(OverflowError):
    pass


class ProtocolError(RuntimeError):
    pass


class DropoutError(ProtocolError):
    """A participant's share never arrived; the M-of-M round cannot complete."""


# -- fixed point ---------------------------------------------------------------

def encode_fixed_point(x, frac_bits: int) -> np.ndarray:
    """round(x * 2^f) as a two's-complement residue mod 2^64 (uint64 array)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise EncodingError("cannot encode non-finite values")
    limit = 2.0 ** (63 - frac_bits)
    if np.any(np.abs(x) >= limit):
        raise EncodingError(f"|x| must be < 2^{63 - frac_bits} for {frac_bits} fraction bits")
    scaled = np.rint(np.ldexp(x, frac_bits))
    return scaled.astype(np.int64).view(U64)


def decode_fixed_point(r, frac_bits: int) -> np.ndarray:
    r = np.asarray(r, dtype=U64)
    return np.ldexp(r.view(np.int64).astype(np.float64), -frac_bits)


def decode_integers(r) -> np.ndarray:
    return np.asarray(r, dtype=U64).view(np.int64)


def max_secret_magnitude(frac_bits: int, group_size: int) -> float:
    """Bound on |x| that keeps the sum of ``group_size`` encodings free of wraparound."""
    return 2.0 ** (63 - frac_bits) / group_size


# -- rng streams -----------------------------------------------------------------

def share_rng(seed: int, round_id: int, sender: int) -> np.random.Generator:
    """Independent stream per (round, sender); it draws that sender's random rows."""
    return np.random.default_rng(np.random.SeedSequence([seed, round_id, sender]))


def uniform_ring(rng: np.random.Generator, shape) -> np.ndarray:
    # raw 64-bit words are uniform over the whole ring
    return rng.bit_generator.random_raw(shape).astype(U64, copy=False)


# -- sharing ---------------------------------------------------------------------

@dataclass
class ShareMatrix:
    owner: int
    rows: np.ndarray  # (M, N) uint64; row k goes to participant k


@dataclass
class ShareSum:
    holder: int
    values: np.ndarray  # (N,) uint64


@dataclass
class Message:
    round_id: int
    sender: int
    receiver: int | str
    width: int

    @property
    def byte_count(self) -> int:
        return self.width * 8


@dataclass
class Channel:
    """Synchronous, exactly-once, in-order delivery.

    Byte counters are always kept; per-message records only when ``record`` is set.
    ``drop`` lists (sender, receiver) pairs whose messages never arrive; the
    receiver may be ``"server"``.
    """

    round_id: int = 0
    record: bool = False
    drop: set = field(default_factory=set)
    trace: list[Message] = field(default_factory=list)
    peer_bytes: int = 0
    server_bytes: int = 0

    def lost(self, sender: int, receiver) -> bool:
        return (sender, receiver) in self.drop

    def log(self, sender: int, receiver, width: int) -> None:
        if receiver == "server":
            self.server_bytes += width * 8
        else:
            self.peer_bytes += width * 8
        if self.record:
            self.trace.append(Message(self.round_id, sender, receiver, width))


def make_shares(encoded_secret: np.ndarray, group_size: int, rng: np.random.Generator,
                owner: int = 0, residual_row: int | None = None) -> ShareMatrix:
    """Split an encoded secret into ``group_size`` additive shares.

    Every row except ``residual_row`` (default: the last) is drawn uniformly from the
    ring by ``rng``, in row order; the residual row makes the column sums equal the
    secret mod 2^64. The random rows therefore depend on the rng only, never on the
    secret.
    """
    if group_size < 2:
        raise ValueError("secret sharing needs at least 2 participants")
    secret = np.asarray(encoded_secret, dtype=U64).ravel()
    residual_row = group_size - 1 if residual_row is None else residual_row
    if not 0 <= residual_row < group_size:
        raise ValueError(f"residual_row {residual_row} out of range")
    rand = uniform_ring(rng, (group_size - 1, secret.size))
    residual = secret - rand.sum(axis=0, dtype=U64)
    rows = np.insert(rand, residual_row, residual, axis=0)
    return ShareMatrix(owner, rows)


def exchange_and_sum(matrices: Sequence[ShareMatrix], channel: Channel | None = None) -> list[ShareSum]:
    """Deliver row ``j`` of every matrix to participant ``j``; each returns its column sum.

    Participants are identified by their position in ``matrices``.
    """
    channel = channel or Channel()
    M = len(matrices)
    if M < 2:
        raise ValueError("exchange needs at least 2 participants")
    width = matrices[0].rows.shape[1]
    for i, sm in enumerate(matrices):
        if sm.rows.shape != (M, width):
            raise ProtocolError(f"participant {i}: share matrix {sm.rows.shape} != {(M, width)}")
    for i, j in sorted((p for p in channel.drop if p[1] != "server"), key=str):
        if i != j and 0 <= i < M and 0 <= j < M:
            raise DropoutError(f"share from participant {i} to {j} missing")
    if channel.record:
        for i in range(M):
            for j in range(M):
                if i != j:
                    channel.log(i, j, width)
    else:
        channel.peer_bytes += M * (M - 1) * width * 8
    # stacked[i, j] is the row participant i sent to j; V_j sums over senders
    stacked = np.stack([sm.rows for sm in matrices])
    totals = stacked.sum(axis=0, dtype=U64)
    return [ShareSum(j, totals[j]) for j in range(M)]


def reconstruct_sum(share_sums: Sequence[ShareSum], frac_bits: int,
                    channel: Channel | None = None, expected: int | None = None) -> np.ndarray:
    """Server side: add every V_j (mod 2^64) and decode."""
    if expected is not None and len(share_sums) != expected:
        raise DropoutError(f"expected {expected} share sums, got {len(share_sums)}")
    if not share_sums:
        raise ProtocolError("no share sums to reconstruct")
    width = share_sums[0].values.size
    total = np.zeros(width, dtype=U64)
    for s in share_sums:
        if s.values.size != width:
            raise ProtocolError(f"share sum widths differ: {s.values.size} vs {width}")
        if channel is not None:
            if channel.lost(s.holder, "server"):
                raise DropoutError(f"share sum from participant {s.holder} missing")
            channel.log(s.holder, "server", width)
        total += s.values
    return decode_integers(total) if frac_bits == 0 else decode_fixed_point(total, frac_bits)


def secure_sum(secrets: Sequence[np.ndarray], frac_bits: int, seed: int = 0, round_id: int = 0,
               channel: Channel | None = None, bound_check: bool = True) -> np.ndarray:
    """Run the whole protocol on plaintext vectors; returns the decoded elementwise sum."""
    M = len(secrets)
    if M < 2:
        raise ValueError("secure_sum needs at least 2 participants")
    channel = channel or Channel(round_id)
    plain = np.stack([np.asarray(x, dtype=np.float64).ravel() for x in secrets])
    if bound_check and plain.size:
        peaks = np.max(np.abs(plain), axis=1)
        over = np.flatnonzero(peaks >= max_secret_magnitude(frac_bits, M))
        if over.size:
            raise EncodingError(f"participant {over[0]}: secret magnitude too large for a group of {M}")
    encoded = encode_fixed_point(plain, frac_bits)
    matrices = [make_shares(encoded[i], M, share_rng(seed, round_id, i), owner=i) for i in range(M)]
    sums = exchange_and_sum(matrices, channel)
    return reconstruct_sum(sums, frac_bits, channel, expected=M)


def communication_bytes(group_size: int, width: int) -> int:
    """Bytes for one secure sum: peer-to-peer shares plus share sums to the server."""
    return group_size * (group_size - 1) * width * 8 + group_size * width * 8


# -- news pool -------------------------------------------------------------------

def membership_vector(clicked: Iterable[int], catalog_size: int) -> np.ndarray:
    """0/1 indicator over the catalog for the given (0-based) news indices."""
    h = np.zeros(catalog_size, dtype=np.int64)
    for j in clicked:
        if not 0 <= j < catalog_size:
            raise IndexError(f"news index {j} outside catalog of {catalog_size}")
        h[j] = 1
    return h


def pool_from_sum(h) -> list[int]:
    h = np.asarray(h)
    if np.any(h < 0):
        raise ProtocolError("negative membership count: shares were corrupted")
    return [int(i) for i in np.flatnonzero(h > 0)]
