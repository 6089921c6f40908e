"""Binarization, LSH code derivation, reliability, and the extended hash table.

A reduced 40-dim print is binarized by sign into a 40-bit integer. Exact
40-bit matching would be destroyed by a single flipped bit, so 51 smaller
16-bit codes are derived from reproducible pseudo-random bit selections: a
degradation that flips a few bits corrupts some of the 51 codes but rarely
all. Codes from the 5 bands and 51 selections share one table through 24-bit
extended codes (8-bit slot = band * 51 + selection, plus the 16-bit code).
At index time only the 10 most reliable codes per print are stored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.special

CODE_BITS = 40
N_LSH = 51
LSH_BITS = 16
N_RELIABLE = 10
N_BANDS = 5
EXT_TABLE_SIZE = 1 << 24

INDEX_MAGIC = b"BMIX"
INDEX_VERSION = 1

_POSTING_DTYPE = np.dtype([("track", "<u4"), ("segment", "<u2"), ("time", "<u2")])
_MASK64 = (1 << 64) - 1


def binarize(z) -> int:
    """40-bit code: bit k set iff component k >= 0."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (CODE_BITS,):
        raise ValueError(f"expected {CODE_BITS} components, got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite component in reduced print")
    bits = (z >= 0).astype(np.uint64)
    return int((bits << np.arange(CODE_BITS, dtype=np.uint64)).sum())


def binarize_bits(z: np.ndarray) -> np.ndarray:
    """Batch binarization to a (n, 40) uint8 bit matrix."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite component in reduced print")
    return (z >= 0).astype(np.uint8)


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class LshSpec:
    """51 reproducible selections of 16 distinct bit positions in [0, 40)."""

    seed: int
    selections: np.ndarray  # (N_LSH, LSH_BITS) int8

    def __post_init__(self):
        if self.selections.shape != (N_LSH, LSH_BITS):
            raise ValueError("selections must be 51 x 16")


def make_lsh_spec(seed: int) -> LshSpec:
    """Derive the bit selections from a 64-bit seed.

    One splitmix64 stream seeded with ``seed`` drives a partial Fisher-Yates
    shuffle of [0..39] per selection; the first 16 entries are kept. Same
    seed, same spec, forever.
    """
    state = seed & _MASK64
    selections = np.empty((N_LSH, LSH_BITS), dtype=np.int8)
    for ell in range(N_LSH):
        positions = list(range(CODE_BITS))
        for i in range(LSH_BITS):
            state, rnd = _splitmix64(state)
            j = i + rnd % (CODE_BITS - i)
            positions[i], positions[j] = positions[j], positions[i]
        selections[ell] = positions[:LSH_BITS]
    selections.setflags(write=False)
    return LshSpec(seed=seed, selections=selections)


def derive_lsh_codes(gamma: int, spec: LshSpec) -> np.ndarray:
    """The 51 16-bit codes of one 40-bit code."""
    bits = np.array([(gamma >> k) & 1 for k in range(CODE_BITS)], dtype=np.uint16)
    return codes_from_bits(bits[None, :], spec)[0]


def codes_from_bits(bits: np.ndarray, spec: LshSpec) -> np.ndarray:
    """Batch code derivation: (n, 40) bit matrix -> (n, 51) uint16."""
    gathered = bits[:, spec.selections.astype(np.int64)].astype(np.uint16)
    weights = (1 << np.arange(LSH_BITS, dtype=np.uint16)).astype(np.uint16)
    return (gathered * weights[None, None, :]).sum(axis=2, dtype=np.uint32).astype(np.uint16)


def reliability(z: np.ndarray, sigma_e: np.ndarray, spec: LshSpec) -> np.ndarray:
    """Probability that no bit of each code flips under Gaussian perturbation.

    Per component, p_k = Phi(-|z_k| / sigma_k) is the sign-flip probability;
    a code survives when none of its 16 selected bits flip (independence
    approximation).
    """
    z = np.asarray(z, dtype=np.float64)
    sigma_e = np.asarray(sigma_e, dtype=np.float64)
    p_flip = 0.5 * scipy.special.erfc(np.abs(z) / (sigma_e * np.sqrt(2.0)))
    keep = np.log1p(-np.minimum(p_flip, 1.0 - 1e-300))
    return np.exp(keep[spec.selections.astype(np.int64)].sum(axis=1))


def reliability_batch(z: np.ndarray, sigma_e: np.ndarray, spec: LshSpec) -> np.ndarray:
    """(n, 40) reduced prints -> (n, 51) reliabilities."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    p_flip = 0.5 * scipy.special.erfc(np.abs(z) / (sigma_e[None, :] * np.sqrt(2.0)))
    keep = np.log1p(-np.minimum(p_flip, 1.0 - 1e-300))
    return np.exp(keep[:, spec.selections.astype(np.int64)].sum(axis=2))


def select_reliable(reliabilities: np.ndarray, n_keep: int = N_RELIABLE) -> np.ndarray:
    """Indices of the n_keep most reliable codes; ties keep the lower index."""
    if n_keep > len(reliabilities):
        raise ValueError(f"cannot keep {n_keep} of {len(reliabilities)} codes")
    order = np.argsort(-np.asarray(reliabilities), kind="stable")
    return np.sort(order[:n_keep])


def extended_code(band: int, lsh_index, beta) -> np.ndarray:
    """24-bit extended code: (band * 51 + selection) << 16 | beta.

    ``band`` is 0-based so the slot fits 8 bits (max 254 for 5 bands).
    """
    slot = band * N_LSH + np.asarray(lsh_index, dtype=np.uint32)
    return (slot << 16) | np.asarray(beta, dtype=np.uint32)


def expected_unchanged(k: int) -> float:
    """Mean number of the 51 codes surviving k corrupted bits out of 40.

    Independence model: each selected bit survives with probability
    1 - k/40, a 16-bit code with (1 - k/40)**16.
    """
    if not 0 <= k <= CODE_BITS:
        raise ValueError(f"k must be in [0, {CODE_BITS}]")
    return N_LSH * (1.0 - k / CODE_BITS) ** LSH_BITS


def collision_mean() -> float:
    """Mean collisions of one code pair for unrelated audio: L / 2^b."""
    return N_LSH / float(1 << LSH_BITS)


def simulate_unchanged_codes(k: int, trials: int, seed: int = 0, spec: LshSpec | None = None) -> float:
    """Monte-Carlo estimate of expected_unchanged(k).

    Bits flip independently with probability k/40 (k corrupted bits on
    average). A derived code is unchanged exactly when none of its selected
    bits flipped, so survival is counted from the flip pattern directly;
    equivalence with comparing derived codes is covered by the unit tests.
    """
    spec = spec or make_lsh_spec(0)
    rng = np.random.default_rng(seed)
    flips = (rng.random((trials, CODE_BITS)) < k / CODE_BITS).astype(np.float64)
    onehot = np.zeros((CODE_BITS, N_LSH))
    for ell in range(N_LSH):
        onehot[spec.selections[ell].astype(np.int64), ell] = 1.0
    flipped_per_code = flips @ onehot
    return float((flipped_per_code == 0).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Hash table and catalog index


def _gather_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenated arange(start, start+count) for all ranges, vectorized."""
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    shifts = starts - np.concatenate(([0], np.cumsum(counts)[:-1]))
    return np.repeat(shifts, counts) + np.arange(total)


class HashTable:
    """24-bit extended-code table: build by appends, then freeze to flat arrays."""

    def __init__(self):
        self._pending: list = []
        self.frozen = False
        self.offsets: np.ndarray | None = None
        self.postings: np.ndarray | None = None

    def insert(self, codes, tracks, segments, times) -> None:
        if self.frozen:
            raise RuntimeError("cannot insert into a frozen table")
        codes = np.atleast_1d(np.asarray(codes, dtype=np.uint32))
        recs = np.empty(len(codes), dtype=_POSTING_DTYPE)
        recs["track"] = tracks
        recs["segment"] = segments
        recs["time"] = times
        self._pending.append((codes, recs))

    def freeze(self) -> None:
        if self.frozen:
            return
        if self._pending:
            codes = np.concatenate([c for c, _ in self._pending])
            recs = np.concatenate([r for _, r in self._pending])
        else:
            codes = np.empty(0, dtype=np.uint32)
            recs = np.empty(0, dtype=_POSTING_DTYPE)
        order = np.lexsort((recs["time"], recs["segment"], recs["track"], codes))
        codes = codes[order]
        self.postings = recs[order]
        self.offsets = np.searchsorted(codes, np.arange(EXT_TABLE_SIZE + 1, dtype=np.uint32)).astype(np.uint64)
        self._pending = []
        self.frozen = True

    def lookup(self, code: int) -> np.ndarray:
        if not self.frozen:
            raise RuntimeError("freeze the table before lookup")
        return self.postings[int(self.offsets[code]) : int(self.offsets[code + 1])]

    def lookup_many(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Postings for many codes at once.

        Returns (counts per code, concatenated postings in code order).
        """
        if not self.frozen:
            raise RuntimeError("freeze the table before lookup")
        codes = np.asarray(codes, dtype=np.int64)
        starts = self.offsets[codes].astype(np.int64)
        counts = (self.offsets[codes + 1] - self.offsets[codes]).astype(np.int64)
        return counts, self.postings[_gather_ranges(starts, counts)]

    @property
    def n_postings(self) -> int:
        return 0 if self.postings is None else len(self.postings)

    def bucket_loads(self) -> np.ndarray:
        return np.diff(self.offsets).astype(np.int64)


@dataclass
class TrackInfo:
    track_id: int
    name: str
    duration: float


@dataclass
class CatalogIndex:
    """Frozen hash table plus track metadata and pipeline geometry."""

    table: HashTable
    tracks: dict
    lsh_seed: int
    n_reliable: int
    segment_frames: int
    sample_rate: int
    hop_samples: int
    n_bands: int = N_BANDS
    spec: LshSpec = field(default=None)

    def __post_init__(self):
        if self.spec is None:
            self.spec = make_lsh_spec(self.lsh_seed)

    @property
    def frame_period(self) -> float:
        return self.hop_samples / self.sample_rate


def save_index(path, index: CatalogIndex) -> None:
    """Write the BMIX index file (little-endian)."""
    table = index.table
    if not table.frozen:
        raise RuntimeError("freeze the table before saving")
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(
            struct.pack(
                "<HHHHHQIIIQI",
                INDEX_VERSION,
                N_LSH,
                index.n_reliable,
                LSH_BITS,
                index.n_bands,
                index.lsh_seed & _MASK64,
                index.sample_rate,
                index.hop_samples,
                index.segment_frames,
                table.n_postings,
                len(index.tracks),
            )
        )
        fh.write(np.ascontiguousarray(table.offsets, dtype="<u8").tobytes())
        fh.write(table.postings.tobytes())
        for tid in sorted(index.tracks):
            info = index.tracks[tid]
            name = info.name.encode("utf-8")
            fh.write(struct.pack("<IdH", tid, info.duration, len(name)))
            fh.write(name)


def load_index(path) -> CatalogIndex:
    with open(path, "rb") as fh:
        if fh.read(4) != INDEX_MAGIC:
            raise ValueError(f"{path!r} is not an index file")
        header = struct.unpack("<HHHHHQIIIQI", fh.read(42))
        (version, n_lsh, n_reliable, lsh_bits, n_bands, seed, sample_rate, hop, segment_frames, n_postings, n_tracks) = header
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        if n_lsh != N_LSH or lsh_bits != LSH_BITS:
            raise ValueError("index was built with incompatible LSH parameters")
        offsets = np.frombuffer(fh.read(8 * (EXT_TABLE_SIZE + 1)), dtype="<u8")
        postings = np.frombuffer(fh.read(_POSTING_DTYPE.itemsize * n_postings), dtype=_POSTING_DTYPE)
        tracks = {}
        for _ in range(n_tracks):
            tid, duration, name_len = struct.unpack("<IdH", fh.read(14))
            name = fh.read(name_len).decode("utf-8")
            tracks[tid] = TrackInfo(track_id=tid, name=name, duration=duration)
    table = HashTable()
    table.offsets = offsets
    table.postings = postings
    table.frozen = True
    return CatalogIndex(
        table=table,
        tracks=tracks,
        lsh_seed=seed,
        n_reliable=n_reliable,
        segment_frames=segment_frames,
        sample_rate=sample_rate,
        hop_samples=hop,
        n_bands=n_bands,
    )
