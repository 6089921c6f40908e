"""Two-step retrieval: hash-count candidate selection, then time coherence.

STEP 1 counts matching codes per reference track through the hash table,
aggregated over 15 s reference segments and integrated on a sliding window
sized from the query duration (so long references do not drown short ones in
collisions). STEP 2 checks, for each candidate, whether the matching-code
time pairs (t reference, tau query) align on a line tau = alpha * t - delta:
a cone-weighted histogram over t - tau finds the alignment even under time
stretching, and a final regression refines the stretch factor alpha and the
excerpt offset delta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from printdex import audio as _audio
from printdex import hashing as _hashing
from printdex import onsets as _onsets
from printdex import prints as _prints
from printdex.reduction import apply_reduction


@dataclass(frozen=True)
class SearchConfig:
    sigma: float = 0.25
    alpha_max: float = 1.4
    candidate_min: int = 10
    candidate_max: int = 500
    segment_s: float = 15.0
    nominal_rate: float = 4.0
    reliability_weighting: bool = False
    # desk calibration: 100 unrelated 7 s queries topped out at score 9
    no_match_abs: float = 12.0
    no_match_factor: float = 3.0

    def __post_init__(self):
        if self.alpha_max <= 1.0:
            raise ValueError("alpha_max must exceed 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class MatchHistogram:
    """Per-track best sliding-window match counts plus the raw matches."""

    track_ids: np.ndarray  # sorted by decreasing count
    counts: np.ndarray
    match_track: np.ndarray  # one entry per raw code match
    match_t: np.ndarray  # reference time (s)
    match_tau: np.ndarray  # query time (s)
    match_weight: np.ndarray
    query_duration: float

    def count_for(self, track_id: int) -> int:
        hits = np.flatnonzero(self.track_ids == track_id)
        return int(self.counts[hits[0]]) if len(hits) else 0


@dataclass
class SearchResult:
    track_id: int
    step1_count: int
    coherence_score: float
    alpha: float
    delta_t_star: float
    n_inliers: int
    low_confidence: bool = False


@dataclass
class QueryResult:
    results: list  # step-2 ranked SearchResults
    step1_ranking: np.ndarray
    no_match: bool
    n_prints: int

    @property
    def best(self) -> SearchResult | None:
        return self.results[0] if self.results else None


def count_matches(codes: np.ndarray, times: np.ndarray, index, query_duration: float, weights: np.ndarray | None = None) -> MatchHistogram:
    """STEP 1: per-track match counts over sliding segment windows.

    ``codes`` are 24-bit extended codes of the query prints (all 51 per
    print), ``times`` their anchor times in seconds. Counts are accumulated
    per 15 s reference segment, then summed over sliding windows of
    ceil(D_e / segment) + 1 consecutive segments; a track scores its best
    window.
    """
    codes = np.asarray(codes)
    if len(codes) == 0:
        raise ValueError("empty query code set")
    times = np.asarray(times, dtype=np.float64)
    if weights is None:
        weights = np.ones(len(codes))
    counts, postings = index.table.lookup_many(codes)
    match_tau = np.repeat(times, counts)
    match_weight = np.repeat(weights, counts)
    match_track = postings["track"].astype(np.int64)
    match_segment = postings["segment"].astype(np.int64)
    match_t = postings["time"].astype(np.float64) * index.frame_period
    segment_s = index.segment_frames * index.frame_period
    window = int(np.ceil(query_duration / segment_s)) + 1
    if len(match_track) == 0:
        track_ids = np.empty(0, dtype=np.int64)
        best = np.empty(0, dtype=np.int64)
    else:
        track_ids, inverse = np.unique(match_track, return_inverse=True)
        n_segments = int(match_segment.max()) + 1
        grid = np.zeros((len(track_ids), n_segments), dtype=np.int64)
        np.add.at(grid, (inverse, match_segment), 1)
        if n_segments <= window:
            best = grid.sum(axis=1)
        else:
            cum = np.cumsum(np.pad(grid, ((0, 0), (1, 0))), axis=1)
            best = (cum[:, window:] - cum[:, :-window]).max(axis=1)
    order = np.lexsort((track_ids, -best))
    return MatchHistogram(
        track_ids=track_ids[order],
        counts=best[order],
        match_track=match_track,
        match_t=match_t,
        match_tau=match_tau,
        match_weight=match_weight,
        query_duration=query_duration,
    )


def select_candidates(hist: MatchHistogram, cfg: SearchConfig | None = None) -> np.ndarray:
    """Tracks with N_i >= N_1 / 2, padded to a minimum of 10, capped at 500."""
    cfg = cfg or SearchConfig()
    nonzero = hist.counts > 0
    if not np.any(nonzero):
        return np.empty(0, dtype=np.int64)
    ids = hist.track_ids[nonzero]
    counts = hist.counts[nonzero]
    n_rule = int(np.sum(counts >= counts[0] / 2))
    n_keep = min(max(n_rule, cfg.candidate_min), cfg.candidate_max, len(ids))
    return ids[:n_keep]


def cone_weights(t: np.ndarray, tau: np.ndarray, alpha_max: float) -> np.ndarray:
    """1 + number of later pairs inside each pair's stretch cone.

    The cone from (t_n, tau_n) holds pairs (t_m, tau_m) with t_m > t_n whose
    connecting slope lies in [1/alpha_max, alpha_max]; collinear pairs under
    any admissible stretch support each other.
    """
    if alpha_max <= 1.0:
        raise ValueError("alpha_max must exceed 1")
    t = np.asarray(t, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    n = len(t)
    weights = np.ones(n)
    if n == 0:
        return weights
    chunk = max(1, int(2e6) // max(n, 1))
    lo, hi = 1.0 / alpha_max, alpha_max
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        dt = t[None, start:stop] - t[:, None]  # dt[m, i] = t_i... (i anchor)
        dtau = tau[None, start:stop] - tau[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = dtau / dt
        inside = (dt < 0) & (slope >= lo) & (slope <= hi)
        weights[start:stop] += inside.sum(axis=0)
    return weights


def time_coherence(t: np.ndarray, tau: np.ndarray, weights: np.ndarray | None, sigma: float) -> tuple[float, float]:
    """Best weighted alignment mass over offsets u = t - tau.

    Histogram with bin width sigma plus one-bin neighbor smoothing; returns
    (score, center of the winning bin).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    t = np.asarray(t, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if len(t) == 0:
        return 0.0, 0.0
    if weights is None:
        weights = np.ones(len(t))
    u = t - tau
    bins = np.floor(u / sigma).astype(np.int64)
    bmin = bins.min()
    mass = np.bincount(bins - bmin, weights=weights, minlength=int(bins.max() - bmin + 1))
    padded = np.pad(mass, 1)
    smoothed = padded[:-2] + padded[1:-1] + padded[2:]
    best = int(np.argmax(smoothed))
    return float(smoothed[best]), float((bmin + best + 0.5) * sigma)


def refine_alignment(t: np.ndarray, tau: np.ndarray, delta_t: float, sigma: float, alpha_max: float, weights: np.ndarray | None = None) -> tuple[float, float, int, bool]:
    """Linear regression tau = alpha * t - delta on the winning window.

    Pairs within 1.5 sigma of the winning offset give an initial fit; one
    re-selection pass gathers inliers from ALL pairs around the fitted line
    (margin sigma), admitting stretched matches outside the initial window,
    and refits. Pair weights (cone counts) steer the regression toward
    mutually consistent pairs, which keeps stray collisions inside the
    window from tilting the slope. alpha is clamped to
    [1/alpha_max, alpha_max]. With fewer than 2 inliers, reports
    (1.0, delta_t) flagged low-confidence.
    """
    t = np.asarray(t, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=np.float64)
    initial = np.abs((t - tau) - delta_t) <= 1.5 * sigma
    if initial.sum() < 2:
        return 1.0, delta_t, int(initial.sum()), True
    alpha, delta = _fit_line(t[initial], tau[initial], w[initial])
    inliers = np.abs(tau - (alpha * t - delta)) <= sigma
    if inliers.sum() >= 2:
        alpha, delta = _fit_line(t[inliers], tau[inliers], w[inliers])
    alpha = float(np.clip(alpha, 1.0 / alpha_max, alpha_max))
    return alpha, delta, int(inliers.sum()), False


def _fit_line(t: np.ndarray, tau: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    total = w.sum()
    t_mean = (w * t).sum() / total
    tau_mean = (w * tau).sum() / total
    var = np.sum(w * (t - t_mean) ** 2)
    if var == 0.0:
        return 1.0, float(t_mean - tau_mean)
    alpha = float(np.sum(w * (t - t_mean) * (tau - tau_mean)) / var)
    delta = float(alpha * t_mean - tau_mean)
    return alpha, delta


def query_codes(buf, index, model, print_cfg=None, onset_cfg=None, spectrogram_cfg=None):
    """Analyze an excerpt into extended codes, anchor times and reliabilities."""
    print_cfg = print_cfg or _prints.PrintConfig()
    buf = _audio.resample(buf, index.sample_rate)
    buf = _audio.normalize(buf)
    if buf.duration < print_cfg.window_s:
        raise ValueError(f"excerpt shorter than one {print_cfg.window_s} s print window")
    spec = _audio.stft(buf, spectrogram_cfg or _audio.SpectrogramConfig())
    times = _onsets.select_analysis_times(spec, onset_cfg)
    kept, coeffs = _prints.print_matrix(spec, times.frames, print_cfg)
    if len(kept) == 0:
        raise ValueError("no usable analysis window in excerpt")
    anchor_seconds = kept * (index.hop_samples / index.sample_rate)
    n_bands = coeffs.shape[1]
    all_codes, all_times, all_rel = [], [], []
    for band in range(n_bands):
        reduced = apply_reduction(coeffs[:, band, :], model, band)
        bits = _hashing.binarize_bits(reduced)
        betas = _hashing.codes_from_bits(bits, index.spec)
        ext = _hashing.extended_code(band, np.arange(_hashing.N_LSH)[None, :], betas)
        all_codes.append(ext.reshape(-1))
        all_times.append(np.repeat(anchor_seconds, _hashing.N_LSH))
        rel = _hashing.reliability_batch(reduced, model.bands[band].sigma_e, index.spec)
        all_rel.append(rel.reshape(-1))
    return (
        np.concatenate(all_codes),
        np.concatenate(all_times),
        np.concatenate(all_rel),
        len(kept),
        buf.duration,
    )


def query_index(buf, index, model, cfg: SearchConfig | None = None, print_cfg=None, onset_cfg=None) -> QueryResult:
    """Full two-step query of an audio excerpt against a catalog index."""
    cfg = cfg or SearchConfig()
    codes, times, rels, n_prints, duration = query_codes(buf, index, model, print_cfg, onset_cfg)
    weights = rels if cfg.reliability_weighting else None
    hist = count_matches(codes, times, index, duration, weights)
    candidates = select_candidates(hist, cfg)
    results = []
    for track_id in candidates:
        mask = hist.match_track == track_id
        t = hist.match_t[mask]
        tau = hist.match_tau[mask]
        w = cone_weights(t, tau, cfg.alpha_max)
        if cfg.reliability_weighting:
            w = w * hist.match_weight[mask]
        score, delta_t = time_coherence(t, tau, w, cfg.sigma)
        alpha, delta_star, n_inliers, low_conf = refine_alignment(t, tau, delta_t, cfg.sigma, cfg.alpha_max, weights=w)
        results.append(
            SearchResult(
                track_id=int(track_id),
                step1_count=hist.count_for(int(track_id)),
                coherence_score=score,
                alpha=alpha,
                delta_t_star=delta_star,
                n_inliers=n_inliers,
                low_confidence=low_conf,
            )
        )
    results.sort(key=lambda r: (-r.coherence_score, -r.step1_count, r.track_id))
    no_match = True
    if results:
        threshold = cfg.no_match_abs
        if len(results) > 1:
            threshold = max(threshold, cfg.no_match_factor * float(np.median([r.coherence_score for r in results[1:]])))
        no_match = results[0].coherence_score < threshold
    return QueryResult(results=results, step1_ranking=hist.track_ids, no_match=no_match, n_prints=n_prints)
