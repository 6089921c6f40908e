"""Per-band learned affine reduction: 1056 -> j0 -> 80 -> 80 -> 40 -> 40.

Five stages, each learned on augmented training data and finally factorized
into a single affine map:

  ICCR    rejects linearly dependent components (conditioning),
  LDA     discriminant reduction over (signal, anchor) classes,
  ICA     rotation to independent components (uniform hash-bucket filling),
  OMPCA   orthogonal recursive reduction recovering robustness under a
          Mahalanobis metric from the degradation-error covariance,
  HT      Hadamard mixing equalizing per-component robustness.

Classes group the prints of one (original signal, anchor time) pair across
degraded variants. All stages are fitted per frequency band.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

IN_DIM = 1056
LDA_DIM = 80
OUT_DIM = 40
ICCR_REL_THRESHOLD = 1e-5
MIN_ICCR_SAMPLES_FACTOR = 4

MODEL_MAGIC = b"BMRM"
MODEL_VERSION = 1


class TrainingError(ValueError):
    """Training data violates a fitting precondition."""


def _fix_signs(rows: np.ndarray) -> np.ndarray:
    """Flip row signs so the largest-|.| entry is positive (determinism)."""
    idx = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(rows.shape[0]), idx])
    signs[signs == 0] = 1.0
    return rows * signs[:, None]


# ---------------------------------------------------------------------------
# ICCR


def fit_iccr(x: np.ndarray, rel_threshold: float = ICCR_REL_THRESHOLD, enforce_min_samples: bool = False) -> tuple[np.ndarray, int]:
    """Reject linearly dependent components of X (J x N) via SVD.

    Returns (P, j0): the rows of P are the left singular vectors whose
    singular value exceeds s1 * rel_threshold. P @ P.T = I. The second moment
    is deliberately uncentered (the inputs are nonnegative DFT magnitudes).
    """
    x = np.asarray(x, dtype=np.float64)
    j, n = x.shape
    if enforce_min_samples and n < MIN_ICCR_SAMPLES_FACTOR * j:
        raise TrainingError(f"ICCR needs >= {MIN_ICCR_SAMPLES_FACTOR * j} prints, got {n}")
    if n >= j:
        # eigh of the Gram matrix: cheaper than a full SVD for tall data
        gram = x @ x.T
        evals, evecs = scipy.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        svals = np.sqrt(np.clip(evals[order], 0.0, None))
        basis = evecs[:, order].T
    else:
        basis, svals, _ = scipy.linalg.svd(x, full_matrices=False)
        basis = basis.T
    if svals.size == 0 or svals[0] == 0.0:
        raise TrainingError("ICCR input matrix is all-zero")
    j0 = int(np.sum(svals > svals[0] * rel_threshold))
    return _fix_signs(basis[:j0]), j0


# ---------------------------------------------------------------------------
# LDA with cumulative scatter accumulation


class ScatterAccumulator:
    """Running sums for total and between-class covariance.

    Memory stays O(dim^2 + C * dim) however many vectors are accumulated;
    class means (or the class originals, in the variant) are resolved in a
    second pass over the per-class sums at finalize time.
    """

    def __init__(self, dim: int, use_original_centers: bool = False):
        self.dim = dim
        self.use_original_centers = use_original_centers
        self.vector_sum = np.zeros(dim)
        self.outer_sum = np.zeros((dim, dim))
        self.n = 0
        self.class_sums: dict = {}
        self.class_counts: dict = {}
        self.class_originals: dict = {}

    def add(self, x: np.ndarray, class_id, is_original: bool = False) -> None:
        x = np.asarray(x, dtype=np.float64)
        self.vector_sum += x
        self.outer_sum += np.outer(x, x)
        self.n += 1
        if class_id in self.class_sums:
            self.class_sums[class_id] += x
            self.class_counts[class_id] += 1
        else:
            self.class_sums[class_id] = x.copy()
            self.class_counts[class_id] = 1
        if is_original:
            if class_id in self.class_originals:
                raise TrainingError(f"class {class_id!r} has two original records")
            self.class_originals[class_id] = x.copy()

    def add_batch(self, x: np.ndarray, class_ids, is_original) -> None:
        """Vectorized accumulation of columns of x (dim x n)."""
        x = np.asarray(x, dtype=np.float64)
        self.vector_sum += x.sum(axis=1)
        self.outer_sum += x @ x.T
        self.n += x.shape[1]
        for i, cid in enumerate(class_ids):
            col = x[:, i]
            if cid in self.class_sums:
                self.class_sums[cid] += col
                self.class_counts[cid] += 1
            else:
                self.class_sums[cid] = col.copy()
                self.class_counts[cid] = 1
            if is_original[i]:
                if cid in self.class_originals:
                    raise TrainingError(f"class {cid!r} has two original records")
                self.class_originals[cid] = col.copy()

    @property
    def n_classes(self) -> int:
        return len(self.class_sums)

    def finalize(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (T, B, mu): total covariance, between-class covariance, mean."""
        c = self.n_classes
        if c < 2:
            raise TrainingError("need at least 2 classes")
        if self.n < 2:
            raise TrainingError("need at least 2 vectors")
        mu = self.vector_sum / self.n
        t = self.outer_sum / (self.n - 1) - (self.n / (self.n - 1)) * np.outer(mu, mu)
        center_outer = np.zeros((self.dim, self.dim))
        for cid, s in self.class_sums.items():
            if self.use_original_centers:
                if cid not in self.class_originals:
                    raise TrainingError(f"class {cid!r} lacks an original record")
                center = self.class_originals[cid]
            else:
                center = s / self.class_counts[cid]
            center_outer += np.outer(center, center)
        b = center_outer / (c - 1) - (c / (c - 1)) * np.outer(mu, mu)
        t = (t + t.T) / 2.0
        b = (b + b.T) / 2.0
        return t, b, mu


def fit_lda(t: np.ndarray, b: np.ndarray, k: int, n_classes: int, n_samples: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenvectors of T^-1 B, rows ordered by decreasing eigenvalue.

    T gets a shrinkage term 1e-4 * trace(T)/dim when the sample count is
    below 10x the dimension (keeps the generalized eigenproblem well-posed
    at desk scale). Returns (P_lda, eigenvalues).
    """
    dim = t.shape[0]
    if k >= n_classes:
        raise TrainingError(f"LDA needs K < C (K={k}, C={n_classes})")
    if k > dim:
        raise TrainingError(f"K={k} exceeds dimension {dim}")
    t_reg = t
    if n_samples is None or n_samples < 10 * dim:
        t_reg = t + np.eye(dim) * (1e-4 * np.trace(t) / dim)
    try:
        evals, evecs = scipy.linalg.eigh(b, t_reg)
    except scipy.linalg.LinAlgError as exc:
        raise TrainingError(f"total covariance not invertible: {exc}") from exc
    order = np.argsort(evals)[::-1][:k]
    return _fix_signs(evecs[:, order].T), evals[order]


# ---------------------------------------------------------------------------
# FastICA (symmetric updates, cubic nonlinearity)


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    evals, evecs = scipy.linalg.eigh(w @ w.T)
    evals = np.clip(evals, 1e-12 * evals.max(), None)
    return (evecs * (1.0 / np.sqrt(evals))) @ evecs.T @ w


def fit_ica(z: np.ndarray, seed: int = 0, max_iter: int = 500, tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, bool]:
    """Fit Y = P @ X + t with Y centered, unit-variance and independent.

    Symmetric (parallel) fixed-point iteration with the cubic nonlinearity.
    If the rotation does not converge within max_iter, falls back to plain
    whitening (decorrelation without rotation) and reports converged=False.
    """
    z = np.asarray(z, dtype=np.float64)
    dim, n = z.shape
    mean = z.mean(axis=1)
    zc = z - mean[:, None]
    cov = zc @ zc.T / (n - 1)
    evals, evecs = scipy.linalg.eigh(cov)
    evals = np.clip(evals, evals.max() * 1e-12, None)
    whiten = (evecs * (1.0 / np.sqrt(evals))) @ evecs.T
    xw = whiten @ zc
    rng = np.random.default_rng(seed)
    w = _sym_decorrelate(rng.standard_normal((dim, dim)))
    converged = False
    for _ in range(max_iter):
        wx = w @ xw
        w_new = (wx**3) @ xw.T / n - (3.0 * np.mean(wx**2, axis=1))[:, None] * w
        w_new = _sym_decorrelate(w_new)
        delta = np.max(np.abs(np.abs(np.sum(w_new * w, axis=1)) - 1.0))
        w = w_new
        if delta < tol:
            converged = True
            break
    p = _fix_signs(w @ whiten if converged else whiten)
    return p, -p @ mean, converged


# ---------------------------------------------------------------------------
# OMPCA


def build_distributions(x: np.ndarray, class_ids: np.ndarray, is_original: np.ndarray, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Positive/negative difference distributions from transformed prints.

    x holds column vectors already taken through ICCR -> LDA -> ICA. Each
    degraded column yields one positive difference (to its own original) and
    one negative difference (to one uniformly drawn mismatched original).
    """
    x = np.asarray(x, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    is_original = np.asarray(is_original, dtype=bool)
    orig_idx = np.flatnonzero(is_original)
    orig_classes = class_ids[orig_idx]
    uniq, first = np.unique(orig_classes, return_index=True)
    if len(orig_classes) != len(uniq):
        raise TrainingError("a class has more than one original record")
    originals = {cid: x[:, orig_idx[i]] for i, cid in zip(first, uniq)}
    missing = set(class_ids) - set(originals)
    if missing:
        raise TrainingError(f"classes lacking an original record: {sorted(missing)[:5]}")
    rng = np.random.default_rng(seed)
    uniq_list = list(uniq)
    deg_idx = np.flatnonzero(~is_original)
    pos = np.empty((x.shape[0], len(deg_idx)))
    neg = np.empty_like(pos)
    for out_col, n in enumerate(deg_idx):
        cid = class_ids[n]
        pos[:, out_col] = x[:, n] - originals[cid]
        while True:
            other = uniq_list[rng.integers(len(uniq_list))]
            if other != cid:
                break
        neg[:, out_col] = x[:, n] - originals[other]
    return pos, neg


def _householder_with_first_column(g: np.ndarray) -> np.ndarray:
    """Orthogonal matrix whose first column is +-g (g unit-norm)."""
    d = len(g)
    v = g.copy()
    s = 1.0 if g[0] >= 0 else -1.0
    v[0] += s
    h = np.eye(d) - (2.0 / (v @ v)) * np.outer(v, v)
    return h


def fit_ompca(pos: np.ndarray, neg: np.ndarray, k: int = OUT_DIM) -> tuple[np.ndarray, np.ndarray]:
    """Recursive orthogonal discriminant reduction.

    At each step the top generalized eigenvector of (C_pos^-1 C_neg) in the
    current complementary subspace is extracted, extended to an orthogonal
    basis by a Householder reflection, and both distributions plus the
    accumulated basis are projected onto the complement. Returns
    (P (k x J) with orthonormal rows, generalized Rayleigh quotients, which
    are non-increasing).
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    j = pos.shape[0]
    if k > j:
        raise TrainingError(f"cannot extract {k} directions from dimension {j}")
    cur_pos, cur_neg = pos.copy(), neg.copy()
    basis = np.eye(j)
    rows = np.empty((k, j))
    quotients = np.empty(k)
    for step in range(k):
        c_pos = np.atleast_2d(np.cov(cur_pos))
        c_neg = np.atleast_2d(np.cov(cur_neg))
        c_pos = c_pos + np.eye(c_pos.shape[0]) * (1e-8 * np.trace(c_pos) / c_pos.shape[0] + 1e-300)
        evals, evecs = scipy.linalg.eigh(c_neg, c_pos)
        g = evecs[:, -1]
        g = g / np.linalg.norm(g)
        if g[np.argmax(np.abs(g))] < 0:
            g = -g
        quotients[step] = (g @ c_neg @ g) / (g @ c_pos @ g)
        rows[step] = g @ basis
        if step < k - 1:
            comp = _householder_with_first_column(g)[:, 1:]
            cur_pos = comp.T @ cur_pos
            cur_neg = comp.T @ cur_neg
            basis = comp.T @ basis
    return rows, quotients


# ---------------------------------------------------------------------------
# Hadamard transform


def _is_paley_size(k: int) -> bool:
    q = k - 1
    if q < 3 or q % 4 != 3:
        return False
    if q % 2 == 0:
        return q == 2
    f = 3
    while f * f <= q:
        if q % f == 0:
            return False
        f += 2
    return True


def is_valid_hadamard_size(k: int) -> bool:
    if k in (1, 2):
        return True
    if k % 4 != 0:
        return False
    return is_valid_hadamard_size(k // 2) or _is_paley_size(k)


def _paley_int(k: int) -> np.ndarray:
    q = k - 1
    chi = -np.ones(q, dtype=np.int64)
    chi[0] = 0
    squares = np.unique(np.arange(1, q, dtype=np.int64) ** 2 % q)
    chi[squares] = 1
    diff = (np.arange(q)[None, :] - np.arange(q)[:, None]) % q
    jacobsthal = chi[diff]
    h = np.empty((k, k), dtype=np.int64)
    h[0, 0] = 0
    h[0, 1:] = 1
    h[1:, 0] = -1
    h[1:, 1:] = jacobsthal
    h += np.eye(k, dtype=np.int64)
    return h


def _hadamard_int(k: int) -> np.ndarray:
    if k == 1:
        return np.array([[1]], dtype=np.int64)
    if k == 2:
        return np.array([[1, 1], [1, -1]], dtype=np.int64)
    if k % 4 == 0:
        if is_valid_hadamard_size(k // 2):
            return np.kron(_hadamard_int(2), _hadamard_int(k // 2))
        if _is_paley_size(k):
            return _paley_int(k)
    raise ValueError(f"no Hadamard construction for size {k}")


def hadamard_matrix(k: int) -> np.ndarray:
    """Orthogonal matrix with entries +-1/sqrt(k).

    Sylvester doubling where possible, Paley-I (quadratic residues over a
    prime q = k-1, q = 3 mod 4) otherwise; k = 40 comes out as
    H_2 kron H_20 with H_20 from the prime 19.
    """
    h = _hadamard_int(k)
    if not np.array_equal(h @ h.T, k * np.eye(k, dtype=np.int64)):
        raise ValueError(f"Hadamard construction failed orthogonality for size {k}")
    return h / np.sqrt(k)


# ---------------------------------------------------------------------------
# Model container, composition, serialization


@dataclass
class BandChain:
    """Fitted reduction chain of one frequency band."""

    p_iccr: np.ndarray
    p_lda: np.ndarray
    p_ica: np.ndarray
    t_ica: np.ndarray
    p_ompca: np.ndarray
    p_ht: np.ndarray
    j0: int
    p_final: np.ndarray | None = None
    t_final: np.ndarray | None = None
    sigma_e: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)


@dataclass
class ReductionModel:
    bands: list
    in_dim: int = IN_DIM
    out_dim: int = OUT_DIM

    @property
    def n_bands(self) -> int:
        return len(self.bands)


def compose_final(chain: BandChain) -> BandChain:
    """Factorize the five stages into P_final (40 x 1056) and t_final (40)."""
    for name in ("p_iccr", "p_lda", "p_ica", "t_ica", "p_ompca", "p_ht"):
        if getattr(chain, name) is None:
            raise TrainingError(f"stage {name} not fitted")
    mix = chain.p_ht @ chain.p_ompca
    chain.p_final = mix @ chain.p_ica @ chain.p_lda @ chain.p_iccr
    chain.t_final = mix @ chain.t_ica
    return chain


def apply_chain(chain: BandChain, x: np.ndarray) -> np.ndarray:
    """Stage-by-stage application (reference path for the factorized map)."""
    z = chain.p_iccr @ x
    z = chain.p_lda @ z
    z = chain.p_ica @ z + (chain.t_ica if z.ndim == 1 else chain.t_ica[:, None])
    z = chain.p_ompca @ z
    return chain.p_ht @ z


def apply_reduction(x: np.ndarray, model: ReductionModel, band: int) -> np.ndarray:
    """Reduce prints of one band (0-based) with the factorized affine map.

    Accepts a single 1056-vector or a (n, 1056) batch.
    """
    if not 0 <= band < model.n_bands:
        raise ValueError(f"band {band} out of range [0, {model.n_bands})")
    chain = model.bands[band]
    if chain.p_final is None:
        raise TrainingError("model not composed")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return chain.p_final @ x + chain.t_final
    return x @ chain.p_final.T + chain.t_final


# --- serialization ---------------------------------------------------------


def _write_matrix(fh, m: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def _read_matrix(fh, shape) -> np.ndarray:
    n = int(np.prod(shape))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise ValueError("truncated model file")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def save_model(path, model: ReductionModel) -> None:
    """Write the BMRM model file (little-endian, float32 matrices)."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        lda_dim = model.bands[0].p_lda.shape[0]
        fh.write(struct.pack("<HHHHI", MODEL_VERSION, model.n_bands, model.out_dim, lda_dim, model.in_dim))
        for chain in model.bands:
            if chain.p_final is None:
                raise TrainingError("compose the model before saving")
            fh.write(struct.pack("<I", chain.j0))
            for m in (chain.p_iccr, chain.p_lda, chain.p_ica, chain.t_ica, chain.p_ompca, chain.p_ht, chain.p_final, chain.t_final):
                _write_matrix(fh, m)
            meta = dict(chain.metadata)
            if chain.sigma_e is not None:
                meta["sigma_e"] = ",".join(repr(float(v)) for v in chain.sigma_e.astype(np.float32))
            fh.write(struct.pack("<I", len(meta)))
            for key in sorted(meta):
                blob = f"{key}={meta[key]}".encode("utf-8")
                fh.write(struct.pack("<I", len(blob)))
                fh.write(blob)


def load_model(path) -> ReductionModel:
    with open(path, "rb") as fh:
        if fh.read(4) != MODEL_MAGIC:
            raise ValueError(f"{path!r} is not a model file")
        version, n_bands, out_dim, lda_dim, in_dim = struct.unpack("<HHHHI", fh.read(12))
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        bands = []
        for _ in range(n_bands):
            (j0,) = struct.unpack("<I", fh.read(4))
            p_iccr = _read_matrix(fh, (j0, in_dim))
            p_lda = _read_matrix(fh, (lda_dim, j0))
            p_ica = _read_matrix(fh, (lda_dim, lda_dim))
            t_ica = _read_matrix(fh, (lda_dim,))
            p_ompca = _read_matrix(fh, (out_dim, lda_dim))
            p_ht = _read_matrix(fh, (out_dim, out_dim))
            p_final = _read_matrix(fh, (out_dim, in_dim))
            t_final = _read_matrix(fh, (out_dim,))
            (n_meta,) = struct.unpack("<I", fh.read(4))
            meta = {}
            for _ in range(n_meta):
                (ln,) = struct.unpack("<I", fh.read(4))
                key, _, value = fh.read(ln).decode("utf-8").partition("=")
                meta[key] = value
            sigma_e = None
            if "sigma_e" in meta:
                sigma_e = np.array([float(v) for v in meta.pop("sigma_e").split(",")])
            bands.append(
                BandChain(
                    p_iccr=p_iccr,
                    p_lda=p_lda,
                    p_ica=p_ica,
                    t_ica=t_ica,
                    p_ompca=p_ompca,
                    p_ht=p_ht,
                    j0=j0,
                    p_final=p_final,
                    t_final=t_final,
                    sigma_e=sigma_e,
                    metadata=meta,
                )
            )
        return ReductionModel(bands=bands, in_dim=in_dim, out_dim=out_dim)


# ---------------------------------------------------------------------------
# Trainer


def train_band(
    prints: np.ndarray,
    class_ids: np.ndarray,
    is_original: np.ndarray,
    extra_originals: np.ndarray | None = None,
    *,
    lda_dim: int = LDA_DIM,
    out_dim: int = OUT_DIM,
    seed: int = 0,
    use_original_centers: bool = False,
    enforce_min_originals: bool = True,
) -> BandChain:
    """Fit the full chain for one band.

    ``prints`` is (n, in_dim) with class labels; ``extra_originals`` is an
    optional pool of additional unlabeled original-signal prints that only
    feeds the ICCR and ICA fits (those need far more samples than classes).
    """
    prints = np.asarray(prints, dtype=np.float64)
    class_ids = np.asarray(class_ids)
    is_original = np.asarray(is_original, dtype=bool)
    originals = prints[is_original]
    pool = originals if extra_originals is None else np.vstack([originals, extra_originals])
    p_iccr, j0 = fit_iccr(pool.T, enforce_min_samples=enforce_min_originals)
    z_all = prints @ p_iccr.T
    acc = ScatterAccumulator(j0, use_original_centers=use_original_centers)
    acc.add_batch(z_all.T, class_ids, is_original)
    t, b, _ = acc.finalize()
    p_lda, lda_evals = fit_lda(t, b, lda_dim, acc.n_classes, n_samples=acc.n)
    pool_lda = (pool @ p_iccr.T) @ p_lda.T
    p_ica, t_ica, converged = fit_ica(pool_lda.T, seed=seed)
    y_all = (z_all @ p_lda.T) @ p_ica.T + t_ica
    pos, neg = build_distributions(y_all.T, class_ids, is_original, seed=seed + 1)
    p_ompca, quotients = fit_ompca(pos, neg, out_dim)
    chain = BandChain(
        p_iccr=p_iccr,
        p_lda=p_lda,
        p_ica=p_ica,
        t_ica=t_ica,
        p_ompca=p_ompca,
        p_ht=hadamard_matrix(out_dim),
        j0=j0,
        metadata={
            "ica_seed": str(seed),
            "neg_seed": str(seed + 1),
            "ica_converged": str(int(converged)),
            "n_records": str(len(prints)),
            "n_classes": str(acc.n_classes),
            "n_original_pool": str(len(pool)),
            "lda_eig_max": repr(float(lda_evals[0])),
            "rayleigh_first": repr(float(quotients[0])),
            "rayleigh_last": repr(float(quotients[-1])),
        },
    )
    compose_final(chain)
    reduced = apply_reduction(prints, ReductionModel(bands=[chain]), 0)
    orig_rows = {cid: reduced[i] for i, cid in enumerate(class_ids) if is_original[i]}
    residuals = np.array([reduced[i] - orig_rows[cid] for i, cid in enumerate(class_ids) if not is_original[i]])
    sigma = residuals.std(axis=0, ddof=1)
    chain.sigma_e = np.maximum(sigma, 1e-9 * max(float(np.abs(reduced).max()), 1.0))
    return chain


def train_reduction(
    band_records,
    extra_originals_by_band=None,
    *,
    lda_dim: int = LDA_DIM,
    out_dim: int = OUT_DIM,
    seed: int = 0,
    use_original_centers: bool = False,
    enforce_min_originals: bool = True,
) -> ReductionModel:
    """Fit all per-band chains.

    ``band_records`` is a sequence over bands of (prints, class_ids,
    is_original) triples; seeds are derived per band for determinism.
    """
    bands = []
    for b, (prints, class_ids, is_original) in enumerate(band_records):
        extra = None if extra_originals_by_band is None else extra_originals_by_band[b]
        bands.append(
            train_band(
                prints,
                class_ids,
                is_original,
                extra,
                lda_dim=lda_dim,
                out_dim=out_dim,
                seed=seed * 1000 + b,
                use_original_centers=use_original_centers,
                enforce_min_originals=enforce_min_originals,
            )
        )
    return ReductionModel(bands=bands, in_dim=bands[0].p_iccr.shape[1], out_dim=out_dim)
