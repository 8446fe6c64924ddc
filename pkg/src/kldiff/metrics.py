"""Fréchet distance, Inception Score and caption alignment on desk-scale features.

Features come from a fixed, seeded random projection followed by tanh, and
the "classifier" is a nearest-prototype oracle over rendered scenes. Both
are artifact-internal, so metric values only compare runs that share the
extractor seed.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dataio import COLORS, POSITIONS, SHAPES, SIZES, SceneSpec, parse_caption, render_scene


class FeatureExtractor:
    def __init__(self, seed: int = 1234, d_f: int = 64, d_in: int = 3 * 16 * 16):
        rng = np.random.default_rng(seed)
        self.seed, self.d_f = seed, d_f
        self.W = rng.standard_normal((d_in, d_f)) / np.sqrt(d_in)
        self.b = 0.1 * rng.standard_normal(d_f)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return np.tanh(x @ self.W + self.b)


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def stats_from_features(feats: np.ndarray) -> FeatureStats:
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples for a covariance")
    mean = feats.mean(axis=0)
    xc = feats - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return FeatureStats(mean, cov, n)


def feature_stats(images, extractor: FeatureExtractor) -> FeatureStats:
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    return stats_from_features(extractor(images))


def _psd_sqrt(cov: np.ndarray, tol: float) -> np.ndarray:
    w, V = np.linalg.eigh(cov)
    if w.min() < -tol:
        raise ValueError(f"covariance is not PSD (min eigenvalue {w.min():.3g})")
    # round-off eigenvalues of a singular covariance would otherwise leak in as sqrt(eps)
    w = np.where(w > tol * max(1.0, w.max()), w, 0.0)
    return (V * np.sqrt(w)) @ V.T


def frechet_distance(a: FeatureStats, b: FeatureStats, tol: float = 1e-9) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the cross term is the sum of square roots of the eigenvalues
    of the symmetric matrix S_a^(1/2) S_b S_a^(1/2).
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("feature dimensions differ")
    ra = _psd_sqrt(a.cov, tol)
    _psd_sqrt(b.cov, tol)
    m = ra @ b.cov @ ra
    lam = np.linalg.eigvalsh(0.5 * (m + m.T))
    if lam.min() < -tol * max(1.0, abs(lam).max()):
        raise ValueError("cross-covariance product is not PSD")
    lam = np.where(lam > tol * max(1.0, lam.max()), lam, 0.0)
    cross = np.sqrt(lam).sum()
    diff = a.mean - b.mean
    fd = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross
    return float(max(fd, 0.0))


def inception_score(probs: np.ndarray) -> float:
    """exp(mean_i KL(p(y|x_i) || p(y))) with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("rows must be probability vectors")
    # exp(KL_i) = prod_y (p_iy / marginal_y)^p_iy, then a geometric mean over i taken
    # relative to the smallest term; this keeps the one-hot case exact
    n = p.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p > 0, n * p / p.sum(axis=0), 1.0)
    per_image = np.prod(ratio ** p, axis=1)
    ref = per_image.min()
    return float(ref * np.exp(np.mean(np.log(per_image / ref))))


class AttributeOracle:
    """Nearest-prototype classifier over every (shape, colour, position) scene.

    Each class keeps one rendered template per size, so every clean dataset
    image sits at distance zero from its own class.
    """

    def __init__(self, H: int = 16, W: int = 16):
        self.classes = [(s, c, p) for s in SHAPES for c in COLORS for p in POSITIONS]
        self.index = {k: i for i, k in enumerate(self.classes)}
        bank = [[render_scene(SceneSpec(s, c, p, z), H, W).ravel() for z in SIZES]
                for s, c, p in self.classes]
        self.templates = np.asarray(bank)              # (K, n_sizes, D)
        self._sq = (self.templates ** 2).sum(axis=-1)

    def distances(self, images) -> np.ndarray:
        """(n, K) Euclidean distance to the closest template of each class."""
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        xx = (x * x).sum(axis=1)[:, None, None]
        d2 = xx + self._sq[None] - 2.0 * np.einsum("nd,ksd->nks", x, self.templates)
        return np.sqrt(np.clip(d2, 0.0, None)).min(axis=2)

    def classify(self, images) -> list[tuple[str, str, str]]:
        return [self.classes[i] for i in self.distances(images).argmin(axis=1)]

    def probabilities(self, images, temperature: float = 1.0) -> np.ndarray:
        z = -self.distances(images) / temperature
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def match_scores(self, images, captions) -> np.ndarray:
        """Per-image fraction of the three caption attributes the image shows."""
        wanted = [parse_caption(c) for c in captions]
        got = self.classify(images)
        return np.array([sum(a == b for a, b in zip(w, g)) / 3.0 for w, g in zip(wanted, got)])


def alignment_score(images, captions, oracle: AttributeOracle) -> float:
    if len(images) != len(captions):
        raise ValueError("one caption per image required")
    return float(oracle.match_scores(images, captions).mean())


@dataclass
class MetricReport:
    run_id: str
    mode: str
    fid: float
    inception: float
    alignment: float
    n_samples: int
    extractor_seed: int

    HEADER = ("run_id", "mode", "fid", "is", "alignment", "n_samples", "extractor_seed")

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [self.run_id, self.mode, repr(self.fid), repr(self.inception),
             repr(self.alignment), self.n_samples, self.extractor_seed])
        return buf.getvalue()


def evaluate(model, real_images, captions, sched, seed: int, n_gen: int,
             vocab, L: int, gate: float = 1.0, guidance_scale: float = 1.0,
             extractor: FeatureExtractor | None = None,
             oracle: AttributeOracle | None = None,
             run_id: str = "run", mode: str = "full") -> MetricReport:
    """Generate ``n_gen`` images for captions drawn from ``captions`` and score them."""
    from .sampler import sample

    extractor = extractor or FeatureExtractor()
    oracle = oracle or AttributeOracle()
    rng = np.random.default_rng([seed, 1])
    chosen = [captions[i] for i in rng.integers(len(captions), size=n_gen)]
    gen = sample(model, chosen, sched, seed, vocab=vocab, L=L, gate=gate,
                 guidance_scale=guidance_scale)
    fid = frechet_distance(feature_stats(real_images, extractor), feature_stats(gen, extractor))
    return MetricReport(run_id, mode, fid, inception_score(oracle.probabilities(gen)),
                        alignment_score(gen, chosen, oracle), n_gen, extractor.seed)
