"""
Precision-based defences: stochastic precision sampling at inference and
the precision-diversity score with a Gaussian model of benign scores.
"""
import json
import logging
import sys
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from itertools import combinations
from multiprocessing.pool import ThreadPool
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from pvpASR.errors import (CalibrationError, ConfigurationError,
                           NumericalOverflowError)
from pvpASR.metrics import edit_distance
from pvpASR.model import AudioSignal, ModelParams, Transcript, transcribe
from pvpASR.precision import ALL_PRECISIONS, PrecisionMode, parse_precisions

logger = logging.getLogger(__name__)
handler = logging.StreamHandler(sys.stdout)
formatter = logging.Formatter(
    '[%(asctime)s] %(module)s.%(funcName)s %(levelname)s: %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S')
handler.setFormatter(formatter)
logger.addHandler(handler)
logger.setLevel(logging.INFO)

SIGMA_FLOOR = 1e-6
MIN_CALIBRATION = 10
OVERFLOW_SCORE = float("inf")


class ScoreVariant(str, Enum):
    """
    Pairwise transcript dissimilarity.

    ``normalized_edit`` is ``d(a, b) / max(|a|, |b|, 1)`` and symmetric.
    ``wer`` treats the transcript at the earlier precision of the pair as the
    hypothesis and the later one as the reference.
    """
    NORMALIZED_EDIT = "normalized_edit"
    WER = "wer"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value) -> "ScoreVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ConfigurationError(
                f"Unknown score variant '{value}'. Expected one of "
                f"{[v.value for v in cls]}.") from None


class Verdict(str, Enum):
    BENIGN = "benign"
    ADVERSARIAL = "adversarial"

    def __str__(self) -> str:
        return self.value


def _dissimilarity(a: Sequence[int], b: Sequence[int],
                   variant: ScoreVariant) -> Fraction:
    distance = edit_distance(a, b)
    if variant is ScoreVariant.WER:
        return Fraction(distance, max(len(b), 1))
    return Fraction(distance, max(len(a), len(b), 1))


def dissimilarity(a: Sequence[int],
                  b: Sequence[int],
                  variant: ScoreVariant = ScoreVariant.NORMALIZED_EDIT) -> float:
    """Dissimilarity of two transcripts under ``variant``."""
    return float(_dissimilarity(a, b, ScoreVariant.parse(variant)))


@dataclass(frozen=True)
class DiversityScore:
    """
    Precision-diversity score of one input.

    Attributes:
        value (float): Mean pairwise dissimilarity, or ``inf`` if the model
            overflowed at some precision.
        pairs (Dict[Tuple[PrecisionMode, PrecisionMode], float]): Value of
            every pair (p_i, p_j), i < j, in precision-set order.
        transcripts (Dict[PrecisionMode, Tuple[int, ...]]): Transcript per
            precision; None where the forward pass overflowed.
    """
    value: float
    pairs: Dict[Tuple[PrecisionMode, PrecisionMode], float]
    transcripts: Dict[PrecisionMode, Optional[Transcript]] = field(
        default_factory=dict)

    @property
    def overflow(self) -> bool:
        return any(t is None for t in self.transcripts.values())


def score_transcripts(transcripts: Dict[PrecisionMode, Optional[Transcript]],
                      precision_set: Sequence[PrecisionMode],
                      variant: ScoreVariant = ScoreVariant.NORMALIZED_EDIT
                      ) -> DiversityScore:
    """
    Diversity score from transcripts already computed at every precision.

    A missing transcript (None) marks an overflow and yields ``inf``.
    """
    variant = ScoreVariant.parse(variant)
    precision_set = parse_precisions(precision_set)
    if len(precision_set) < 2:
        raise ConfigurationError(
            "Diversity score needs at least two distinct precisions.")
    if any(transcripts[p] is None for p in precision_set):
        return DiversityScore(OVERFLOW_SCORE, {}, dict(transcripts))
    pairs = {}
    total = Fraction(0)
    for p_i, p_j in combinations(precision_set, 2):
        value = _dissimilarity(transcripts[p_i], transcripts[p_j], variant)
        pairs[(p_i, p_j)] = float(value)
        total += value
    n_pairs = len(precision_set) * (len(precision_set) - 1) // 2
    return DiversityScore(float(total / n_pairs), pairs, dict(transcripts))


def _safe_transcribe(args) -> Optional[Transcript]:
    params, x, p = args
    try:
        return transcribe(params, x, p)
    except NumericalOverflowError:
        return None


def diversity_score(params: ModelParams,
                    x: AudioSignal,
                    P: Sequence[PrecisionMode] = ALL_PRECISIONS,
                    variant: ScoreVariant = ScoreVariant.NORMALIZED_EDIT,
                    threads: int = 1) -> DiversityScore:
    """
    Transcribe ``x`` once per precision and average pairwise dissimilarity.

    Args:
        params (ModelParams): Model.
        x (AudioSignal): Input audio.
        P (Sequence[PrecisionMode]): At least two distinct precisions.
        variant (ScoreVariant): Pair dissimilarity.
        threads (int): Transcriptions run in a thread pool if > 1; pairs
            are still combined in the fixed i < j order.

    Returns:
        DiversityScore: Score, per-pair values and transcripts. An overflow at
        any precision gives ``inf`` and is logged.
    """
    P = parse_precisions(P)
    if len(P) < 2:
        raise ConfigurationError(
            "Diversity score needs at least two distinct precisions.")
    jobs = [(params, x, p) for p in P]
    if threads > 1:
        with ThreadPool(min(threads, len(P))) as pool:
            results = pool.map(_safe_transcribe, jobs)
    else:
        results = [_safe_transcribe(job) for job in jobs]
    transcripts = dict(zip(P, results))
    score = score_transcripts(transcripts, P, variant)
    if score.overflow:
        failed = [str(p) for p, t in transcripts.items() if t is None]
        logger.warning("Forward pass overflowed at %s; score set to inf.",
                       ", ".join(failed))
    return score


def draw_precision(rng_seed,
                   precisions: Sequence[PrecisionMode] = ALL_PRECISIONS
                   ) -> PrecisionMode:
    """Draw one precision uniformly with a PCG64 generator seeded by ``rng_seed``."""
    precisions = parse_precisions(precisions)
    rng = np.random.default_rng(rng_seed)
    return precisions[int(rng.integers(len(precisions)))]


def transcribe_random(params: ModelParams,
                      x: AudioSignal,
                      rng_seed,
                      precisions: Sequence[PrecisionMode] = ALL_PRECISIONS
                      ) -> Tuple[Transcript, PrecisionMode]:
    """
    Transcribe at a precision drawn uniformly at random.

    Args:
        params (ModelParams): Model.
        x (AudioSignal): Input audio.
        rng_seed (int or Sequence[int]): Seed of the draw.
        precisions (Sequence[PrecisionMode]): Precisions to draw from.

    Returns:
        Tuple[Tuple[int, ...], PrecisionMode]: Transcript and drawn precision.
    """
    p = draw_precision(rng_seed, precisions)
    return transcribe(params, x, p), p


@dataclass(frozen=True)
class GaussianDetector:
    """
    Gaussian model of benign diversity scores with a one-sided z-test.

    Attributes:
        mu (float): Mean benign score.
        sigma (float): Benign standard deviation, at least 1e-6.
        z_threshold (float): Inputs with z above it are adversarial.
        precision_set (Tuple[PrecisionMode, ...]): Precisions scored.
        calibration_size (int): Number of benign scores fitted.
        score_variant (ScoreVariant): Pair dissimilarity used.

    Example:

        >>> from pvpASR.detector import fit
        >>> det = fit([0.0] * 9 + [0.1])
        >>> det.decide(0.5)[0]
        <Verdict.ADVERSARIAL: 'adversarial'>
    """
    mu: float
    sigma: float
    z_threshold: float = 3.0
    precision_set: Tuple[PrecisionMode, ...] = tuple(ALL_PRECISIONS)
    calibration_size: int = 0
    score_variant: ScoreVariant = ScoreVariant.NORMALIZED_EDIT

    def __post_init__(self):
        object.__setattr__(self, "precision_set",
                           tuple(parse_precisions(self.precision_set)))
        object.__setattr__(self, "score_variant",
                           ScoreVariant.parse(self.score_variant))
        if len(self.precision_set) < 2:
            raise ConfigurationError(
                "Detector needs at least two distinct precisions.")
        if not self.sigma >= SIGMA_FLOOR:
            raise CalibrationError(
                f"Detector sigma must be >= {SIGMA_FLOOR}, got {self.sigma}.")

    def z(self, score: float) -> float:
        if np.isinf(score):
            return float("inf")
        return (score - self.mu) / self.sigma

    def decide(self, score: float) -> Tuple[Verdict, float]:
        """Verdict and z-score for a diversity score."""
        z = self.z(score)
        verdict = Verdict.ADVERSARIAL if z > self.z_threshold else Verdict.BENIGN
        return verdict, z

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "sigma": self.sigma,
            "z_threshold": self.z_threshold,
            "precision_set": [p.value for p in self.precision_set],
            "calibration_size": self.calibration_size,
            "score_variant": self.score_variant.value,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=4, sort_keys=True)

    @classmethod
    def load(cls, path) -> "GaussianDetector":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Detector file {path} does not exist.")
        with open(path, "r", encoding="utf-8") as f:
            try:
                state = json.load(f)
            except json.JSONDecodeError as err:
                raise ConfigurationError(
                    f"Cannot parse detector file {path}: {err}") from None
        expected = {
            "mu", "sigma", "z_threshold", "precision_set", "calibration_size",
            "score_variant"
        }
        if set(state) != expected:
            raise ConfigurationError(
                f"Detector file {path} must hold exactly {sorted(expected)}.")
        return cls(**state)

    def check_precision_set(self, precision_set: Sequence[PrecisionMode]) -> None:
        """
        Raises:
            ConfigurationError: ``precision_set`` differs from the fitted one.
        """
        requested = tuple(parse_precisions(precision_set))
        if requested != self.precision_set:
            raise ConfigurationError(
                f"Detector was fitted on precisions "
                f"{[str(p) for p in self.precision_set]} but evaluation uses "
                f"{[str(p) for p in requested]}.")


def fit(benign_scores: Sequence[float],
        precision_set: Sequence[PrecisionMode] = ALL_PRECISIONS,
        z_threshold: float = 3.0,
        score_variant: Union[str, ScoreVariant] = ScoreVariant.NORMALIZED_EDIT
        ) -> GaussianDetector:
    """
    Fit the benign score distribution.

    Args:
        benign_scores (Sequence[float]): At least 10 finite diversity scores.
        precision_set (Sequence[PrecisionMode]): Precisions the scores used.
        z_threshold (float): Decision threshold on the z-score.
        score_variant (ScoreVariant): Pair dissimilarity the scores used.

    Returns:
        GaussianDetector: ``mu`` is the sample mean, ``sigma`` the sample
        standard deviation (N - 1 denominator) floored at 1e-6.

    Raises:
        CalibrationError: Fewer than 10 scores, or a non-finite score.
    """
    scores = np.asarray(list(benign_scores), dtype=np.float64)
    if scores.size < MIN_CALIBRATION:
        raise CalibrationError(
            f"Detector calibration needs at least {MIN_CALIBRATION} scores, "
            f"got {scores.size}.")
    if not np.all(np.isfinite(scores)):
        raise CalibrationError(
            "Calibration scores must be finite; an input overflowed at some "
            "precision.")
    mu = float(np.mean(scores))
    sigma = max(float(np.std(scores, ddof=1)), SIGMA_FLOOR)
    return GaussianDetector(mu, sigma, z_threshold, tuple(precision_set),
                            int(scores.size), score_variant)


def classify(det: GaussianDetector, params: ModelParams,
             x: AudioSignal) -> Tuple[Verdict, float, float]:
    """
    Score ``x`` over the detector's precisions and apply the z-test.

    Returns:
        Tuple[Verdict, float, float]: Verdict, diversity score and z-score.
        An overflow gives score and z ``inf`` and the adversarial verdict.
    """
    score = diversity_score(params, x, det.precision_set, det.score_variant)
    verdict, z = det.decide(score.value)
    return verdict, score.value, z
