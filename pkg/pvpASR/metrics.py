"""
Transcript and perturbation metrics: WER/SER through a token-level
Levenshtein alignment, segmental SNR and AUROC.
"""
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from pvpASR.errors import ShapeMismatchError, SignalTooShortError

SNR_FLOOR_DB = -10.0
SNR_CEILING_DB = 35.0
SILENT_FRAME_ENERGY = 1e-20


@dataclass(frozen=True)
class EditCounts:
    """
    Result of aligning a hypothesis against a reference.

    Attributes:
        substitutions (int): Reference tokens replaced in the hypothesis.
        deletions (int): Reference tokens missing from the hypothesis.
        insertions (int): Hypothesis tokens with no reference counterpart.
        reference_length (int): Number of reference tokens.
    """
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def levenshtein(hyp: Sequence[int], ref: Sequence[int]) -> EditCounts:
    """
    Align ``hyp`` to ``ref`` with unit-cost edits.

    When several optimal alignments exist, backtracking prefers a diagonal
    step (match or substitution), then a deletion, then an insertion.

    Args:
        hyp (Sequence[int]): Hypothesis tokens.
        ref (Sequence[int]): Reference tokens.

    Returns:
        EditCounts: Edit operations of one minimal alignment.

    Example:

        >>> from pvpASR.metrics import levenshtein
        >>> levenshtein([1, 9, 3], [1, 2, 3])
        EditCounts(substitutions=1, deletions=0, insertions=0, reference_length=3)
    """
    hyp, ref = list(hyp), list(ref)
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j - 1] + cost, dp[i - 1, j] + 1,
                           dp[i, j - 1] + 1)

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if dp[i, j] == dp[i - 1, j - 1] + cost:
                subs += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(subs, dels, ins, n)


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    return levenshtein(a, b).distance


def wer(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Token error rate ``(S + D + I) / max(|ref|, 1)``; may exceed 1."""
    counts = levenshtein(hyp, ref)
    return counts.distance / max(counts.reference_length, 1)


def ser(pairs: Iterable[Tuple[Sequence[int], Sequence[int]]]) -> float:
    """
    Sentence error rate: fraction of (hypothesis, reference) pairs that differ.

    Raises:
        ValueError: ``pairs`` is empty.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("SER needs at least one (hypothesis, reference) pair.")
    wrong = sum(1 for hyp, ref in pairs if list(hyp) != list(ref))
    return wrong / len(pairs)


def corpus_wer(pairs: Iterable[Tuple[Sequence[int], Sequence[int]]]) -> float:
    """
    Corpus-level token error rate: total edits over total reference tokens
    (each reference counted as at least one token).

    Raises:
        ValueError: ``pairs`` is empty.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("WER needs at least one (hypothesis, reference) pair.")
    edits = 0
    tokens = 0
    for hyp, ref in pairs:
        counts = levenshtein(hyp, ref)
        edits += counts.distance
        tokens += max(counts.reference_length, 1)
    return edits / tokens


def snr_seg(x: np.ndarray, delta: np.ndarray, frame: int = 256) -> float:
    """
    Segmental signal-to-perturbation ratio in dB.

    Per full frame the ratio ``10 log10(sum x^2 / sum delta^2)`` is clamped to
    [-10, 35] dB; frames where the perturbation energy is below 1e-20 count
    as 35 dB. The trailing partial frame is dropped.

    Args:
        x (np.ndarray): Carrier samples.
        delta (np.ndarray): Perturbation, same length as ``x``.
        frame (int): Frame length in samples.

    Returns:
        float: Mean clamped ratio over frames.

    Raises:
        ShapeMismatchError: Lengths differ.
        SignalTooShortError: Fewer samples than one frame.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if x.shape != delta.shape:
        raise ShapeMismatchError(
            f"Signal has {x.size} samples, perturbation has {delta.size}.")
    count = x.size // frame
    if count < 1:
        raise SignalTooShortError(
            f"SNRseg needs at least {frame} samples, got {x.size}.")
    x_energy = np.sum(x[:count * frame].reshape(count, frame)**2, axis=1)
    d_energy = np.sum(delta[:count * frame].reshape(count, frame)**2, axis=1)
    silent = d_energy < SILENT_FRAME_ENERGY
    with np.errstate(divide="ignore"):
        ratio = 10.0 * np.log10(x_energy / np.where(silent, 1.0, d_energy))
    ratio = np.clip(ratio, SNR_FLOOR_DB, SNR_CEILING_DB)
    ratio[silent] = SNR_CEILING_DB
    return float(np.mean(ratio))


def auroc(scores_neg: Sequence[float], scores_pos: Sequence[float]) -> float:
    """
    Area under the ROC curve, ``P(pos > neg) + 0.5 P(pos == neg)``.

    Computed from the Mann-Whitney U statistic with mid-ranks, so ties count
    one half and the value is exact up to the final division.

    Args:
        scores_neg (Sequence[float]): Scores of negatives (benign).
        scores_pos (Sequence[float]): Scores of positives (adversarial).
            Infinite scores are allowed.

    Returns:
        float: AUROC in [0, 1].

    Raises:
        ValueError: Either list is empty.
    """
    neg = np.asarray(scores_neg, dtype=np.float64).reshape(-1)
    pos = np.asarray(scores_pos, dtype=np.float64).reshape(-1)
    if neg.size == 0 or pos.size == 0:
        raise ValueError("AUROC needs at least one negative and one positive score.")
    # mid-ranks are multiples of 0.5, doubled to stay integral
    ranks = rankdata(np.concatenate([neg, pos]), method="average")
    doubled = int(round(2 * float(np.sum(ranks[neg.size:]))))
    u_doubled = doubled - pos.size * (pos.size + 1)
    return u_doubled / (2 * neg.size * pos.size)
