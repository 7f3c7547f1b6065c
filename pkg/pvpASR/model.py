"""
Toy speech recognizer: log mel filter-bank front-end, a tanh projection, a
unidirectional recurrent layer and a CTC output head, evaluated under a
caller-chosen precision.

Example:

    >>> from pvpASR.model import load_weights, transcribe
    >>> from pvpASR.data_io import read_wav
    >>> params = load_weights("model.pgw")
    >>> transcribe(params, read_wav("utt.wav"), "fp16")
    (3, 1, 4)
"""
import logging
import struct
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import get_window
from tqdm import tqdm

from pvpASR import BAR_FORMAT
from pvpASR.errors import (ConfigurationError, DivergenceError,
                           InfeasibleTargetError, MalformedAudioError,
                           NumericalOverflowError, SignalTooShortError,
                           TrainingError, UnsupportedAudioError,
                           WeightFileError)
from pvpASR.metrics import corpus_wer
from pvpASR.precision import ALL_PRECISIONS, PrecisionMode
from pvpASR.tensor import (FP32, Adam, Tape, Tensor, add, backward, cast,
                           clip_global_norm, frames, log, log_softmax, matmul,
                           mul, power_spectrum, slice_rows, stack_rows, tanh)

logger = logging.getLogger(__name__)
handler = logging.StreamHandler(sys.stdout)
formatter = logging.Formatter(
    '[%(asctime)s] %(module)s.%(funcName)s %(levelname)s: %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S')
handler.setFormatter(formatter)
logger.addHandler(handler)
logger.setLevel(logging.INFO)

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
WEIGHT_MAGIC = b"PGW1"
WEIGHT_VERSION = 2
PARAM_NAMES = ("W_in", "b_in", "W_rec_in", "U_rec", "b_rec", "W_out",
               "b_out")

Transcript = Tuple[int, ...]


@dataclass(frozen=True)
class FrontEndConfig:
    """
    Framing of the log filter-bank front-end.

    Attributes:
        frame_length (int): Samples per analysis frame.
        hop (int): Samples between frame starts.
        num_filters (int): Number of triangular mel filters.
    """
    frame_length: int = 400
    hop: int = 160
    num_filters: int = 40

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_length:
            raise ConfigurationError(
                f"Front-end hop must satisfy 0 < hop <= frame_length, got "
                f"hop={self.hop}, frame_length={self.frame_length}.")
        if self.num_filters < 8:
            raise ConfigurationError(
                f"Front-end needs at least 8 filters, got {self.num_filters}.")

    @property
    def num_bins(self) -> int:
        return self.frame_length // 2 + 1

    def num_frames(self, length: int) -> int:
        if length < self.frame_length:
            return 0
        return 1 + (length - self.frame_length) // self.hop


@dataclass
class AudioSignal:
    """
    Mono 16 kHz audio in [-1, 1].

    Raises:
        UnsupportedAudioError: Sample rate other than 16 kHz.
        MalformedAudioError: Non-finite or out-of-range samples.
    """
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise UnsupportedAudioError(
                f"Only {SAMPLE_RATE} Hz audio is supported, got "
                f"{self.sample_rate} Hz.")
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise MalformedAudioError("Audio contains non-finite samples.")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise MalformedAudioError("Audio samples must lie in [-1, 1].")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class Architecture:
    num_filters: int = 40
    hidden: int = 64
    vocab_size: int = 10

    @property
    def blank(self) -> int:
        return self.vocab_size

    @property
    def num_classes(self) -> int:
        return self.vocab_size + 1

    def shapes(self) -> Dict[str, Tuple[int, int]]:
        F, H, C = self.num_filters, self.hidden, self.num_classes
        return {
            "W_in": (F, H),
            "b_in": (1, H),
            "W_rec_in": (H, H),
            "U_rec": (H, H),
            "b_rec": (1, H),
            "W_out": (H, C),
            "b_out": (1, C),
        }


@dataclass
class ModelParams:
    """
    Trained network weights, stored in binary32.

    Attributes:
        arch (Architecture): Layer sizes; blank id is ``arch.vocab_size``.
        weights (Dict[str, np.ndarray]): Tensors keyed by ``PARAM_NAMES``.
        frontend (FrontEndConfig): Front-end the weights were trained with.
    """
    arch: Architecture
    weights: Dict[str, np.ndarray]
    frontend: FrontEndConfig = field(default_factory=FrontEndConfig)

    def __post_init__(self):
        expected = self.arch.shapes()
        if set(self.weights) != set(expected):
            raise WeightFileError(
                f"Expected tensors {sorted(expected)}, got {sorted(self.weights)}.")
        for name, shape in expected.items():
            w = np.asarray(self.weights[name], dtype=np.float32)
            if w.shape != shape:
                raise WeightFileError(
                    f"Tensor {name} has shape {w.shape}, expected {shape}.")
            if not np.all(np.isfinite(w)):
                raise WeightFileError(f"Tensor {name} has non-finite values.")
            self.weights[name] = w
        if self.frontend.num_filters != self.arch.num_filters:
            raise ConfigurationError(
                f"Front-end has {self.frontend.num_filters} filters but the "
                f"network expects {self.arch.num_filters}.")


# --- front-end -------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0**(np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def filter_centers(cfg: FrontEndConfig) -> np.ndarray:
    """Center frequencies (Hz) of the mel filters, ascending."""
    edges = _mel_to_hz(
        np.linspace(0.0, _hz_to_mel(SAMPLE_RATE / 2), cfg.num_filters + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(frame_length: int, num_filters: int) -> np.ndarray:
    """
    Triangular filters on a mel-spaced grid from 0 Hz to Nyquist.

    Each filter rises linearly from its lower edge to 1 at its center and
    falls back to 0 at its upper edge, evaluated at the DFT bin frequencies.

    Returns:
        np.ndarray: Shape (frame_length // 2 + 1, num_filters), binary32.
    """
    edges = _mel_to_hz(
        np.linspace(0.0, _hz_to_mel(SAMPLE_RATE / 2), num_filters + 2))
    freqs = np.arange(frame_length // 2 + 1) * SAMPLE_RATE / frame_length
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (freqs[:, None] - lower) / (center - lower)
    falling = (upper - freqs[:, None]) / (upper - center)
    bank = np.clip(np.minimum(rising, falling), 0.0, None).astype(np.float32)
    bank.flags.writeable = False
    return bank


@lru_cache(maxsize=8)
def _hann(frame_length: int) -> np.ndarray:
    window = get_window("hann", frame_length, fftbins=True).astype(np.float32)
    window.flags.writeable = False
    return window


def features_tensor(signal: Tensor, cfg: FrontEndConfig,
                    p: PrecisionMode) -> Tensor:
    """
    Log filter-bank energies of a signal tensor, differentiable in the samples.

    Computed in binary32 and cast to ``p`` at the end.

    Raises:
        SignalTooShortError: Shorter than one frame.
    """
    length = signal.shape[0]
    count = cfg.num_frames(length)
    if count < 1:
        raise SignalTooShortError(
            f"Signal of {length} samples is shorter than one frame "
            f"({cfg.frame_length} samples).")
    tape = signal.tape
    framed = frames(signal, cfg.frame_length, cfg.hop)
    window = tape.constant(np.tile(_hann(cfg.frame_length), (count, 1)))
    power = power_spectrum(mul(framed, window, FP32), FP32)
    bank = tape.constant(mel_filterbank(cfg.frame_length, cfg.num_filters))
    energy = matmul(power, bank, FP32)
    floor = tape.constant(np.float32(LOG_FLOOR))
    return cast(log(add(energy, floor, FP32), FP32), p)


def features(x: AudioSignal,
             cfg: FrontEndConfig = FrontEndConfig(),
             p: PrecisionMode = FP32) -> Tensor:
    """
    Log filter-bank energies of ``x``.

    Args:
        x (AudioSignal): Input audio.
        cfg (FrontEndConfig): Framing.
        p (PrecisionMode): Format of the returned tensor.

    Returns:
        Tensor: Shape (frames, num_filters).

    Example:

        >>> import numpy as np
        >>> from pvpASR.model import AudioSignal, features
        >>> features(AudioSignal(np.zeros(16000))).shape
        (98, 40)
    """
    tape = Tape()
    return features_tensor(tape.constant(x.samples), cfg,
                           PrecisionMode.parse(p))


# --- network ---------------------------------------------------------------


def forward_tensor(params: ModelParams,
                   signal: Tensor,
                   p: PrecisionMode,
                   weights: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """
    Frame log-probabilities for a signal tensor, recorded on its tape.

    Args:
        params (ModelParams): Network weights.
        signal (Tensor): binary32 samples, possibly differentiable.
        p (PrecisionMode): Evaluation precision of every network operation.
        weights (Dict[str, Tensor]): Weight tensors already on the tape (used
            by training). Constants rounded to ``p`` are created otherwise.

    Returns:
        Tensor: Shape (frames, vocab_size + 1), format ``p``.

    Raises:
        NumericalOverflowError: The output contains Inf or NaN.
    """
    p = PrecisionMode.parse(p)
    tape = signal.tape
    if weights is None:
        w = {name: tape.constant(params.weights[name], p) for name in PARAM_NAMES}
    else:
        w = {
            name: t if t.fmt is p else cast(t, p)
            for name, t in weights.items()
        }

    feats = features_tensor(signal, params.frontend, p)
    count = feats.shape[0]
    ones = tape.constant(np.ones((count, 1), dtype=np.float32), p)

    projected = tanh(
        add(matmul(feats, w["W_in"], p), matmul(ones, w["b_in"], p), p), p)
    drive = add(matmul(projected, w["W_rec_in"], p),
                matmul(ones, w["b_rec"], p), p)
    hidden = []
    h = tanh(slice_rows(drive, 0, 1), p)
    hidden.append(h)
    for t in range(1, count):
        h = tanh(add(slice_rows(drive, t, t + 1), matmul(h, w["U_rec"], p), p),
                 p)
        hidden.append(h)
    states = stack_rows(hidden)
    logits = add(matmul(states, w["W_out"], p), matmul(ones, w["b_out"], p),
                 p)
    out = log_softmax(logits, 1, p)
    if not np.all(np.isfinite(out.data)):
        raise NumericalOverflowError(
            f"Forward pass at {p} produced non-finite log-probabilities.",
            precision=p)
    return out


def forward(params: ModelParams, x: AudioSignal, p: PrecisionMode) -> Tensor:
    """
    Log-probabilities of ``x`` under precision ``p``.

    Returns:
        Tensor: Shape (frames, vocab_size + 1); rows are log-distributions
        over the vocabulary plus blank.

    Raises:
        NumericalOverflowError: Some output is Inf or NaN.
    """
    tape = Tape()
    return forward_tensor(params, tape.constant(x.samples), p)


# --- CTC -------------------------------------------------------------------


def check_target(target: Sequence[int], frames_count: int,
                 vocab_size: int) -> List[int]:
    target = [int(t) for t in target]
    for token in target:
        if not 0 <= token < vocab_size:
            raise InfeasibleTargetError(
                f"Target token {token} is outside the vocabulary "
                f"[0, {vocab_size}).")
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    if frames_count < len(target) + repeats:
        raise InfeasibleTargetError(
            f"Target of {len(target)} tokens ({repeats} repeats) needs at "
            f"least {len(target) + repeats} frames, got {frames_count}.")
    return target


def is_feasible(target: Sequence[int], frames_count: int) -> bool:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return frames_count >= len(target) + repeats


def _ctc_tables(lp: np.ndarray, target: List[int], blank: int):
    T = lp.shape[0]
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    S = ext.size
    # skip transition s-2 -> s is allowed into non-blank states whose label
    # differs from the one two positions back
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = lp[:, ext]

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc

    final = alpha[T - 1, S - 1]
    if S > 1:
        final = np.logaddexp(final, alpha[T - 1, S - 2])
    return ext, alpha, beta, final


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """
    Connectionist temporal classification loss ``-log p(target | log_probs)``.

    Forward and backward variables are computed in log space in float64,
    whatever the format of ``log_probs``; the loss is a binary32 scalar on
    the tape of ``log_probs``.

    Args:
        log_probs (Tensor): Shape (T, V + 1); the last class is blank.
        target (Sequence[int]): Tokens in [0, V).

    Returns:
        Tensor: Scalar loss.

    Raises:
        InfeasibleTargetError: Token outside the vocabulary, or fewer frames
            than the target needs.
    """
    lp = np.asarray(log_probs.data, dtype=np.float64)
    T, classes = lp.shape
    blank = classes - 1
    target = check_target(target, T, blank)
    ext, alpha, beta, final = _ctc_tables(lp, target, blank)
    loss = np.float32(-final)

    def _backward(g):
        occupancy = np.exp(alpha + beta - final)
        grad = np.zeros((T, classes), dtype=np.float64)
        for s, label in enumerate(ext):
            grad[:, label] -= occupancy[:, s]
        return ((float(g) * grad).astype(np.float32), )

    tape = log_probs.tape if log_probs.tape is not None else Tape()
    return tape.record(np.asarray(loss, dtype=np.float32), FP32, [log_probs],
                       _backward)


# --- decoding --------------------------------------------------------------


def greedy_decode(log_probs) -> Transcript:
    """
    Best-path decoding: per-frame argmax (lowest id on ties), collapse
    repeats, drop blanks.

    Args:
        log_probs (Tensor or np.ndarray): Shape (T, V + 1).

    Returns:
        Tuple[int, ...]: Decoded tokens.
    """
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(
        log_probs)
    if data.shape[0] == 0:
        return ()
    blank = data.shape[1] - 1
    best = np.argmax(data, axis=1)
    keep = np.ones(best.size, dtype=bool)
    keep[1:] = best[1:] != best[:-1]
    return tuple(int(t) for t in best[keep] if t != blank)


def transcribe(params: ModelParams, x: AudioSignal,
               p: PrecisionMode) -> Transcript:
    """
    Decode ``x`` with the network evaluated at precision ``p``.

    Raises:
        NumericalOverflowError: Forward pass overflowed at ``p``.
    """
    return greedy_decode(forward(params, x, p))


# --- training --------------------------------------------------------------


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    hidden: int = 64
    clip_norm: float = 5.0
    target_token_error: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ConfigurationError(
                "Training epochs, batch size and hidden size must be >= 1.")
        if self.learning_rate <= 0:
            raise ConfigurationError("Learning rate must be positive.")


def init_params(dataset: Sequence[Tuple[AudioSignal, Sequence[int]]],
                vocab_size: int,
                frontend: FrontEndConfig,
                hidden: int,
                rng: np.random.Generator) -> ModelParams:
    """
    Random initialisation with the input layer whitened by feature statistics.

    ``W_in`` rows are divided by the per-filter standard deviation and
    ``b_in`` removes the mean, so the first layer sees standardised inputs.
    """
    arch = Architecture(frontend.num_filters, hidden, vocab_size)
    sample = [features(x, frontend).data for x, _ in dataset[:256]]
    stacked = np.concatenate(sample, axis=0).astype(np.float64)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-3)

    F, H, C = arch.num_filters, arch.hidden, arch.num_classes
    w_in = rng.normal(0.0, 1.0 / np.sqrt(F), size=(F, H)) / std[:, None]
    weights = {
        "W_in": w_in,
        "b_in": -(mean @ w_in)[None, :],
        "W_rec_in": rng.normal(0.0, 1.0 / np.sqrt(H), size=(H, H)),
        "U_rec": rng.normal(0.0, 0.5 / np.sqrt(H), size=(H, H)),
        "b_rec": np.zeros((1, H)),
        "W_out": rng.normal(0.0, 1.0 / np.sqrt(H), size=(H, C)),
        "b_out": np.zeros((1, C)),
    }
    weights = {k: v.astype(np.float32) for k, v in weights.items()}
    return ModelParams(arch, weights, frontend)


def loss_and_grads(params: ModelParams, x: AudioSignal,
                   target: Sequence[int]) -> Tuple[float, Dict[str, np.ndarray]]:
    """CTC loss of one utterance at FP32 and its gradient for every weight."""
    tape = Tape()
    weights = {name: tape.variable(params.weights[name]) for name in PARAM_NAMES}
    log_probs = forward_tensor(params, tape.constant(x.samples), FP32, weights)
    loss = ctc_loss(log_probs, target)
    grads = backward(tape, loss)
    return loss.item(), {name: grads[t.node] for name, t in weights.items()}


def token_error(params: ModelParams,
                dataset: Sequence[Tuple[AudioSignal, Sequence[int]]],
                p: PrecisionMode = FP32) -> float:
    """Corpus token error rate of greedy transcripts at precision ``p``."""
    pairs = [(transcribe(params, x, p), tuple(y)) for x, y in dataset]
    return corpus_wer(pairs)


def train(dataset: Sequence[Tuple[AudioSignal, Sequence[int]]],
          hyperparams: TrainingConfig = TrainingConfig(),
          vocab_size: int = 10,
          frontend: FrontEndConfig = FrontEndConfig(),
          validation: Optional[Sequence[Tuple[AudioSignal,
                                              Sequence[int]]]] = None,
          init: Optional[ModelParams] = None) -> ModelParams:
    """
    Fit the network with mini-batch Adam on the mean CTC loss, in FP32.

    Args:
        dataset (Sequence[Tuple[AudioSignal, Sequence[int]]]): Training pairs.
        hyperparams (TrainingConfig): Optimiser and schedule settings.
        vocab_size (int): Number of non-blank tokens.
        frontend (FrontEndConfig): Front-end framing.
        validation (Sequence): Held-out pairs. When given, the token error
            rate at every precision is logged and the FP32 rate must reach
            ``hyperparams.target_token_error``.
        init (ModelParams): Starting point instead of a fresh initialisation.

    Returns:
        ModelParams: Trained weights.

    Raises:
        ValueError: Empty dataset.
        DivergenceError: Loss became NaN or infinite.
        TrainingError: Held-out token error above the target. The exception
            carries the trained parameters.
    """
    if len(dataset) == 0:
        raise ValueError("Training set is empty.")
    rng = np.random.default_rng(hyperparams.seed)
    params = init if init is not None else init_params(
        dataset, vocab_size, frontend, hyperparams.hidden, rng)
    optimizer = Adam(hyperparams.learning_rate, hyperparams.beta1,
                     hyperparams.beta2, hyperparams.eps)

    n = len(dataset)
    batch = hyperparams.batch_size
    for epoch in tqdm(range(1, hyperparams.epochs + 1),
                      desc="Training",
                      bar_format=BAR_FORMAT):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            total = {
                name: np.zeros_like(w)
                for name, w in params.weights.items()
            }
            batch_loss = 0.0
            for i in idx:
                x, y = dataset[i]
                loss, grads = loss_and_grads(params, x, y)
                if not np.isfinite(loss):
                    raise DivergenceError(epoch)
                batch_loss += loss
                for name, g in grads.items():
                    total[name] += g
            scale = np.float32(1.0 / len(idx))
            total = {name: g * scale for name, g in total.items()}
            clip_global_norm(total, hyperparams.clip_norm)
            optimizer.step(params.weights, total)
            epoch_loss += batch_loss
        mean_loss = epoch_loss / n
        if not np.isfinite(mean_loss):
            raise DivergenceError(epoch)
        logger.debug("Epoch %i mean CTC loss %.4f", epoch, mean_loss)

    logger.info("Training finished; final mean CTC loss %.4f.", mean_loss)
    if validation:
        rates = {p: token_error(params, validation, p) for p in ALL_PRECISIONS}
        for p, rate in rates.items():
            logger.info("Held-out token error at %s: %.4f", p, rate)
        reached = rates[FP32]
        if reached > hyperparams.target_token_error:
            logger.warning(
                "Held-out token error %.4f above target %.4f.", reached,
                hyperparams.target_token_error)
            raise TrainingError(
                f"Held-out token error {reached:.4f} is above the target "
                f"{hyperparams.target_token_error:.4f}.",
                params=params,
                token_error=reached)
    return params


# --- weight file -----------------------------------------------------------


def save_weights(params: ModelParams, path) -> None:
    """
    Write ``params`` as a PGW1 file.

    Layout (little-endian): magic ``PGW1``, version u32, front-end
    frame_length u32 and hop u32, tensor count u32, then per tensor its rank
    u32 and dimensions u32, then the raw binary32 data of every tensor in the
    same order.
    """
    names = PARAM_NAMES
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(
            struct.pack("<IIII", WEIGHT_VERSION, params.frontend.frame_length,
                        params.frontend.hop, len(names)))
        for name in names:
            shape = params.weights[name].shape
            f.write(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        for name in names:
            f.write(params.weights[name].astype("<f4").tobytes())


def load_weights(path,
                 vocab_size: Optional[int] = None,
                 frontend: Optional[FrontEndConfig] = None) -> ModelParams:
    """
    Read a PGW1 weight file.

    Args:
        path (str): File written by :func:`save_weights`.
        vocab_size (int): Expected vocabulary size, checked if given.
        frontend (FrontEndConfig): Expected front-end, checked against the
            framing and filter count stored in the file. The stored one is
            used if None.

    Raises:
        WeightFileError: Bad magic, version, descriptor or truncated data,
            or a front-end other than the one the weights were trained with.
    """
    path = Path(path)
    if not path.exists():
        raise WeightFileError(f"Weight file {path} does not exist.")
    blob = path.read_bytes()
    if blob[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path} is not a PGW1 weight file.")
    try:
        version, frame_length, hop, count = struct.unpack_from(
            "<IIII", blob, 4)
        if version != WEIGHT_VERSION:
            raise WeightFileError(f"Unsupported weight file version {version}.")
        if count != len(PARAM_NAMES):
            raise WeightFileError(
                f"Expected {len(PARAM_NAMES)} tensors, file has {count}.")
        offset = 20
        shapes = []
        for _ in range(count):
            (rank, ) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shapes.append(struct.unpack_from(f"<{rank}I", blob, offset))
            offset += 4 * rank
    except struct.error as err:
        raise WeightFileError(f"Truncated descriptor in {path}: {err}") from None

    weights = {}
    for name, shape in zip(PARAM_NAMES, shapes):
        size = int(np.prod(shape))
        end = offset + 4 * size
        if end > len(blob):
            raise WeightFileError(f"Truncated tensor data in {path}.")
        weights[name] = np.frombuffer(blob[offset:end],
                                      dtype="<f4").astype(np.float32).reshape(shape)
        offset = end
    if offset != len(blob):
        raise WeightFileError(f"Trailing bytes after tensor data in {path}.")

    num_filters, hidden = shapes[0]
    arch = Architecture(num_filters, hidden, shapes[5][1] - 1)
    if vocab_size is not None and arch.vocab_size != vocab_size:
        raise WeightFileError(
            f"Weights have vocabulary {arch.vocab_size}, expected {vocab_size}.")
    try:
        stored = FrontEndConfig(frame_length, hop, num_filters)
    except ConfigurationError as err:
        raise WeightFileError(f"Bad front-end in {path}: {err}") from None
    if frontend is None:
        frontend = stored
    elif frontend != stored:
        raise WeightFileError(
            f"Weights were trained with frame_length={stored.frame_length}, "
            f"hop={stored.hop}, num_filters={stored.num_filters}; got "
            f"frame_length={frontend.frame_length}, hop={frontend.hop}, "
            f"num_filters={frontend.num_filters}.")
    return ModelParams(arch, weights, frontend)
