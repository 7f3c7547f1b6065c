"""
Synthetic toy-speech corpus, PCM16 WAV I/O and JSON-lines manifests.

Every token is a two-tone chord; an utterance is a sequence of chords
separated by short silences, plus white noise.

Random numbers come from numpy's PCG64 generator
(``np.random.default_rng``). PCG64 is a 128-bit linear congruential
generator with multiplier 0x2360ED051FC65DA44385DF649FCCF645 and an odd
increment taken from the seed, whose state is mixed into 64-bit outputs by
the XSL-RR permutation. Integer seeds are expanded into the initial state and
increment with ``np.random.SeedSequence``; each split uses the entropy
``[seed, split_index]``.
"""
import json
import logging
import sys
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.io import wavfile
from tqdm import tqdm

from pvpASR import BAR_FORMAT
from pvpASR.errors import (ConfigurationError, EmptySplitError,
                           MalformedAudioError, UnsupportedAudioError)
from pvpASR.model import SAMPLE_RATE, AudioSignal

logger = logging.getLogger(__name__)
handler = logging.StreamHandler(sys.stdout)
formatter = logging.Formatter(
    '[%(asctime)s] %(module)s.%(funcName)s %(levelname)s: %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S')
handler.setFormatter(formatter)
logger.addHandler(handler)
logger.setLevel(logging.INFO)

PCM16_SCALE = 32768.0
MAX_SAMPLE = 32767.0 / 32768.0
MANIFEST_NAME = "manifest.jsonl"
TOKEN_AMPLITUDE = 0.25
EDGE_SECONDS = 0.01


class Split(str, Enum):
    TRAIN = "train"
    TEST_CLEAN = "test_clean_analog"
    TEST_OTHER = "test_other_analog"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value) -> "Split":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise ConfigurationError(
                f"Unknown split '{value}'. Expected one of "
                f"{[s.value for s in cls]}.") from None


@dataclass(frozen=True)
class ToyLanguageSpec:
    """
    Acoustic definition of the toy language.

    Attributes:
        vocab_size (int): Number of tokens.
        min_frequency (float): Lowest signature frequency in Hz.
        max_frequency (float): Highest signature frequency in Hz.
        token_duration (float): Seconds of sound per token.
        gap (float): Seconds of silence after each token.
        noise_std (float): Standard deviation of additive white noise.
        min_tokens (int): Shortest utterance.
        max_tokens (int): Longest utterance.
    """
    vocab_size: int = 10
    min_frequency: float = 300.0
    max_frequency: float = 3500.0
    token_duration: float = 0.12
    gap: float = 0.03
    noise_std: float = 0.01
    min_tokens: int = 2
    max_tokens: int = 8

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigurationError("Vocabulary size must be >= 1.")
        if not 0 < self.min_frequency < self.max_frequency < SAMPLE_RATE / 2:
            raise ConfigurationError(
                "Signature frequencies must satisfy 0 < min < max < 8000 Hz.")
        if self.token_duration <= 0 or self.gap < 0 or self.noise_std < 0:
            raise ConfigurationError(
                "Token duration must be positive; gap and noise must be >= 0.")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigurationError(
                "Utterance length bounds must satisfy 1 <= min <= max.")

    @property
    def token_samples(self) -> int:
        return int(round(self.token_duration * SAMPLE_RATE))

    @property
    def gap_samples(self) -> int:
        return int(round(self.gap * SAMPLE_RATE))

    def signatures(self) -> List[Tuple[float, float]]:
        """
        Frequency pair of every token.

        ``n`` log-spaced frequencies are laid out between the bounds, with
        ``n >= 5`` the smallest count giving at least ``vocab_size`` distinct
        pairs; token ``k`` takes the ``k``-th pair in lexicographic order.
        """
        n = 5
        while n * (n - 1) // 2 < self.vocab_size:
            n += 1
        grid = np.geomspace(self.min_frequency, self.max_frequency, n)
        pairs = list(combinations(range(n), 2))[:self.vocab_size]
        return [(float(grid[i]), float(grid[j])) for i, j in pairs]


@dataclass
class Utterance:
    """
    One corpus entry.

    Attributes:
        id (str): Unique identifier, e.g. ``test_clean_analog-00042``.
        audio (AudioSignal): Samples.
        reference (Tuple[int, ...]): Spoken tokens.
        split (Split): Corpus split.
        path (Path): WAV location, if stored on disk.
    """
    id: str
    audio: AudioSignal
    reference: Tuple[int, ...]
    split: Split
    path: Optional[Path] = field(default=None, compare=False)


# --- WAV I/O ---------------------------------------------------------------


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.round(np.asarray(samples, dtype=np.float64) * PCM16_SCALE)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


def write_wav(path, x: AudioSignal) -> None:
    """Write ``x`` as a canonical 16 kHz mono PCM16 RIFF file."""
    wavfile.write(str(path), SAMPLE_RATE, to_pcm16(x.samples))


def read_wav(path) -> AudioSignal:
    """
    Read a 16 kHz mono PCM16 WAV file, scaling samples by 1/32768.

    Raises:
        UnsupportedAudioError: Other sample rate, sample format or channel
            count.
        MalformedAudioError: Unreadable RIFF structure.
    """
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError) as err:
        raise MalformedAudioError(f"Cannot parse WAV file {path}: {err}") from None
    if rate != SAMPLE_RATE:
        raise UnsupportedAudioError(
            f"{path}: sample rate {rate} Hz, only {SAMPLE_RATE} Hz is supported.")
    if data.dtype != np.int16:
        raise UnsupportedAudioError(
            f"{path}: sample format {data.dtype}, only PCM16 is supported.")
    if data.ndim != 1:
        raise UnsupportedAudioError(
            f"{path}: {data.shape[1]} channels, only mono is supported.")
    return AudioSignal(data.astype(np.float32) / np.float32(PCM16_SCALE))


# --- synthesis -------------------------------------------------------------


def _envelope(length: int) -> np.ndarray:
    edge = min(int(EDGE_SECONDS * SAMPLE_RATE), length // 2)
    env = np.ones(length)
    if edge > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
        env[:edge] = ramp
        env[length - edge:] = ramp[::-1]
    return env


def synthesize(tokens: Sequence[int],
               spec: ToyLanguageSpec,
               rng: np.random.Generator,
               noise_std: Optional[float] = None,
               amplitude_jitter: float = 0.0) -> AudioSignal:
    """
    Render a token sequence.

    Each token is its two-tone chord with random phases, raised-cosine edges
    and ``token_duration`` seconds, followed by ``gap`` seconds of silence.

    Args:
        tokens (Sequence[int]): Token ids.
        spec (ToyLanguageSpec): Language definition.
        rng (np.random.Generator): Source of phases, jitter and noise.
        noise_std (float): Noise level; ``spec.noise_std`` if None.
        amplitude_jitter (float): Relative per-token amplitude spread; each
            token is scaled by a uniform draw from [1 - j, 1 + j].

    Returns:
        AudioSignal: ``len(tokens) * (token + gap)`` samples, clipped to
        the PCM16 range.
    """
    signatures = spec.signatures()
    n_tok, n_gap = spec.token_samples, spec.gap_samples
    t = np.arange(n_tok) / SAMPLE_RATE
    env = _envelope(n_tok)
    audio = np.zeros(len(tokens) * (n_tok + n_gap))
    for i, token in enumerate(tokens):
        f1, f2 = signatures[token]
        phases = rng.uniform(0.0, 2 * np.pi, size=2)
        gain = TOKEN_AMPLITUDE
        if amplitude_jitter:
            gain *= rng.uniform(1.0 - amplitude_jitter, 1.0 + amplitude_jitter)
        chord = (np.sin(2 * np.pi * f1 * t + phases[0]) +
                 np.sin(2 * np.pi * f2 * t + phases[1]))
        start = i * (n_tok + n_gap)
        audio[start:start + n_tok] = gain * env * chord
    noise = spec.noise_std if noise_std is None else noise_std
    if noise > 0:
        audio += rng.normal(0.0, noise, size=audio.size)
    return AudioSignal(np.clip(audio, -1.0, MAX_SAMPLE).astype(np.float32))


def generate_split(spec: ToyLanguageSpec, split: Split, count: int,
                   seed: int) -> List[Utterance]:
    """
    Generate one split in memory.

    ``test_other_analog`` triples the noise and jitters every token's
    amplitude by up to 10%.
    """
    split = Split.parse(split)
    index = list(Split).index(split)
    rng = np.random.default_rng([int(seed), index])
    noise, jitter = spec.noise_std, 0.0
    if split is Split.TEST_OTHER:
        noise, jitter = 3.0 * spec.noise_std, 0.1
    utterances = []
    for i in range(count):
        length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = tuple(int(t) for t in rng.integers(0, spec.vocab_size, size=length))
        audio = synthesize(tokens, spec, rng, noise_std=noise,
                           amplitude_jitter=jitter)
        utterances.append(
            Utterance(f"{split.value}-{i:05d}", audio, tokens, split))
    return utterances


def generate_corpus(spec: ToyLanguageSpec, counts: Dict[str, int], seed: int,
                    output_path) -> Path:
    """
    Generate a corpus on disk: one WAV per utterance and a JSON-lines manifest.

    Args:
        spec (ToyLanguageSpec): Language definition.
        counts (Dict[str, int]): Utterances per split name.
        seed (int): Corpus seed; identical seeds give byte-identical files.
        output_path (str): Target directory, created if missing.

    Returns:
        pathlib.Path: Manifest path.

    Raises:
        ConfigurationError: Unknown split or a count below 1.
    """
    output_path = Path(output_path)
    output_path.mkdir(parents=True, exist_ok=True)
    manifest = output_path / MANIFEST_NAME
    parsed = {}
    for name, count in counts.items():
        if int(count) < 1:
            raise ConfigurationError(f"Split {name} needs at least 1 utterance.")
        parsed[Split.parse(name)] = int(count)

    with open(manifest, "w", encoding="utf-8") as handle:
        # fixed split order keeps the manifest independent of dict ordering
        for split in Split:
            if split not in parsed:
                continue
            split_dir = output_path / split.value
            split_dir.mkdir(exist_ok=True)
            utterances = generate_split(spec, split, parsed[split], seed)
            for utt in tqdm(utterances,
                            desc=f"Writing {split.value}",
                            bar_format=BAR_FORMAT):
                wav_path = split_dir / f"{utt.id}.wav"
                write_wav(wav_path, utt.audio)
                record = {
                    "id": utt.id,
                    "path": str(wav_path.relative_to(output_path)),
                    "tokens": list(utt.reference),
                    "split": split.value,
                }
                handle.write(json.dumps(record, sort_keys=True) + "\n")
            logger.info("Generated %i utterances for %s.", len(utterances),
                        split.value)
    return manifest


def load_manifest(manifest,
                  split=None,
                  vocab_size: Optional[int] = None) -> List[Utterance]:
    """
    Load utterances listed in a manifest, optionally one split only.

    Args:
        manifest (str): Manifest file, or the corpus directory holding it.
        split (str): Split to keep; all splits if None.
        vocab_size (int): If given, every token must be below it.

    Returns:
        List[Utterance]: Utterances in manifest order.

    Raises:
        ConfigurationError: Missing manifest or WAV, or a token outside the
            vocabulary.
        EmptySplitError: The requested split has no utterances.
    """
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    if not manifest.exists():
        raise ConfigurationError(f"Manifest {manifest} does not exist.")
    wanted = Split.parse(split) if split is not None else None
    root = manifest.parent
    utterances = []
    with open(manifest, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                utt_split = Split.parse(record["split"])
                tokens = tuple(int(t) for t in record["tokens"])
                path = root / record["path"]
                utt_id = str(record["id"])
            except (KeyError, TypeError, json.JSONDecodeError) as err:
                raise ConfigurationError(
                    f"{manifest}:{line_no}: malformed manifest entry ({err}).") from None
            if wanted is not None and utt_split is not wanted:
                continue
            if vocab_size is not None and any(
                    not 0 <= t < vocab_size for t in tokens):
                raise ConfigurationError(
                    f"{manifest}:{line_no}: token outside vocabulary of size "
                    f"{vocab_size}.")
            if not path.exists():
                raise ConfigurationError(
                    f"{manifest}:{line_no}: audio file {path} does not exist.")
            utterances.append(
                Utterance(utt_id, read_wav(path), tokens, utt_split, path))
    if wanted is not None and not utterances:
        raise EmptySplitError(f"Split {wanted.value} of {manifest} is empty.")
    return utterances
