"""
Frequency masking model and the differentiable masking penalty.

The threshold follows a simplified MPEG-1 layout: the carrier's power
spectral density is normalised so that its loudest bin sits at 96 dB, every
bin acts as a masker spread over the Bark scale with two slopes, maskers add
in the power domain, and the result is floored by the absolute threshold in
quiet.
"""
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

import numpy as np
from scipy.signal import get_window

from pvpASR.errors import ShapeMismatchError, SignalTooShortError
from pvpASR.model import SAMPLE_RATE, AudioSignal
from pvpASR.tensor import (FP32, Tape, Tensor, add, frames, log, mean, mul,
                           power_spectrum, relu, scale, square, sub)

FRAME_LENGTH = 512
HOP = 256
PSD_REFERENCE_DB = 96.0
POWER_FLOOR = 1e-20
LOWER_SLOPE_DB = 27.0
UPPER_SLOPE_DB = 12.0
# |X|^2 of a Hann-windowed frame, scaled to the power of the windowed signal
_PSD_SCALE = (8.0 / 3.0) / FRAME_LENGTH**2


@dataclass(frozen=True)
class MaskingThreshold:
    """
    Per-frame, per-bin masking threshold of a carrier.

    Attributes:
        threshold_db (np.ndarray): Shape (frames, 257), dB on the 96 dB scale.
        max_psd (float): Largest linear PSD value of the carrier; maps
            perturbation power onto the same dB scale.
        frame_length (int): STFT frame length.
        hop (int): STFT hop.
    """
    threshold_db: np.ndarray
    max_psd: float
    frame_length: int = FRAME_LENGTH
    hop: int = HOP

    @property
    def shape(self):
        return self.threshold_db.shape


def bin_frequencies(frame_length: int = FRAME_LENGTH) -> np.ndarray:
    return np.arange(frame_length // 2 + 1) * SAMPLE_RATE / frame_length


def bark(freqs) -> np.ndarray:
    """Bark scale ``13 atan(0.00076 f) + 3.5 atan((f / 7500)^2)``."""
    f = np.asarray(freqs, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0)**2)


def threshold_in_quiet(freqs) -> np.ndarray:
    """
    Absolute threshold of hearing in dB.

    The DC bin is evaluated at the first bin frequency so that the value
    stays finite.
    """
    f = np.maximum(np.asarray(freqs, dtype=np.float64),
                   SAMPLE_RATE / FRAME_LENGTH) / 1000.0
    return 3.64 * f**-0.8 - 6.5 * np.exp(-0.6 * (f - 3.3)**2) + 1e-3 * f**4


@lru_cache(maxsize=2)
def _spreading_gains(frame_length: int) -> np.ndarray:
    z = bark(bin_frequencies(frame_length))
    dz = z[None, :] - z[:, None]  # [masker, maskee]
    spread = np.where(dz < 0, LOWER_SLOPE_DB * dz, -UPPER_SLOPE_DB * dz)
    offset = -(6.025 + 0.275 * z)[:, None]
    gains = 10.0**((spread + offset) / 10.0)
    gains.flags.writeable = False
    return gains


@lru_cache(maxsize=2)
def _window(frame_length: int) -> np.ndarray:
    window = get_window("hann", frame_length, fftbins=True).astype(np.float32)
    window.flags.writeable = False
    return window


def _framed_power(samples: np.ndarray) -> np.ndarray:
    count = 1 + (samples.size - FRAME_LENGTH) // HOP
    index = np.arange(count)[:, None] * HOP + np.arange(FRAME_LENGTH)[None, :]
    spectrum = np.fft.rfft(samples[index].astype(np.float64) * _window(FRAME_LENGTH),
                           axis=1)
    return _PSD_SCALE * (spectrum.real**2 + spectrum.imag**2)


def masking_threshold(x: AudioSignal) -> MaskingThreshold:
    """
    Masking threshold of the carrier ``x``.

    Args:
        x (AudioSignal): Carrier audio, at least 512 samples.

    Returns:
        MaskingThreshold: Threshold matrix and the carrier's peak PSD.

    Raises:
        SignalTooShortError: Fewer than 512 samples.

    Example:

        >>> import numpy as np
        >>> from pvpASR.model import AudioSignal
        >>> from pvpASR.psychoacoustics import masking_threshold, threshold_in_quiet
        >>> theta = masking_threshold(AudioSignal(np.zeros(4096)))
        >>> bool(np.allclose(theta.threshold_db[0], threshold_in_quiet(np.arange(257) * 31.25)))
        True
    """
    samples = np.asarray(x.samples, dtype=np.float32)
    if samples.size < FRAME_LENGTH:
        raise SignalTooShortError(
            f"Masking threshold needs at least {FRAME_LENGTH} samples, "
            f"got {samples.size}.")
    power = _framed_power(samples)
    quiet = threshold_in_quiet(bin_frequencies())
    max_psd = float(power.max())
    if max_psd < POWER_FLOOR:
        theta = np.broadcast_to(quiet, power.shape).copy()
        return MaskingThreshold(theta, max_psd)

    # normalise so the loudest bin of the carrier is at 96 dB
    with np.errstate(divide="ignore"):
        level = 10.0 * np.log10(power)
    level = np.maximum(level, -200.0) + PSD_REFERENCE_DB - 10.0 * np.log10(max_psd)
    masked = (10.0**(level / 10.0)) @ _spreading_gains(FRAME_LENGTH)
    with np.errstate(divide="ignore"):
        spread_db = 10.0 * np.log10(masked)
    theta = np.maximum(spread_db, quiet[None, :])
    return MaskingThreshold(theta, max_psd)


def perturbation_psd_db(delta: Tensor, threshold: MaskingThreshold) -> Tensor:
    """
    PSD of a perturbation on the carrier's 96 dB scale, differentiable.

    The power is floored at 1e-20 before the dB conversion, so a zero
    perturbation maps to -200 dB.
    """
    tape = delta.tape
    framed = frames(delta, threshold.frame_length, threshold.hop)
    window = tape.constant(
        np.tile(_window(threshold.frame_length), (framed.shape[0], 1)))
    power = power_spectrum(mul(framed, window, FP32), FP32)
    gain = 10.0**(PSD_REFERENCE_DB / 10.0) / max(threshold.max_psd, POWER_FLOOR)
    normalised = scale(power, _PSD_SCALE * gain, FP32)
    floored = add(normalised, tape.constant(np.float32(POWER_FLOOR)), FP32)
    return scale(log(floored, FP32), 10.0 / np.log(10.0), FP32)


def masking_penalty_tensor(threshold: MaskingThreshold, delta: Tensor) -> Tensor:
    """
    Mean squared excess of the perturbation PSD over the threshold.

    The threshold is a constant; gradients flow to ``delta`` only.
    """
    psd = perturbation_psd_db(delta, threshold)
    if psd.shape != threshold.shape:
        raise ShapeMismatchError(
            f"Perturbation gives {psd.shape} spectra, threshold has "
            f"{threshold.shape}.")
    theta = delta.tape.constant(threshold.threshold_db.astype(np.float32))
    return mean(square(relu(sub(psd, theta, FP32), FP32), FP32), FP32)


def masking_penalty(x: AudioSignal, delta: Union[Tensor,
                                                 np.ndarray]) -> Tensor:
    """
    Masking penalty of ``delta`` against the carrier ``x``.

    Args:
        x (AudioSignal): Carrier.
        delta (Tensor or np.ndarray): Perturbation samples. A tensor keeps
            its tape so the penalty can be differentiated.

    Returns:
        Tensor: Scalar binary32 penalty, zero when the perturbation is
        fully masked.

    Raises:
        ShapeMismatchError: Lengths differ.
    """
    if not isinstance(delta, Tensor):
        delta = Tape().constant(np.asarray(delta, dtype=np.float32))
    if delta.shape != x.samples.shape:
        raise ShapeMismatchError(
            f"Perturbation has {delta.shape[0]} samples, carrier has "
            f"{x.samples.size}.")
    return masking_penalty_tensor(masking_threshold(x), delta)
