import unittest

import numpy as np

from pvpASR.errors import ShapeMismatchError, SignalTooShortError
from pvpASR.model import AudioSignal
from pvpASR.psychoacoustics import (FRAME_LENGTH, HOP, bark, bin_frequencies,
                                    masking_penalty, masking_penalty_tensor,
                                    masking_threshold, threshold_in_quiet)
from pvpASR.tensor import Tape, backward


def tone(freq: float, amplitude: float = 0.5, length: int = 4096):
    t = np.arange(length) / 16000
    return AudioSignal(amplitude * np.sin(2 * np.pi * freq * t))


class TestScales(unittest.TestCase):
    def test_bark(self):
        self.assertEqual(float(bark(0.0)), 0.0)
        self.assertAlmostEqual(float(bark(1000.0)), 8.51, places=2)
        z = bark(bin_frequencies())
        self.assertTrue(np.all(np.diff(z) > 0))

    def test_threshold_in_quiet(self):
        freqs = bin_frequencies()
        quiet = threshold_in_quiet(freqs)
        self.assertEqual(quiet.shape, (FRAME_LENGTH // 2 + 1, ))
        self.assertTrue(np.all(np.isfinite(quiet)))
        # most sensitive region of hearing is around 3-4 kHz
        self.assertTrue(3000 < freqs[np.argmin(quiet)] < 4000)
        self.assertEqual(quiet[0], quiet[1])


class TestMaskingThreshold(unittest.TestCase):
    def test_silence_gives_threshold_in_quiet(self):
        theta = masking_threshold(AudioSignal(np.zeros(4096)))
        self.assertEqual(theta.shape, (1 + (4096 - FRAME_LENGTH) // HOP, 257))
        np.testing.assert_allclose(
            theta.threshold_db,
            np.broadcast_to(threshold_in_quiet(bin_frequencies()),
                            theta.shape))

    def test_floor_and_shape(self):
        rng = np.random.default_rng(0)
        x = AudioSignal(rng.normal(0.0, 0.1, 3000).clip(-1, 1))
        theta = masking_threshold(x)
        self.assertEqual(theta.shape[0], 1 + (3000 - FRAME_LENGTH) // HOP)
        quiet = threshold_in_quiet(bin_frequencies())
        self.assertTrue(np.all(theta.threshold_db >= quiet[None, :]))

    def test_tone_masks_around_itself(self):
        theta = masking_threshold(tone(1000.0))
        peak_bins = np.argmax(theta.threshold_db, axis=1)
        # 1 kHz sits on bin 32 of a 512-point frame at 16 kHz
        self.assertTrue(np.all(np.abs(peak_bins - 32) <= 2))
        row = theta.threshold_db[3]
        self.assertGreater(row[32], row[128] + 20.0)

    def test_level_invariant(self):
        rng = np.random.default_rng(1)
        samples = rng.uniform(-0.4, 0.4, 2048)
        loud = masking_threshold(AudioSignal(samples))
        quiet = masking_threshold(AudioSignal(samples * 0.25))
        np.testing.assert_allclose(loud.threshold_db,
                                   quiet.threshold_db,
                                   atol=1e-4)
        self.assertAlmostEqual(loud.max_psd / quiet.max_psd, 16.0, places=4)

    def test_delay_by_one_hop_shifts_one_frame(self):
        carrier = tone(1000.0, length=4096)
        delayed = AudioSignal(
            np.concatenate([np.zeros(HOP, dtype=np.float32),
                            carrier.samples]))
        original = masking_threshold(carrier)
        shifted = masking_threshold(delayed)
        self.assertEqual(shifted.shape[0], original.shape[0] + 1)
        self.assertAlmostEqual(shifted.max_psd / original.max_psd, 1.0,
                               places=9)
        np.testing.assert_allclose(shifted.threshold_db[1:],
                                   original.threshold_db,
                                   rtol=0,
                                   atol=1e-6)

    def test_too_short(self):
        with self.assertRaises(SignalTooShortError):
            masking_threshold(AudioSignal(np.zeros(FRAME_LENGTH - 1)))


class TestMaskingPenalty(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(2)
        self.carrier = AudioSignal(rng.normal(0.0, 0.1, 4096).clip(-1, 1))
        self.rng = rng

    def test_zero_perturbation(self):
        penalty = masking_penalty(self.carrier, np.zeros(4096))
        self.assertEqual(penalty.item(), 0.0)

    def test_masked_perturbation(self):
        delta = self.rng.normal(0.0, 1e-7, 4096)
        self.assertEqual(masking_penalty(self.carrier, delta).item(), 0.0)

    def test_audible_perturbation(self):
        quiet_carrier = tone(440.0, amplitude=0.01)
        delta = self.rng.normal(0.0, 0.2, 4096)
        self.assertGreater(masking_penalty(quiet_carrier, delta).item(), 1.0)

    def test_louder_is_worse(self):
        delta = self.rng.normal(0.0, 0.05, 4096)
        low = masking_penalty(self.carrier, delta).item()
        high = masking_penalty(self.carrier, 4 * delta).item()
        self.assertGreater(high, low)

    def test_carrier_as_perturbation(self):
        # the peak bin of a pure tone sits above its own spread threshold
        x = tone(1000.0)
        self.assertGreater(masking_penalty(x, x.samples).item(), 0.0)

    def test_halving_never_increases(self):
        for scale in (0.01, 0.05, 0.2):
            delta = self.rng.normal(0.0, scale, 4096)
            full = masking_penalty(self.carrier, delta).item()
            half = masking_penalty(self.carrier, 0.5 * delta).item()
            self.assertLessEqual(half, full)

    def test_length_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            masking_penalty(self.carrier, np.zeros(4000))

    def test_gradient(self):
        theta = masking_threshold(self.carrier)
        delta = self.rng.normal(0.0, 0.05, 4096).astype(np.float32)
        tape = Tape()
        node = tape.variable(delta)
        penalty = masking_penalty_tensor(theta, node)
        grad = backward(tape, penalty)[node.node].astype(np.float64)
        self.assertGreater(np.linalg.norm(grad), 0.0)

        def value(d):
            return masking_penalty_tensor(theta, Tape().constant(d)).item()

        noise = self.rng.normal(size=grad.size)
        direction = grad / np.linalg.norm(grad) + noise / np.linalg.norm(noise)
        direction /= np.linalg.norm(direction)
        h = 1e-3
        base = delta.astype(np.float64)
        numeric = (value(base + h * direction) -
                   value(base - h * direction)) / (2 * h)
        analytic = float(grad @ direction)
        self.assertLess(abs(numeric - analytic) / abs(analytic), 2e-2)


if __name__ == "__main__":
    unittest.main()
