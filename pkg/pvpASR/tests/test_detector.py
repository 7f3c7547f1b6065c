import json
import unittest
from collections import Counter
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np

from pvpASR.detector import (MIN_CALIBRATION, SIGMA_FLOOR, GaussianDetector,
                             ScoreVariant, Verdict, classify, dissimilarity,
                             diversity_score, draw_precision, fit,
                             score_transcripts, transcribe_random)
from pvpASR.errors import CalibrationError, ConfigurationError
from pvpASR.model import AudioSignal, FrontEndConfig, init_params, transcribe
from pvpASR.precision import ALL_PRECISIONS, PrecisionMode

FP32, FP16, BF16 = PrecisionMode.FP32, PrecisionMode.FP16, PrecisionMode.BF16


def small_model(seed: int = 0):
    rng = np.random.default_rng(seed)
    noise = AudioSignal(rng.uniform(-0.2, 0.2, 3200))
    return init_params([(noise, ())], 4, FrontEndConfig(num_filters=16), 8,
                       rng)


class TestDissimilarity(unittest.TestCase):
    def test_normalized_edit(self):
        self.assertEqual(dissimilarity([1, 2, 3], [1, 2, 3]), 0.0)
        self.assertEqual(dissimilarity([1, 2], [1, 3]), 0.5)
        self.assertEqual(dissimilarity([], []), 0.0)
        self.assertEqual(dissimilarity([], [1, 2]), 1.0)
        self.assertEqual(dissimilarity([1], [1, 2, 3]),
                         dissimilarity([1, 2, 3], [1]))

    def test_wer_variant(self):
        self.assertAlmostEqual(dissimilarity([1], [1, 2, 3], "wer"), 2 / 3)
        self.assertEqual(dissimilarity([1, 2, 3], [1], "wer"), 2.0)
        with self.assertRaises(ConfigurationError):
            dissimilarity([1], [1], "cosine")


class TestScoreTranscripts(unittest.TestCase):
    def test_mean_of_pairs(self):
        transcripts = {FP32: (1, 2, 3), FP16: (1, 2, 3), BF16: (1, 9, 3)}
        score = score_transcripts(transcripts, ALL_PRECISIONS)
        self.assertAlmostEqual(score.value, 2 / 9)
        self.assertEqual(score.pairs[(FP32, FP16)], 0.0)
        self.assertAlmostEqual(score.pairs[(FP16, BF16)], 1 / 3)
        self.assertFalse(score.overflow)

    def test_agreement_is_zero(self):
        transcripts = {p: (4, 4) for p in ALL_PRECISIONS}
        self.assertEqual(score_transcripts(transcripts, ALL_PRECISIONS).value,
                         0.0)

    def test_overflow(self):
        transcripts = {FP32: (1, ), FP16: None, BF16: (1, )}
        score = score_transcripts(transcripts, ALL_PRECISIONS)
        self.assertEqual(score.value, float("inf"))
        self.assertTrue(score.overflow)
        # the overflowed precision is outside this subset
        subset = score_transcripts(transcripts, [FP32, BF16])
        self.assertEqual(subset.value, 0.0)

    def test_needs_two_precisions(self):
        with self.assertRaises(ConfigurationError):
            score_transcripts({FP32: (1, )}, [FP32])


class TestModelScores(unittest.TestCase):
    def setUp(self):
        self.params = small_model()
        rng = np.random.default_rng(9)
        self.x = AudioSignal(rng.uniform(-0.3, 0.3, 4000))

    def test_matches_transcripts(self):
        score = diversity_score(self.params, self.x)
        expected = score_transcripts(
            {p: transcribe(self.params, self.x, p)
             for p in ALL_PRECISIONS}, ALL_PRECISIONS)
        self.assertEqual(score.value, expected.value)
        self.assertGreaterEqual(score.value, 0.0)

    def test_threads_do_not_change_score(self):
        one = diversity_score(self.params, self.x, threads=1)
        three = diversity_score(self.params, self.x, threads=3)
        self.assertEqual(one.value, three.value)
        self.assertEqual(one.pairs, three.pairs)

    def test_random_transcription(self):
        transcript, p = transcribe_random(self.params, self.x, [0, 3, 1])
        self.assertIs(p, draw_precision([0, 3, 1]))
        self.assertEqual(transcript, transcribe(self.params, self.x, p))

    def test_classify(self):
        det = fit([0.0] * 9 + [0.1])
        verdict, score, z = classify(det, self.params, self.x)
        self.assertEqual(verdict, det.decide(score)[0])
        self.assertEqual(z, det.z(score))


class TestDrawPrecision(unittest.TestCase):
    def test_deterministic(self):
        for seed in range(20):
            self.assertIs(draw_precision([seed, 2, 0]),
                          draw_precision([seed, 2, 0]))

    def test_roughly_uniform(self):
        counts = Counter(draw_precision([7, 1, i]) for i in range(3000))
        self.assertEqual(set(counts), set(ALL_PRECISIONS))
        for count in counts.values():
            self.assertTrue(850 < count < 1150)

    def test_subset(self):
        for i in range(50):
            self.assertIn(draw_precision(i, [FP16, BF16]), (FP16, BF16))


class TestGaussianDetector(unittest.TestCase):
    def test_fit(self):
        scores = [0.0] * 9 + [0.1]
        det = fit(scores)
        self.assertAlmostEqual(det.mu, 0.01)
        self.assertAlmostEqual(det.sigma, float(np.std(scores, ddof=1)))
        self.assertEqual(det.calibration_size, 10)
        verdict, z = det.decide(0.5)
        self.assertIs(verdict, Verdict.ADVERSARIAL)
        self.assertGreater(z, det.z_threshold)
        self.assertIs(det.decide(0.0)[0], Verdict.BENIGN)

    def test_constant_scores_floor_sigma(self):
        det = fit([0.2] * MIN_CALIBRATION)
        self.assertEqual(det.sigma, SIGMA_FLOOR)
        self.assertIs(det.decide(0.2)[0], Verdict.BENIGN)
        self.assertIs(det.decide(0.21)[0], Verdict.ADVERSARIAL)

    def test_overflow_is_adversarial(self):
        det = fit(np.linspace(0, 1, 20))
        verdict, z = det.decide(float("inf"))
        self.assertIs(verdict, Verdict.ADVERSARIAL)
        self.assertEqual(z, float("inf"))

    def test_fit_errors(self):
        with self.assertRaises(CalibrationError):
            fit([0.0] * (MIN_CALIBRATION - 1))
        with self.assertRaises(CalibrationError):
            fit([0.0] * 10 + [float("inf")])
        with self.assertRaises(CalibrationError):
            GaussianDetector(0.0, 0.0)
        with self.assertRaises(ConfigurationError):
            GaussianDetector(0.0, 1.0, precision_set=(FP32, ))

    def test_save_load(self):
        det = fit(np.linspace(0, 0.3, 12), [FP32, BF16], 2.5,
                  ScoreVariant.WER)
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / "detector.json"
            det.save(path)
            loaded = GaussianDetector.load(path)
            self.assertEqual(loaded, det)
            self.assertEqual(loaded.precision_set, (FP32, BF16))

            with open(path, "w") as f:
                json.dump({"mu": 0.0}, f)
            with self.assertRaises(ConfigurationError):
                GaussianDetector.load(path)
            path.write_text("{not json")
            with self.assertRaises(ConfigurationError):
                GaussianDetector.load(path)
            with self.assertRaises(ConfigurationError):
                GaussianDetector.load(Path(tmp) / "missing.json")

    def test_precision_set_check(self):
        det = fit([0.0] * 10, [FP32, FP16])
        det.check_precision_set(["fp32", "fp16"])
        with self.assertRaises(ConfigurationError):
            det.check_precision_set([FP16, FP32])
        with self.assertRaises(ConfigurationError):
            det.check_precision_set(ALL_PRECISIONS)


if __name__ == "__main__":
    unittest.main()
