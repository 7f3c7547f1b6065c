import itertools
import math
import unittest
from pathlib import Path
from tempfile import NamedTemporaryFile, TemporaryDirectory

import numpy as np

from pvpASR.data_io import ToyLanguageSpec, synthesize
from pvpASR.errors import (ConfigurationError, InfeasibleTargetError,
                           NumericalOverflowError, SignalTooShortError,
                           TrainingError, UnsupportedAudioError,
                           MalformedAudioError, WeightFileError)
from pvpASR.model import (LOG_FLOOR, PARAM_NAMES, AudioSignal,
                          FrontEndConfig, ModelParams, TrainingConfig,
                          ctc_loss, features, filter_centers, forward,
                          forward_tensor, greedy_decode, init_params,
                          is_feasible, load_weights, save_weights,
                          token_error, train, transcribe)
from pvpASR.precision import ALL_PRECISIONS, PrecisionMode, is_representable
from pvpASR.tensor import Tape, backward

FP32 = PrecisionMode.FP32
FP16 = PrecisionMode.FP16

SMALL_FRONTEND = FrontEndConfig(num_filters=16)


def random_params(seed: int = 0,
                  hidden: int = 8,
                  vocab_size: int = 4) -> ModelParams:
    rng = np.random.default_rng(seed)
    noise = AudioSignal(rng.uniform(-0.2, 0.2, 3200))
    return init_params([(noise, ())], vocab_size, SMALL_FRONTEND, hidden, rng)


def brute_force_ctc(lp: np.ndarray) -> dict:
    """Total probability of every collapsed transcript, by path enumeration."""
    T, classes = lp.shape
    blank = classes - 1
    totals = {}
    for path in itertools.product(range(classes), repeat=T):
        collapsed = []
        prev = None
        for c in path:
            if c != prev and c != blank:
                collapsed.append(c)
            prev = c
        key = tuple(collapsed)
        totals[key] = totals.get(key, 0.0) + math.exp(
            sum(lp[t, c] for t, c in enumerate(path)))
    return totals


def reference_decode(lp: np.ndarray) -> tuple:
    """Two passes: collapse repeats of the best path, then drop blanks."""
    blank = lp.shape[1] - 1
    best = [int(np.argmax(row)) for row in lp]
    collapsed = [c for i, c in enumerate(best) if i == 0 or c != best[i - 1]]
    return tuple(c for c in collapsed if c != blank)


class TestFrontEnd(unittest.TestCase):
    def test_config_validation(self):
        with self.assertRaises(ConfigurationError):
            FrontEndConfig(frame_length=400, hop=401)
        with self.assertRaises(ConfigurationError):
            FrontEndConfig(num_filters=4)
        self.assertEqual(FrontEndConfig().num_frames(16000), 98)
        self.assertEqual(FrontEndConfig().num_frames(399), 0)

    def test_zero_signal(self):
        feats = features(AudioSignal(np.zeros(16000)))
        self.assertEqual(feats.shape, (98, 40))
        np.testing.assert_allclose(feats.data, np.log(LOG_FLOOR), rtol=1e-6)

    def test_tone_peaks_at_nearest_filter(self):
        t = np.arange(16000) / 16000
        x = AudioSignal(0.5 * np.sin(2 * np.pi * 1000.0 * t))
        cfg = FrontEndConfig()
        feats = features(x, cfg).data.mean(axis=0)
        nearest = int(np.argmin(np.abs(filter_centers(cfg) - 1000.0)))
        self.assertEqual(int(np.argmax(feats)), nearest)

    def test_too_short(self):
        with self.assertRaises(SignalTooShortError):
            features(AudioSignal(np.zeros(100)))

    def test_reduced_format(self):
        x = AudioSignal(np.random.default_rng(0).uniform(-0.1, 0.1, 4000))
        feats = features(x, FrontEndConfig(), PrecisionMode.BF16)
        self.assertTrue(is_representable(feats.data, PrecisionMode.BF16))

    def test_audio_validation(self):
        with self.assertRaises(UnsupportedAudioError):
            AudioSignal(np.zeros(10), sample_rate=8000)
        with self.assertRaises(MalformedAudioError):
            AudioSignal(np.array([0.0, np.nan]))
        with self.assertRaises(MalformedAudioError):
            AudioSignal(np.array([1.5]))


class TestForward(unittest.TestCase):
    def setUp(self):
        self.params = random_params()
        rng = np.random.default_rng(1)
        self.x = AudioSignal(rng.uniform(-0.2, 0.2, 3200))

    def test_rows_normalised(self):
        out = forward(self.params, self.x, FP32)
        self.assertEqual(out.shape, (SMALL_FRONTEND.num_frames(3200), 5))
        sums = np.exp(out.data.astype(np.float64)).sum(axis=1)
        self.assertTrue(np.all(np.abs(sums - 1) < 1e-5))

    def test_deterministic(self):
        for p in ALL_PRECISIONS:
            first = forward(self.params, self.x, p)
            second = forward(self.params, self.x, p)
            np.testing.assert_array_equal(first.data.view(np.uint32),
                                          second.data.view(np.uint32))
            self.assertTrue(is_representable(first.data, p))
            self.assertEqual(transcribe(self.params, self.x, p),
                             greedy_decode(first))

    def test_overflow_is_reported(self):
        weights = dict(self.params.weights)
        weights["W_out"] = np.full_like(weights["W_out"], 1e5)
        weights["W_out"][:, 0] = -1e5
        params = ModelParams(self.params.arch, weights, SMALL_FRONTEND)
        with self.assertRaises(NumericalOverflowError) as ctx:
            forward(params, self.x, FP16)
        self.assertIs(ctx.exception.precision, FP16)

    def test_params_validation(self):
        weights = dict(self.params.weights)
        weights.pop("U_rec")
        with self.assertRaises(WeightFileError):
            ModelParams(self.params.arch, weights, SMALL_FRONTEND)
        with self.assertRaises(ConfigurationError):
            ModelParams(self.params.arch, dict(self.params.weights),
                        FrontEndConfig())

    def test_sample_gradient(self):
        target = [1, 2]
        tape = Tape()
        signal = tape.variable(self.x.samples)
        loss = ctc_loss(forward_tensor(self.params, signal, FP32), target)
        grad = backward(tape, loss)[signal.node].astype(np.float64)

        def value(samples):
            t = Tape()
            out = forward_tensor(self.params, t.constant(samples), FP32)
            return float(ctc_loss(out, target).item())

        rng = np.random.default_rng(5)
        noise = rng.normal(size=grad.size)
        direction = grad / np.linalg.norm(grad) + noise / np.linalg.norm(noise)
        direction /= np.linalg.norm(direction)
        h = 1e-2
        base = self.x.samples.astype(np.float64)
        numeric = (value(base + h * direction) -
                   value(base - h * direction)) / (2 * h)
        analytic = float(grad @ direction)
        self.assertLess(abs(numeric - analytic) / abs(analytic), 2e-2)


class TestCTC(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)

    def _log_probs(self, T: int, classes: int) -> np.ndarray:
        logits = self.rng.normal(size=(T, classes))
        lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        return lp.astype(np.float32)

    def test_single_frame(self):
        lp = self._log_probs(1, 4)
        loss = ctc_loss(Tape().constant(lp), [2])
        self.assertAlmostEqual(loss.item(), -float(lp[0, 2]), places=5)

    def test_empty_target(self):
        lp = self._log_probs(2, 4)
        loss = ctc_loss(Tape().constant(lp), [])
        self.assertAlmostEqual(loss.item(), -float(lp[0, 3] + lp[1, 3]),
                               places=5)

    def test_brute_force(self):
        for _ in range(200):
            T = int(self.rng.integers(1, 7))
            classes = int(self.rng.integers(2, 5))
            lp = self._log_probs(T, classes)
            totals = brute_force_ctc(lp.astype(np.float64))
            vocab = classes - 1
            for length in range(4):
                for target in itertools.product(range(vocab), repeat=length):
                    if not is_feasible(target, T):
                        with self.assertRaises(InfeasibleTargetError):
                            ctc_loss(Tape().constant(lp), target)
                        continue
                    expected = -math.log(totals[tuple(target)])
                    loss = ctc_loss(Tape().constant(lp), target).item()
                    self.assertLess(abs(loss - expected),
                                    1e-5 * max(1.0, abs(expected)))

    def test_gradient(self):
        for _ in range(5):
            lp = self._log_probs(5, 4)
            tape = Tape()
            node = tape.variable(lp)
            grad = backward(tape, ctc_loss(node, [0, 2]))[node.node]
            h = 1e-3
            numeric = np.zeros_like(lp, dtype=np.float64)
            for idx in np.ndindex(*lp.shape):
                plus = lp.astype(np.float64).copy()
                minus = plus.copy()
                plus[idx] += h
                minus[idx] -= h
                totals_plus = brute_force_ctc(plus)[(0, 2)]
                totals_minus = brute_force_ctc(minus)[(0, 2)]
                numeric[idx] = (-math.log(totals_plus) +
                                math.log(totals_minus)) / (2 * h)
            np.testing.assert_allclose(grad, numeric, atol=1e-4)

    def test_infeasible(self):
        lp = self._log_probs(2, 4)
        with self.assertRaises(InfeasibleTargetError):
            ctc_loss(Tape().constant(lp), [1, 1])
        with self.assertRaises(InfeasibleTargetError):
            ctc_loss(Tape().constant(lp), [3])


class TestGreedyDecode(unittest.TestCase):
    def test_examples(self):
        blank = 3

        def one_hot(labels):
            lp = np.full((len(labels), 4), -10.0)
            lp[np.arange(len(labels)), labels] = 0.0
            return lp

        self.assertEqual(greedy_decode(one_hot([blank, blank])), ())
        self.assertEqual(greedy_decode(one_hot([1, 1, blank, 1])), (1, 1))
        self.assertEqual(greedy_decode(np.zeros((0, 4))), ())
        # ties resolve to the lowest id
        self.assertEqual(greedy_decode(np.zeros((2, 4))), (0, ))

    def test_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            T = int(rng.integers(1, 30))
            lp = rng.normal(size=(T, 5))
            self.assertEqual(greedy_decode(lp), reference_decode(lp))


class TestWeightFile(unittest.TestCase):
    def setUp(self):
        self.params = random_params()
        self.tmp = TemporaryDirectory()
        self.path = Path(self.tmp.name) / "model.pgw"

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        save_weights(self.params, self.path)
        self.assertEqual(self.path.read_bytes()[:4], b"PGW1")
        loaded = load_weights(self.path, vocab_size=4, frontend=SMALL_FRONTEND)
        self.assertEqual(loaded.arch, self.params.arch)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(
                loaded.weights[name].view(np.uint32),
                self.params.weights[name].view(np.uint32))

    def test_front_end_stored(self):
        frontend = FrontEndConfig(frame_length=320, hop=80, num_filters=16)
        params = ModelParams(self.params.arch, dict(self.params.weights),
                             frontend)
        save_weights(params, self.path)
        self.assertEqual(load_weights(self.path).frontend, frontend)
        self.assertEqual(
            load_weights(self.path, frontend=frontend).frontend, frontend)
        with self.assertRaises(WeightFileError):
            load_weights(self.path, frontend=SMALL_FRONTEND)
        with self.assertRaises(WeightFileError):
            load_weights(self.path,
                         frontend=FrontEndConfig(frame_length=320,
                                                 hop=160,
                                                 num_filters=16))

    def test_corrupt_files(self):
        save_weights(self.params, self.path)
        blob = self.path.read_bytes()
        with NamedTemporaryFile(suffix=".pgw") as handle:
            handle.write(b"XXXX" + blob[4:])
            handle.flush()
            with self.assertRaises(WeightFileError):
                load_weights(handle.name)
        with NamedTemporaryFile(suffix=".pgw") as handle:
            handle.write(blob[:-8])
            handle.flush()
            with self.assertRaises(WeightFileError):
                load_weights(handle.name)
        with self.assertRaises(WeightFileError):
            load_weights(self.path, vocab_size=7)
        with self.assertRaises(WeightFileError):
            load_weights(Path(self.tmp.name) / "missing.pgw")


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.spec = ToyLanguageSpec(vocab_size=4, min_tokens=1, max_tokens=3)
        rng = np.random.default_rng(0)
        self.dataset = []
        for _ in range(6):
            tokens = tuple(
                int(t) for t in rng.integers(0, 4, size=rng.integers(1, 4)))
            self.dataset.append((synthesize(tokens, self.spec, rng), tokens))
        self.hyper = TrainingConfig(epochs=2, batch_size=3, hidden=8)

    def test_loss_decreases_on_one_utterance(self):
        x, y = self.dataset[0]
        params = init_params([(x, y)], 4, SMALL_FRONTEND, 8,
                             np.random.default_rng(0))
        before = float(ctc_loss(forward(params, x, FP32), y).item())
        hyper = TrainingConfig(epochs=40,
                               batch_size=1,
                               hidden=8,
                               learning_rate=1e-2)
        trained = train([(x, y)],
                        hyper,
                        vocab_size=4,
                        frontend=SMALL_FRONTEND,
                        init=params)
        after = float(ctc_loss(forward(trained, x, FP32), y).item())
        self.assertLess(after, 0.5 * before)

    def test_deterministic(self):
        first = train(self.dataset, self.hyper, 4, SMALL_FRONTEND)
        second = train(self.dataset, self.hyper, 4, SMALL_FRONTEND)
        for name in PARAM_NAMES:
            np.testing.assert_array_equal(first.weights[name],
                                          second.weights[name])

    def test_target_not_reached(self):
        hyper = TrainingConfig(epochs=1,
                               batch_size=3,
                               hidden=8,
                               target_token_error=-1.0)
        with self.assertRaises(TrainingError) as ctx:
            train(self.dataset, hyper, 4, SMALL_FRONTEND, self.dataset)
        self.assertIsNotNone(ctx.exception.params)
        rate = token_error(ctx.exception.params, self.dataset)
        self.assertAlmostEqual(rate, ctx.exception.token_error)

    def test_invalid(self):
        with self.assertRaises(ValueError):
            train([], self.hyper, 4, SMALL_FRONTEND)
        with self.assertRaises(ConfigurationError):
            TrainingConfig(epochs=0)


if __name__ == "__main__":
    unittest.main()
