import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np

from pvpASR.attacks import (SOURCE_ALL, AttackConfig, AttackKind, NormKind,
                            adaptive_cw_attack, cw_attack, load_record,
                            load_records, objective_and_gradient, project,
                            psychoacoustic_attack, save_record, to_grid)
from pvpASR.data_io import MAX_SAMPLE, to_pcm16
from pvpASR.errors import ConfigurationError, InfeasibleTargetError
from pvpASR.metrics import snr_seg
from pvpASR.model import AudioSignal, FrontEndConfig, init_params, transcribe
from pvpASR.precision import ALL_PRECISIONS, PrecisionMode
from pvpASR.psychoacoustics import masking_threshold

FP32, FP16, BF16 = PrecisionMode.FP32, PrecisionMode.FP16, PrecisionMode.BF16

QUICK = AttackConfig(iterations=6, learning_rate=1e-3, poll_every=2, seed=3)


def on_grid(values: np.ndarray) -> np.ndarray:
    return to_pcm16(values).astype(np.float32) / np.float32(32768)


class AttackFixture(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        noise = AudioSignal(rng.uniform(-0.2, 0.2, 3200))
        self.params = init_params([(noise, ())], 4,
                                  FrontEndConfig(num_filters=16), 8, rng)
        self.x = AudioSignal(on_grid(rng.uniform(-0.3, 0.3, 3200)))
        benign = {transcribe(self.params, self.x, p) for p in ALL_PRECISIONS}
        self.target = next(t for t in ((0, 1), (1, 0), (2, 3), (3, 2))
                           if t not in benign)


class TestAttackConfig(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ConfigurationError):
            AttackConfig(iterations=0)
        with self.assertRaises(ConfigurationError):
            AttackConfig(delta_bound=0.0)
        with self.assertRaises(ConfigurationError):
            AttackConfig(c2=-1.0)
        with self.assertRaises(ConfigurationError):
            AttackConfig(c=0.0)
        self.assertIs(AttackConfig(norm_q="LINF").norm_q, NormKind.LINF)

    def test_kind_parse(self):
        self.assertIs(AttackKind.parse("CW"), AttackKind.CW)
        self.assertIs(AttackKind.parse("psycho"), AttackKind.PSYCHOACOUSTIC)
        with self.assertRaises(ConfigurationError):
            AttackKind.parse("fgsm")


class TestBox(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(1)
        x = on_grid(rng.uniform(-1.0, 1.0, 5000))
        x[:4] = [-1.0, MAX_SAMPLE, -32740 / 32768, 32740 / 32768]
        self.x = x
        self.delta = rng.normal(0.0, 0.05, 5000).astype(np.float32)

    def test_project(self):
        bound = 0.02
        d = project(self.x, self.delta, bound)
        self.assertTrue(np.all(np.abs(d) <= bound + 1e-7))
        total = self.x.astype(np.float64) + d
        self.assertTrue(np.all(total >= -1.0 - 1e-7))
        self.assertTrue(np.all(total <= MAX_SAMPLE + 1e-7))

    def test_to_grid(self):
        bound = 0.02
        d = to_grid(self.x, self.delta, bound)
        ticks = d.astype(np.float64) * 32768
        np.testing.assert_array_equal(ticks, np.round(ticks))
        self.assertTrue(np.all(np.abs(d) <= bound))
        total = self.x.astype(np.float64) + d
        self.assertTrue(np.all(total >= -1.0))
        self.assertTrue(np.all(total <= MAX_SAMPLE))
        # already on the grid and inside the box: unchanged
        np.testing.assert_array_equal(to_grid(self.x, d, bound), d)


class TestCW(AttackFixture):
    def test_record(self):
        record = cw_attack(self.params,
                           self.x,
                           self.target,
                           FP16,
                           QUICK,
                           utterance_id="u-1",
                           reference=(3, ))
        self.assertIs(record.attack_kind, AttackKind.CW)
        self.assertIs(record.source_precision, FP16)
        self.assertEqual(record.target, self.target)
        self.assertEqual(record.iterations_used, 6)
        self.assertEqual(len(record.best_objective), 3)
        self.assertTrue(np.all(np.abs(record.delta) <= QUICK.delta_bound))
        ticks = record.delta.astype(np.float64) * 32768
        np.testing.assert_array_equal(ticks, np.round(ticks))
        self.assertEqual(record.snr_seg_db, snr_seg(self.x.samples,
                                                    record.delta))
        self.assertEqual(set(record.success_by_precision),
                         {p.value for p in ALL_PRECISIONS})
        decoded = transcribe(self.params, record.adversarial, FP16)
        self.assertEqual(record.success_at_source, decoded == self.target)
        self.assertEqual(record.utterance_id, "u-1")
        self.assertEqual(record.reference, (3, ))

    def test_deterministic(self):
        first = cw_attack(self.params, self.x, self.target, FP32, QUICK)
        second = cw_attack(self.params, self.x, self.target, FP32, QUICK)
        np.testing.assert_array_equal(first.delta, second.delta)
        self.assertEqual(first.best_objective, second.best_objective)

    def test_infeasible_targets(self):
        benign = transcribe(self.params, self.x, FP32)
        with self.assertRaises(InfeasibleTargetError):
            cw_attack(self.params, self.x, benign, FP32, QUICK)
        with self.assertRaises(InfeasibleTargetError):
            cw_attack(self.params, self.x, (0, 1) * 20, FP32, QUICK)
        with self.assertRaises(InfeasibleTargetError):
            cw_attack(self.params, self.x, (9, ), FP32, QUICK)

    def test_linf_norm(self):
        cfg = AttackConfig(iterations=4, poll_every=2, norm_q="linf")
        record = cw_attack(self.params, self.x, self.target, FP32, cfg)
        self.assertTrue(np.all(np.abs(record.delta) <= cfg.delta_bound))


class TestPsychoacoustic(AttackFixture):
    def test_zero_weight_continues_cw(self):
        cw = cw_attack(self.params, self.x, self.target, BF16, QUICK)
        cfg = AttackConfig(iterations=4,
                           learning_rate=1e-3,
                           poll_every=2,
                           c=0.7,
                           c1=0.7,
                           c2=0.0)
        psycho = psychoacoustic_attack(self.params, cw, cfg)
        continued = cw_attack(self.params,
                              self.x,
                              self.target,
                              BF16,
                              cfg,
                              init_delta=cw.delta)
        self.assertIs(psycho.attack_kind, AttackKind.PSYCHOACOUSTIC)
        self.assertIs(psycho.source_precision, BF16)
        np.testing.assert_array_equal(psycho.delta, continued.delta)

    def test_with_masking(self):
        cw = cw_attack(self.params, self.x, self.target, FP32, QUICK)
        psycho = psychoacoustic_attack(self.params, cw, QUICK)
        self.assertTrue(np.all(np.abs(psycho.delta) <= QUICK.delta_bound))
        self.assertEqual(psycho.target, cw.target)

    def test_needs_cw_record(self):
        adaptive = adaptive_cw_attack(self.params, self.x, self.target, QUICK)
        with self.assertRaises(ConfigurationError):
            psychoacoustic_attack(self.params, adaptive, QUICK)


class TestAdaptive(AttackFixture):
    def test_all_precisions(self):
        record = adaptive_cw_attack(self.params, self.x, self.target, QUICK)
        self.assertEqual(record.source_precision, SOURCE_ALL)
        self.assertEqual(record.source_precisions, list(ALL_PRECISIONS))
        expected = all(record.success_by_precision.values())
        self.assertEqual(record.success_at_source, expected)

    def test_single_precision_is_cw(self):
        adaptive = adaptive_cw_attack(self.params, self.x, self.target, QUICK,
                                      [FP16])
        cw = cw_attack(self.params, self.x, self.target, FP16, QUICK)
        self.assertIs(adaptive.source_precision, FP16)
        np.testing.assert_array_equal(adaptive.delta, cw.delta)
        self.assertEqual(adaptive.success_at_source, cw.success_at_source)


class TestObjective(AttackFixture):
    def _check_direction(self, c2, threshold):
        rng = np.random.default_rng(4)
        delta = rng.uniform(-1e-2, 1e-2, 3200).astype(np.float32)
        args = (self.params, self.x)
        tail = (self.target, [FP32], 1.0, NormKind.L2, c2, threshold)
        _, grad = objective_and_gradient(*args, delta, *tail)
        grad = grad.astype(np.float64)
        noise = rng.normal(size=grad.size)
        direction = grad / np.linalg.norm(grad) + noise / np.linalg.norm(noise)
        direction /= np.linalg.norm(direction)
        h = 1e-3
        base = delta.astype(np.float64)
        plus, _ = objective_and_gradient(*args, base + h * direction, *tail)
        minus, _ = objective_and_gradient(*args, base - h * direction, *tail)
        numeric = (plus - minus) / (2 * h)
        analytic = float(grad @ direction)
        self.assertLess(abs(numeric - analytic) / abs(analytic), 2e-2)

    def test_gradient(self):
        self._check_direction(0.0, None)

    def test_gradient_with_masking(self):
        self._check_direction(0.05, masking_threshold(self.x))


class TestPersistence(AttackFixture):
    def test_round_trip(self):
        record = cw_attack(self.params,
                           self.x,
                           self.target,
                           FP16,
                           QUICK,
                           utterance_id="test_clean_analog-00001",
                           reference=(2, 2))
        with TemporaryDirectory() as tmp:
            sidecar = save_record(record, tmp, "cw-00000", seed=11)
            self.assertTrue((Path(tmp) / "cw-00000.wav").exists())
            self.assertTrue((Path(tmp) / "cw-00000_benign.wav").exists())
            loaded = load_record(sidecar)
            np.testing.assert_array_equal(loaded.delta, record.delta)
            np.testing.assert_array_equal(loaded.benign.samples,
                                          record.benign.samples)
            self.assertEqual(loaded.target, record.target)
            self.assertIs(loaded.source_precision, FP16)
            self.assertIs(loaded.attack_kind, AttackKind.CW)
            self.assertEqual(loaded.success_at_source,
                             record.success_at_source)
            self.assertEqual(loaded.success_by_precision,
                             record.success_by_precision)
            self.assertEqual(loaded.config, QUICK)
            self.assertEqual(loaded.reference, (2, 2))

            adaptive = adaptive_cw_attack(self.params, self.x, self.target,
                                          QUICK)
            save_record(adaptive, tmp, "adaptive-00000")
            records = load_records(tmp)
            self.assertEqual([r.attack_kind for r in records],
                             [AttackKind.ADAPTIVE_CW, AttackKind.CW])
            self.assertEqual(records[0].source_precision, SOURCE_ALL)

    def test_missing(self):
        with TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigurationError):
                load_record(Path(tmp) / "none.json")
            with self.assertRaises(ConfigurationError):
                load_records(Path(tmp) / "absent")


if __name__ == "__main__":
    unittest.main()
