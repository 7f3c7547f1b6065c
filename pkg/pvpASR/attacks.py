"""
Targeted gradient attacks on the toy recognizer.

* :func:`cw_attack` minimises ``||delta||_q + c * CTC(f_ps(x + delta), y_t)``.
* :func:`psychoacoustic_attack` continues from a C&W record and adds
  ``c2 * masking_penalty``.
* :func:`adaptive_cw_attack` averages the CTC term over every precision, so
  the example transcribes to the target whichever precision is used.

All three run Adam on ``delta``, clip it to the L-infinity box after every
step and poll for success on the PCM16 grid, so a record's success flag
survives writing it to a WAV file.
"""
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from pvpASR.data_io import MAX_SAMPLE, PCM16_SCALE, read_wav, write_wav
from pvpASR.errors import (ConfigurationError, InfeasibleTargetError,
                           NumericalOverflowError)
from pvpASR.metrics import snr_seg
from pvpASR.model import (AudioSignal, ModelParams, Transcript, check_target,
                          ctc_loss, forward_tensor, transcribe)
from pvpASR.precision import ALL_PRECISIONS, PrecisionMode, parse_precisions
from pvpASR.psychoacoustics import (MaskingThreshold, masking_penalty_tensor,
                                    masking_threshold)
from pvpASR.tensor import (FP32, Adam, Tape, Tensor, add, backward, max_abs,
                           scale, sqrt, square, total)

logger = logging.getLogger(__name__)
handler = logging.StreamHandler(sys.stdout)
formatter = logging.Formatter(
    '[%(asctime)s] %(module)s.%(funcName)s %(levelname)s: %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S')
handler.setFormatter(formatter)
logger.addHandler(handler)
logger.setLevel(logging.INFO)

SOURCE_ALL = "all"
INIT_SCALE = 1e-4


class NormKind(str, Enum):
    L2 = "l2"
    LINF = "linf"

    def __str__(self) -> str:
        return self.value


class AttackKind(str, Enum):
    CW = "cw"
    PSYCHOACOUSTIC = "psycho"
    ADAPTIVE_CW = "adaptive"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value) -> "AttackKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(
                f"Unknown attack '{value}'. Expected one of "
                f"{[k.value for k in cls]}.") from None


@dataclass(frozen=True)
class AttackConfig:
    """
    Optimisation settings shared by all attacks.

    Attributes:
        iterations (int): Adam steps.
        learning_rate (float): Adam step size.
        c (float): CTC weight of C&W and adaptive attacks.
        c1 (float): CTC weight of the psychoacoustic attack.
        c2 (float): Masking-penalty weight of the psychoacoustic attack.
        delta_bound (float): L-infinity bound on the perturbation.
        norm_q (NormKind): Norm of the distortion term.
        seed (int): Seed of the initial perturbation.
        poll_every (int): Iterations between success checks.
        early_stop (bool): Stop at the first successful check.
    """
    iterations: int = 4000
    learning_rate: float = 5e-4
    c: float = 1.0
    c1: float = 1.0
    c2: float = 0.05
    delta_bound: float = 0.02
    norm_q: NormKind = NormKind.L2
    seed: int = 0
    poll_every: int = 50
    early_stop: bool = False

    def __post_init__(self):
        object.__setattr__(self, "norm_q", NormKind(str(self.norm_q).lower()))
        if self.iterations < 1:
            raise ConfigurationError(
                f"Attack iterations must be >= 1, got {self.iterations}.")
        if not self.delta_bound > 0:
            raise ConfigurationError("Attack delta_bound must be positive.")
        if not (self.c > 0 and self.c1 > 0):
            raise ConfigurationError("Attack weights c and c1 must be positive.")
        if self.c2 < 0:
            raise ConfigurationError("Attack weight c2 must be >= 0.")
        if not self.learning_rate > 0 or self.poll_every < 1:
            raise ConfigurationError(
                "Attack learning rate must be positive and poll_every >= 1.")

    def to_dict(self) -> dict:
        state = asdict(self)
        state["norm_q"] = self.norm_q.value
        return state


@dataclass
class AdversarialRecord:
    """
    Outcome of one attack.

    Attributes:
        benign (AudioSignal): Carrier audio.
        delta (np.ndarray): Perturbation on the PCM16 grid.
        target (Tuple[int, ...]): Target transcript.
        source_precision (PrecisionMode or str): Precision attacked, or
            ``"all"`` for the adaptive attack.
        attack_kind (AttackKind): Attack that produced the record.
        success_at_source (bool): Whether ``benign + delta`` decodes to
            ``target`` at the source precision (every precision if adaptive).
        iterations_used (int): Adam steps taken.
        snr_seg_db (float): Segmental SNR of ``delta`` against ``benign``.
        success_by_precision (Dict[str, bool]): Target match at every
            precision.
        utterance_id (str): Corpus id of the carrier.
        reference (Tuple[int, ...]): Benign reference transcript.
        config (AttackConfig): Settings used.
        best_objective (List[float]): Lowest objective value seen, at every
            poll.
    """
    benign: AudioSignal
    delta: np.ndarray
    target: Transcript
    source_precision: Union[PrecisionMode, str]
    attack_kind: AttackKind
    success_at_source: bool
    iterations_used: int
    snr_seg_db: float
    success_by_precision: Dict[str, bool] = field(default_factory=dict)
    utterance_id: str = ""
    reference: Transcript = ()
    config: Optional[AttackConfig] = None
    best_objective: List[float] = field(default_factory=list)

    @property
    def adversarial(self) -> AudioSignal:
        return AudioSignal(self.benign.samples + self.delta)

    @property
    def source_precisions(self) -> List[PrecisionMode]:
        if self.source_precision == SOURCE_ALL:
            return list(ALL_PRECISIONS)
        return [PrecisionMode.parse(self.source_precision)]


# --- objective ---------------------------------------------------------------


def _norm(delta: Tensor, kind: NormKind) -> Tensor:
    if kind is NormKind.LINF:
        return max_abs(delta, FP32)
    return sqrt(total(square(delta, FP32), FP32), FP32)


def attack_objective(params: ModelParams,
                     x: AudioSignal,
                     delta: Tensor,
                     target: Sequence[int],
                     precisions: Sequence[PrecisionMode],
                     c: float,
                     norm_q: NormKind = NormKind.L2,
                     c2: float = 0.0,
                     threshold: Optional[MaskingThreshold] = None) -> Tensor:
    """
    Attack objective on the tape of ``delta``.

    ``||delta||_q + c * mean_p CTC(f_p(x + delta), target)``, plus
    ``c2 * masking_penalty`` when ``c2 > 0``. The mean over a single
    precision is the plain CTC term.

    Raises:
        NumericalOverflowError: Some forward pass overflowed.
    """
    tape = delta.tape
    signal = add(tape.constant(x.samples), delta, FP32)
    losses = [
        ctc_loss(forward_tensor(params, signal, p), target) for p in precisions
    ]
    ctc = losses[0]
    for loss in losses[1:]:
        ctc = add(ctc, loss, FP32)
    if len(losses) > 1:
        ctc = scale(ctc, 1.0 / len(losses), FP32)
    objective = add(_norm(delta, NormKind(norm_q)), scale(ctc, c, FP32), FP32)
    if c2 > 0:
        if threshold is None:
            threshold = masking_threshold(x)
        penalty = masking_penalty_tensor(threshold, delta)
        objective = add(objective, scale(penalty, c2, FP32), FP32)
    return objective


def objective_and_gradient(params: ModelParams,
                           x: AudioSignal,
                           delta: np.ndarray,
                           target: Sequence[int],
                           precisions: Sequence[PrecisionMode],
                           c: float,
                           norm_q: NormKind = NormKind.L2,
                           c2: float = 0.0,
                           threshold: Optional[MaskingThreshold] = None
                           ) -> Tuple[float, np.ndarray]:
    """Value of :func:`attack_objective` and its gradient in ``delta``."""
    tape = Tape()
    d = tape.variable(np.asarray(delta, dtype=np.float32))
    objective = attack_objective(params, x, d, target, precisions, c, norm_q,
                                 c2, threshold)
    return objective.item(), backward(tape, objective)[d.node]


# --- box and grid ------------------------------------------------------------


def _grid_bounds(x: np.ndarray, bound: float) -> Tuple[np.ndarray, np.ndarray]:
    x_ticks = np.round(x.astype(np.float64) * PCM16_SCALE)
    limit = np.floor(bound * PCM16_SCALE)
    lower = np.maximum(-limit, -PCM16_SCALE - x_ticks)
    upper = np.minimum(limit, PCM16_SCALE - 1 - x_ticks)
    return lower, upper


def project(x: np.ndarray, delta: np.ndarray, bound: float) -> np.ndarray:
    """Clip ``delta`` to ``[-bound, bound]`` and ``x + delta`` to the PCM16 range."""
    d = np.clip(delta.astype(np.float64), -bound, bound)
    d = np.clip(x + d, -1.0, MAX_SAMPLE) - x
    return d.astype(np.float32)


def to_grid(x: np.ndarray, delta: np.ndarray, bound: float) -> np.ndarray:
    """
    Round ``delta`` to multiples of 1/32768 inside the box.

    The result satisfies ``|delta| <= bound`` and keeps ``x + delta`` in
    [-1, 32767/32768] when ``x`` is on the PCM16 grid.
    """
    lower, upper = _grid_bounds(x, bound)
    ticks = np.clip(np.round(delta.astype(np.float64) * PCM16_SCALE), lower,
                    upper)
    return (ticks / PCM16_SCALE).astype(np.float32)


def _matches(params: ModelParams, x: np.ndarray, delta: np.ndarray,
             target: Transcript, p: PrecisionMode) -> bool:
    try:
        return transcribe(params, AudioSignal(x + delta), p) == tuple(target)
    except NumericalOverflowError:
        return False


def _delta_norm(delta: np.ndarray, kind: NormKind) -> float:
    if kind is NormKind.LINF:
        return float(np.max(np.abs(delta))) if delta.size else 0.0
    return float(np.sqrt(np.sum(delta.astype(np.float64)**2)))


# --- driver ------------------------------------------------------------------


def _run(params: ModelParams, x: AudioSignal, target: Sequence[int],
         precisions: List[PrecisionMode], cfg: AttackConfig, c: float,
         c2: float, init_delta: Optional[np.ndarray],
         threshold: Optional[MaskingThreshold]
         ) -> Tuple[np.ndarray, bool, int, List[float]]:
    samples = x.samples
    target = tuple(target)
    if init_delta is None:
        rng = np.random.default_rng(cfg.seed)
        delta = (INIT_SCALE * rng.uniform(-1.0, 1.0, samples.size)).astype(np.float32)
    else:
        delta = np.asarray(init_delta, dtype=np.float32).copy()
        if delta.shape != samples.shape:
            raise ConfigurationError(
                f"Initial perturbation has {delta.size} samples, carrier has "
                f"{samples.size}.")
    delta = project(samples, delta, cfg.delta_bound)
    state = {"delta": delta}
    optimizer = Adam(cfg.learning_rate)

    best_delta, best_norm = None, np.inf
    best_objective, trace = np.inf, []
    used = 0
    for it in range(1, cfg.iterations + 1):
        used = it
        try:
            value, grad = objective_and_gradient(params, x, state["delta"],
                                                 target, precisions, c,
                                                 cfg.norm_q, c2, threshold)
        except NumericalOverflowError as err:
            optimizer.lr *= 0.5
            logger.warning(
                "Iteration %i skipped (%s); step size halved to %.2e.", it,
                err, optimizer.lr)
            value, grad = None, None
        if grad is not None:
            best_objective = min(best_objective, value)
            optimizer.step(state, {"delta": grad})
            state["delta"] = project(samples, state["delta"], cfg.delta_bound)

        if it % cfg.poll_every == 0 or it == cfg.iterations:
            trace.append(float(best_objective))
            candidate = to_grid(samples, state["delta"], cfg.delta_bound)
            if all(
                    _matches(params, samples, candidate, target, p)
                    for p in precisions):
                norm = _delta_norm(candidate, cfg.norm_q)
                if norm < best_norm:
                    best_delta, best_norm = candidate, norm
                logger.debug("Iteration %i: success, norm %.5f.", it, norm)
                if cfg.early_stop:
                    break

    if best_delta is not None:
        return best_delta, True, used, trace
    return to_grid(samples, state["delta"], cfg.delta_bound), False, used, trace


def _check_preconditions(params: ModelParams, x: AudioSignal,
                         target: Sequence[int],
                         precisions: Sequence[PrecisionMode]) -> Transcript:
    frames_count = params.frontend.num_frames(len(x))
    target = tuple(check_target(target, frames_count, params.arch.vocab_size))
    benign = []
    for p in precisions:
        try:
            benign.append(transcribe(params, x, p))
        except NumericalOverflowError:
            benign.append(None)
    if all(b == target for b in benign):
        raise InfeasibleTargetError(
            "Target equals the benign transcription; nothing to attack.")
    return target


def _finish_record(params: ModelParams, x: AudioSignal, delta: np.ndarray,
                   target: Transcript, source, kind: AttackKind,
                   success: bool, used: int, trace: List[float],
                   cfg: AttackConfig, utterance_id: str,
                   reference: Transcript) -> AdversarialRecord:
    by_precision = {
        p.value: _matches(params, x.samples, delta, target, p)
        for p in ALL_PRECISIONS
    }
    return AdversarialRecord(benign=x,
                             delta=delta,
                             target=target,
                             source_precision=source,
                             attack_kind=kind,
                             success_at_source=success,
                             iterations_used=used,
                             snr_seg_db=snr_seg(x.samples, delta),
                             success_by_precision=by_precision,
                             utterance_id=utterance_id,
                             reference=tuple(reference),
                             config=cfg,
                             best_objective=trace)


def cw_attack(params: ModelParams,
              x: AudioSignal,
              y_t: Sequence[int],
              p_s: PrecisionMode,
              cfg: AttackConfig = AttackConfig(),
              init_delta: Optional[np.ndarray] = None,
              utterance_id: str = "",
              reference: Sequence[int] = ()) -> AdversarialRecord:
    """
    Targeted C&W attack at source precision ``p_s``.

    Args:
        params (ModelParams): Model under attack.
        x (AudioSignal): Carrier.
        y_t (Sequence[int]): Target transcript.
        p_s (PrecisionMode): Precision the model is evaluated in.
        cfg (AttackConfig): Optimisation settings.
        init_delta (np.ndarray): Starting perturbation; a small random one
            seeded by ``cfg.seed`` if None.
        utterance_id (str): Carried into the record.
        reference (Sequence[int]): Carried into the record.

    Returns:
        AdversarialRecord: The smallest successful perturbation seen, or the
        final one with ``success_at_source`` false.

    Raises:
        InfeasibleTargetError: Target too long for the signal, outside the
            vocabulary, or already the benign transcription.
    """
    p_s = PrecisionMode.parse(p_s)
    target = _check_preconditions(params, x, y_t, [p_s])
    delta, success, used, trace = _run(params, x, target, [p_s], cfg, cfg.c,
                                       0.0, init_delta, None)
    return _finish_record(params, x, delta, target, p_s, AttackKind.CW,
                          success, used, trace, cfg, utterance_id, reference)


def psychoacoustic_attack(params: ModelParams,
                          record: AdversarialRecord,
                          cfg: AttackConfig = AttackConfig()
                          ) -> AdversarialRecord:
    """
    Continue a C&W record with the masking penalty added to the objective.

    The objective is ``||delta||_q + c1 * CTC + c2 * masking_penalty``; with
    ``c2 == 0`` it is exactly a continued C&W run with ``c = c1``.

    Raises:
        ConfigurationError: ``record`` is not a C&W record.
    """
    if record.attack_kind is not AttackKind.CW:
        raise ConfigurationError(
            f"Psychoacoustic attack starts from a C&W record, got "
            f"{record.attack_kind}.")
    p_s = PrecisionMode.parse(record.source_precision)
    x = record.benign
    threshold = masking_threshold(x) if cfg.c2 > 0 else None
    delta, success, used, trace = _run(params, x, record.target, [p_s], cfg,
                                       cfg.c1, cfg.c2, record.delta,
                                       threshold)
    return _finish_record(params, x, delta, tuple(record.target), p_s,
                          AttackKind.PSYCHOACOUSTIC, success, used, trace, cfg,
                          record.utterance_id, record.reference)


def adaptive_cw_attack(params: ModelParams,
                       x: AudioSignal,
                       y_t: Sequence[int],
                       cfg: AttackConfig = AttackConfig(),
                       precisions: Sequence[PrecisionMode] = ALL_PRECISIONS,
                       utterance_id: str = "",
                       reference: Sequence[int] = ()) -> AdversarialRecord:
    """
    Multi-precision C&W attack averaging the CTC loss over ``precisions``.

    Success requires the target at every precision. The record's source
    precision is ``"all"``; with a single precision the run is identical to
    :func:`cw_attack` at that precision.
    """
    precisions = parse_precisions(precisions)
    if not precisions:
        raise ConfigurationError("Adaptive attack needs at least one precision.")
    target = _check_preconditions(params, x, y_t, precisions)
    delta, success, used, trace = _run(params, x, target, precisions, cfg,
                                       cfg.c, 0.0, None, None)
    source = SOURCE_ALL if len(precisions) > 1 else precisions[0]
    return _finish_record(params, x, delta, target, source,
                          AttackKind.ADAPTIVE_CW, success, used, trace, cfg,
                          utterance_id, reference)


# --- persistence ---------------------------------------------------------------


def save_record(record: AdversarialRecord, output_path, stem: str,
                seed: Optional[int] = None) -> Path:
    """
    Write ``<stem>.wav`` (benign + delta), ``<stem>_benign.wav`` and the
    ``<stem>.json`` sidecar.

    Returns:
        pathlib.Path: Sidecar path.
    """
    output_path = Path(output_path)
    output_path.mkdir(parents=True, exist_ok=True)
    write_wav(output_path / f"{stem}.wav", record.adversarial)
    write_wav(output_path / f"{stem}_benign.wav", record.benign)
    sidecar = {
        "utterance_id": record.utterance_id,
        "reference": list(record.reference),
        "target": list(record.target),
        "source_precision": str(record.source_precision),
        "attack_kind": record.attack_kind.value,
        "success_at_source": bool(record.success_at_source),
        "success_by_precision": record.success_by_precision,
        "iterations_used": int(record.iterations_used),
        "snr_seg_db": round(float(record.snr_seg_db), 6),
        "best_objective": [round(v, 6) for v in record.best_objective],
        "config": record.config.to_dict() if record.config else None,
        "seed": seed if seed is not None else (
            record.config.seed if record.config else None),
    }
    path = output_path / f"{stem}.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=4, sort_keys=True)
    return path


def load_record(sidecar) -> AdversarialRecord:
    """
    Read a record written by :func:`save_record`.

    Raises:
        ConfigurationError: Sidecar or audio missing or malformed.
    """
    sidecar = Path(sidecar)
    if not sidecar.exists():
        raise ConfigurationError(f"Record {sidecar} does not exist.")
    with open(sidecar, "r", encoding="utf-8") as f:
        try:
            state = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigurationError(
                f"Cannot parse record {sidecar}: {err}") from None
    stem = sidecar.with_suffix("")
    adversarial_path = stem.parent / f"{stem.name}.wav"
    benign_path = stem.parent / f"{stem.name}_benign.wav"
    for path in (adversarial_path, benign_path):
        if not path.exists():
            raise ConfigurationError(f"Record audio {path} does not exist.")
    benign = read_wav(benign_path)
    adversarial = read_wav(adversarial_path)
    if len(adversarial) != len(benign):
        raise ConfigurationError(
            f"Record {sidecar}: adversarial and benign lengths differ.")
    source = state["source_precision"]
    if source != SOURCE_ALL:
        source = PrecisionMode.parse(source)
    config = AttackConfig(**state["config"]) if state.get("config") else None
    return AdversarialRecord(
        benign=benign,
        delta=adversarial.samples - benign.samples,
        target=tuple(state["target"]),
        source_precision=source,
        attack_kind=AttackKind.parse(state["attack_kind"]),
        success_at_source=bool(state["success_at_source"]),
        iterations_used=int(state["iterations_used"]),
        snr_seg_db=float(state["snr_seg_db"]),
        success_by_precision=dict(state.get("success_by_precision", {})),
        utterance_id=state.get("utterance_id", ""),
        reference=tuple(state.get("reference", ())),
        config=config,
        best_objective=list(state.get("best_objective", [])))


def load_records(records_path) -> List[AdversarialRecord]:
    """All records in a directory, in sorted sidecar-name order."""
    records_path = Path(records_path)
    if not records_path.is_dir():
        raise ConfigurationError(f"Records directory {records_path} does not exist.")
    return [load_record(p) for p in sorted(records_path.glob("*.json"))]
