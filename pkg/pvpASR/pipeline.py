import logging
import sys
from multiprocessing import Pool
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from pvpASR import ATTACK_KINDS, BAR_FORMAT, BENIGN_HEADER, DETECT_HEADER, \
    ROBUST_HEADER
from pvpASR.attacks import (SOURCE_ALL, AdversarialRecord, AttackConfig,
                            AttackKind, adaptive_cw_attack, cw_attack,
                            load_records, psychoacoustic_attack, save_record)
from pvpASR.data_io import (Split, ToyLanguageSpec, Utterance, generate_corpus,
                            load_manifest)
from pvpASR.detector import GaussianDetector, ScoreVariant, diversity_score, \
    draw_precision, fit
from pvpASR.errors import (ConfigurationError, EmptySplitError,
                           InfeasibleTargetError, NumericalOverflowError,
                           TrainingError)
from pvpASR.metrics import auroc, corpus_wer, ser
from pvpASR.model import (AudioSignal, FrontEndConfig, ModelParams,
                          TrainingConfig, Transcript, is_feasible,
                          load_weights, save_weights, train, transcribe)
from pvpASR.precision import PrecisionMode, parse_precisions
from pvpASR.utils import ExperimentConfig, config_hash, write_report

logger = logging.getLogger(__name__)
handler = logging.StreamHandler(sys.stdout)
formatter = logging.Formatter(
    '[%(asctime)s] %(module)s.%(funcName)s %(levelname)s: %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S')
handler.setFormatter(formatter)
logger.addHandler(handler)
logger.setLevel(logging.INFO)

RANDOM_COLUMN = "random"
MAX_TARGET_DRAWS = 10000
# stream tags separating the seeds of independent random draws
_TARGET_STREAM = 1
_RANDOM_BENIGN_STREAM = 2
_RANDOM_ROBUST_STREAM = 3
_ATTACK_STREAM = 4

# --- config translation ------------------------------------------------------


def language_spec(config: ExperimentConfig) -> ToyLanguageSpec:
    c = config.corpus
    return ToyLanguageSpec(vocab_size=c.vocab_size,
                           min_frequency=c.min_frequency,
                           max_frequency=c.max_frequency,
                           token_duration=c.token_duration,
                           gap=c.gap,
                           noise_std=c.noise_std,
                           min_tokens=c.min_tokens,
                           max_tokens=c.max_tokens)


def frontend_config(config: ExperimentConfig) -> FrontEndConfig:
    f = config.frontend
    return FrontEndConfig(frame_length=f.frame_length,
                          hop=f.hop,
                          num_filters=f.num_filters)


def training_config(config: ExperimentConfig) -> TrainingConfig:
    t = config.training
    return TrainingConfig(learning_rate=t.learning_rate,
                          beta1=t.beta1,
                          beta2=t.beta2,
                          eps=t.eps,
                          epochs=t.epochs,
                          batch_size=t.batch_size,
                          hidden=config.model.hidden,
                          clip_norm=t.clip_norm,
                          target_token_error=t.target_token_error,
                          seed=config.seed)


def attack_config(config: ExperimentConfig, kind: str,
                  seed: int) -> AttackConfig:
    try:
        return AttackConfig(seed=seed,
                            **config.attack.optimiser_settings(kind))
    except TypeError as err:
        raise ConfigurationError(f"Invalid attack settings: {err}") from None


def _precisions(config: ExperimentConfig) -> List[PrecisionMode]:
    return parse_precisions(config.precisions)


def _load_model(config: ExperimentConfig) -> ModelParams:
    return load_weights(config.paths.resolve("weights"),
                        vocab_size=config.corpus.vocab_size,
                        frontend=frontend_config(config))


def _parallel_map(func: Callable, jobs: Sequence, threads: int,
                  desc: str) -> List:
    """``func`` over ``jobs`` in input order, in a process pool if threads > 1."""
    if threads > 1 and len(jobs) > 1:
        with Pool(threads) as pool:
            return list(
                tqdm(pool.imap(func, jobs),
                     total=len(jobs),
                     desc=desc,
                     bar_format=BAR_FORMAT))
    return [func(job) for job in tqdm(jobs, desc=desc, bar_format=BAR_FORMAT)]


def _safe_transcripts(args) -> List[Optional[Transcript]]:
    params, x, precisions = args
    transcripts = []
    for p in precisions:
        try:
            transcripts.append(transcribe(params, x, p))
        except NumericalOverflowError:
            transcripts.append(None)
    return transcripts


def _hypothesis(transcript: Optional[Transcript]) -> Transcript:
    # an overflowed forward pass counts as an empty transcript
    return () if transcript is None else transcript


def _score_rows(transcripts: List[List[Optional[Transcript]]],
                references: Sequence[Transcript],
                precisions: Sequence[PrecisionMode], trials: int,
                seed: int, stream: int) -> List[Tuple[str, float, float]]:
    """
    Corpus WER and SER at every precision, plus the random-precision column.

    The random column draws a precision per (trial, item) with a seed derived
    from ``(seed, stream, trial, item)`` and averages over trials. The draw is
    the one :func:`pvpASR.detector.transcribe_random` makes with that seed;
    the transcript is looked up in ``transcripts`` instead of decoding the
    item again.
    """
    rows = []
    for j, p in enumerate(precisions):
        pairs = [(_hypothesis(t[j]), r) for t, r in zip(transcripts, references)]
        rows.append((p.value, corpus_wer(pairs), ser(pairs)))
    wers, sers = [], []
    for trial in range(trials):
        pairs = []
        for i, (t, r) in enumerate(zip(transcripts, references)):
            p = draw_precision([seed, stream, trial, i], precisions)
            pairs.append((_hypothesis(t[precisions.index(p)]), r))
        wers.append(corpus_wer(pairs))
        sers.append(ser(pairs))
    rows.append((RANDOM_COLUMN, float(np.mean(wers)), float(np.mean(sers))))
    return rows


def _test_clean_slices(config: ExperimentConfig
                       ) -> Dict[str, List[Utterance]]:
    """
    Disjoint consecutive slices of the clean test split: attack carriers,
    detector calibration and detector evaluation, in that order.
    """
    utterances = load_manifest(config.paths.resolve("corpus"),
                               Split.TEST_CLEAN,
                               vocab_size=config.corpus.vocab_size)
    sizes = {
        "attack": config.attack.samples,
        "calibration": config.detector.calibration,
        "evaluation": config.detector.evaluation,
    }
    needed = sum(sizes.values())
    if len(utterances) < needed:
        raise ConfigurationError(
            f"{Split.TEST_CLEAN.value} has {len(utterances)} utterances; "
            f"attack, calibration and evaluation slices need {needed}.")
    slices, start = {}, 0
    for name, size in sizes.items():
        slices[name] = utterances[start:start + size]
        start += size
    return slices


# --- gen-data ------------------------------------------------------------------


def generate_data(config: ExperimentConfig) -> Path:
    """
    Synthesize the train and both test splits of the toy corpus.

    Returns:
        pathlib.Path: Manifest path.
    """
    counts = {
        Split.TRAIN.value: config.corpus.train,
        Split.TEST_CLEAN.value: config.corpus.test_clean,
        Split.TEST_OTHER.value: config.corpus.test_other,
    }
    manifest = generate_corpus(language_spec(config), counts, config.seed,
                               config.paths.resolve("corpus"))
    logger.info("Corpus manifest written to %s.", manifest)
    return manifest


# --- train -----------------------------------------------------------------------


def train_model(config: ExperimentConfig) -> Path:
    """
    Train the recognizer on the train split and write the weight file.

    The clean test split serves as held-out data. If the target token error
    is missed, the weights are still written before the error propagates.
    """
    corpus = config.paths.resolve("corpus")
    dataset = [(u.audio, u.reference) for u in load_manifest(
        corpus, Split.TRAIN, vocab_size=config.corpus.vocab_size)]
    validation = [(u.audio, u.reference) for u in load_manifest(
        corpus, Split.TEST_CLEAN, vocab_size=config.corpus.vocab_size)]
    weights_path = config.paths.resolve("weights")
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    logger.info("Training on %i utterances, validating on %i.", len(dataset),
                len(validation))
    try:
        params = train(dataset,
                       training_config(config),
                       vocab_size=config.corpus.vocab_size,
                       frontend=frontend_config(config),
                       validation=validation)
    except TrainingError as err:
        if err.params is not None:
            save_weights(err.params, weights_path)
            logger.warning("Weights below target saved to %s.", weights_path)
        raise
    save_weights(params, weights_path)
    logger.info("Weights saved to %s.", weights_path)
    return weights_path


# --- eval-benign -----------------------------------------------------------------


def evaluate_benign(config: ExperimentConfig) -> Path:
    """
    Benign WER and SER of both test splits at every precision, plus the
    random-precision column averaged over ``random_trials`` trials.

    Raises:
        EmptySplitError: A test split has no utterances.
    """
    params = _load_model(config)
    precisions = _precisions(config)
    digest = config_hash(config)
    rows = []
    for stream, split in enumerate((Split.TEST_CLEAN, Split.TEST_OTHER)):
        utterances = load_manifest(config.paths.resolve("corpus"),
                                   split,
                                   vocab_size=config.corpus.vocab_size)
        jobs = [(params, u.audio, precisions) for u in utterances]
        transcripts = _parallel_map(_safe_transcripts, jobs, config.threads,
                                    f"Transcribing {split.value}")
        references = [u.reference for u in utterances]
        for name, wer_value, ser_value in _score_rows(
                transcripts, references, precisions, config.random_trials,
                config.seed, _RANDOM_BENIGN_STREAM * 10 + stream):
            trials = config.random_trials if name == RANDOM_COLUMN else 1
            rows.append([
                digest, config.seed, split.value, name,
                len(utterances), trials, wer_value, ser_value
            ])
            logger.info("%s at %s: WER %.4f, SER %.4f", split.value, name,
                        wer_value, ser_value)
    path = config.paths.resolve("reports") / "benign.csv"
    write_report(path, BENIGN_HEADER, rows, "eval-benign", config)
    logger.info("Benign report written to %s.", path)
    return path


# --- attack ------------------------------------------------------------------------


def draw_targets(config: ExperimentConfig,
                 carriers: Sequence[Utterance],
                 benign: Sequence[Optional[Transcript]],
                 frames: Sequence[int]) -> List[Transcript]:
    """
    One random target per carrier; no two carriers share a target.

    Each target has a length within the corpus token bounds, differs from
    the carrier's benign transcript and fits its frame count.

    Raises:
        InfeasibleTargetError: No admissible target found for a carrier.
    """
    rng = np.random.default_rng([config.seed, _TARGET_STREAM])
    spec = config.corpus
    used = set()
    targets = []
    for utt, transcript, count in zip(carriers, benign, frames):
        for _ in range(MAX_TARGET_DRAWS):
            length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
            target = tuple(
                int(t) for t in rng.integers(0, spec.vocab_size, size=length))
            if target in used or target == transcript:
                continue
            if not is_feasible(target, count):
                continue
            break
        else:
            raise InfeasibleTargetError(
                f"No admissible target for {utt.id} after "
                f"{MAX_TARGET_DRAWS} draws.")
        used.add(target)
        targets.append(target)
    return targets


def _attack_sample(job) -> List[AdversarialRecord]:
    params, utt, target, source, kinds, configs, precisions = job
    records = []
    if "cw" in kinds or "psycho" in kinds:
        cw = cw_attack(params,
                       utt.audio,
                       target,
                       source,
                       configs["cw"],
                       utterance_id=utt.id,
                       reference=utt.reference)
        if "cw" in kinds:
            records.append(cw)
        if "psycho" in kinds:
            records.append(psychoacoustic_attack(params, cw, configs["psycho"]))
    if "adaptive" in kinds:
        records.append(
            adaptive_cw_attack(params,
                               utt.audio,
                               target,
                               configs["adaptive"],
                               precisions,
                               utterance_id=utt.id,
                               reference=utt.reference))
    return records


def _clear_records(records_path: Path) -> None:
    stale = sorted(records_path.glob("*.json")) + sorted(
        records_path.glob("*.wav"))
    if stale:
        logger.info("Removing %i files of a previous run from %s.", len(stale),
                    records_path)
    for path in stale:
        path.unlink()


def run_attacks(config: ExperimentConfig) -> Path:
    """
    Attack the carrier slice of the clean test split.

    Carrier ``i`` is attacked at source precision ``precisions[i % K]``. The
    psychoacoustic attack starts from the same carrier's C&W record; the
    adaptive attack targets every configured precision at once.

    Returns:
        pathlib.Path: Directory holding the records.
    """
    params = _load_model(config)
    precisions = _precisions(config)
    kinds = [AttackKind.parse(k).value for k in config.attack.kinds]
    carriers = _test_clean_slices(config)["attack"]
    sources = [precisions[i % len(precisions)] for i in range(len(carriers))]

    benign = []
    for utt, source in zip(carriers, sources):
        benign.append(_safe_transcripts((params, utt.audio, [source]))[0])
    frames = [params.frontend.num_frames(len(u.audio)) for u in carriers]
    targets = draw_targets(config, carriers, benign, frames)

    jobs = []
    for i, (utt, target, source) in enumerate(zip(carriers, targets, sources)):
        seed = int(
            np.random.SeedSequence([config.seed, _ATTACK_STREAM,
                                    i]).generate_state(1)[0])
        configs = {k: attack_config(config, k, seed) for k in ATTACK_KINDS}
        jobs.append((params, utt, target, source, kinds, configs, precisions))

    records_path = config.paths.resolve("records")
    records_path.mkdir(parents=True, exist_ok=True)
    _clear_records(records_path)
    results = _parallel_map(_attack_sample, jobs, config.threads, "Attacking")

    successes = {k: 0 for k in kinds}
    for i, records in enumerate(results):
        for record in records:
            kind = record.attack_kind.value
            save_record(record, records_path, f"{kind}-{i:05d}", config.seed)
            successes[kind] += int(record.success_at_source)
    for kind in kinds:
        logger.info("Attacked %i/%i samples with %s; %i succeeded.",
                    len(results), len(carriers), ATTACK_KINDS[kind],
                    successes[kind])
    return records_path


# --- eval-robust -------------------------------------------------------------------


def _record_groups(records: Sequence[AdversarialRecord],
                   precisions: Sequence[PrecisionMode]
                   ) -> List[Tuple[str, str, List[int]]]:
    """Record indices grouped by attack kind and source, in a fixed order."""
    sources = [p.value for p in precisions] + [SOURCE_ALL]
    groups = []
    for kind in AttackKind:
        for source in sources:
            members = [
                i for i, r in enumerate(records) if r.attack_kind is kind
                and str(r.source_precision) == source
            ]
            if members:
                groups.append((kind.value, source, members))
    skipped = len(records) - sum(len(members) for _, _, members in groups)
    if skipped:
        logger.warning(
            "Skipping %i records attacked at precisions outside %s.", skipped,
            [p.value for p in precisions])
    return groups


def evaluate_robust(config: ExperimentConfig) -> Path:
    """
    WER and SER of every record's adversarial transcript against its target.

    Rows cover each attack, source precision and evaluation precision, for
    all records and for the successful ones, plus the random-precision
    column. Lower values mean a stronger attack.
    """
    params = _load_model(config)
    precisions = _precisions(config)
    records = load_records(config.paths.resolve("records"))
    if not records:
        raise EmptySplitError(
            f"No adversarial records in {config.paths.resolve('records')}.")
    jobs = [(params, r.adversarial, precisions) for r in records]
    transcripts = _parallel_map(_safe_transcripts, jobs, config.threads,
                                "Transcribing records")
    digest = config_hash(config)
    rows = []
    for kind, source, members in _record_groups(records, precisions):
        subsets = {
            "all": members,
            "successful": [i for i in members if records[i].success_at_source],
        }
        for subset, indices in subsets.items():
            if not indices:
                logger.info("No %s records for %s at %s.", subset, kind, source)
                continue
            snr = float(np.mean([records[i].snr_seg_db for i in indices]))
            for name, wer_value, ser_value in _score_rows(
                [transcripts[i] for i in indices],
                [records[i].target for i in indices], precisions,
                    config.random_trials, config.seed, _RANDOM_ROBUST_STREAM):
                rows.append([
                    digest, config.seed, kind, source, subset, name,
                    len(indices), wer_value, ser_value, snr
                ])
            logger.info("%s from %s (%s, %i records): SNRseg %.2f dB",
                        ATTACK_KINDS[kind], source, subset, len(indices), snr)
    path = config.paths.resolve("reports") / "robust.csv"
    write_report(path, ROBUST_HEADER, rows, "eval-robust", config)
    logger.info("Robustness report written to %s.", path)
    return path


# --- detector ----------------------------------------------------------------------


def _diversity(job) -> float:
    params, x, precisions, variant = job
    return diversity_score(params, x, precisions, variant).value


def _scores(config: ExperimentConfig, params: ModelParams,
            signals: Sequence[AudioSignal], precisions, variant,
            desc: str) -> List[float]:
    jobs = [(params, x, precisions, variant) for x in signals]
    return _parallel_map(_diversity, jobs, config.threads, desc)


def fit_detector(config: ExperimentConfig) -> Path:
    """
    Fit the Gaussian detector on diversity scores of the calibration slice.

    Returns:
        pathlib.Path: Detector JSON path.
    """
    params = _load_model(config)
    precisions = _precisions(config)
    variant = ScoreVariant.parse(config.detector.score_variant)
    calibration = _test_clean_slices(config)["calibration"]
    scores = _scores(config, params, [u.audio for u in calibration],
                     precisions, variant, "Scoring calibration set")
    det = fit(scores, precisions, config.detector.z_threshold, variant)
    path = config.paths.resolve("detector")
    path.parent.mkdir(parents=True, exist_ok=True)
    det.save(path)
    logger.info("Detector fitted on %i utterances: mu %.6f, sigma %.6f.",
                det.calibration_size, det.mu, det.sigma)
    logger.info("Detector saved to %s.", path)
    return path


def _comparison_row(det: GaussianDetector, name: str, benign_z: List[float],
                    adversarial_z: List[float]) -> List:
    benign_fpr = float(np.mean([z > det.z_threshold for z in benign_z]))
    adversarial_tpr = float(
        np.mean([z > det.z_threshold for z in adversarial_z]))
    overflow = sum(int(np.isinf(z)) for z in benign_z + adversarial_z)
    return [
        name,
        len(benign_z),
        len(adversarial_z),
        auroc(benign_z, adversarial_z), benign_fpr, adversarial_tpr, overflow,
        det.z_threshold, det.score_variant.value
    ]


def detect(config: ExperimentConfig) -> Path:
    """
    AUROC of detector z-scores for successful adversarial records against
    the held-out benign slice.

    Comparisons: C&W, psychoacoustic, both together and adaptive records,
    each against the same benign set.

    Raises:
        ConfigurationError: The detector was fitted on other precisions.
    """
    det = GaussianDetector.load(config.paths.resolve("detector"))
    det.check_precision_set(_precisions(config))
    params = _load_model(config)
    evaluation = _test_clean_slices(config)["evaluation"]
    benign_scores = _scores(config, params, [u.audio for u in evaluation],
                            det.precision_set, det.score_variant,
                            "Scoring benign set")
    benign_z = [det.z(s) for s in benign_scores]

    records = [
        r for r in load_records(config.paths.resolve("records"))
        if r.success_at_source
    ]
    adversarial_scores = _scores(config, params,
                                 [r.adversarial for r in records],
                                 det.precision_set, det.score_variant,
                                 "Scoring adversarial set")
    by_kind = {kind: [] for kind in AttackKind}
    for record, score in zip(records, adversarial_scores):
        by_kind[record.attack_kind].append(det.z(score))

    comparisons = [
        ("cw_vs_benign", by_kind[AttackKind.CW]),
        ("psycho_vs_benign", by_kind[AttackKind.PSYCHOACOUSTIC]),
        ("both_vs_benign",
         by_kind[AttackKind.CW] + by_kind[AttackKind.PSYCHOACOUSTIC]),
        ("adaptive_vs_benign", by_kind[AttackKind.ADAPTIVE_CW]),
    ]
    digest = config_hash(config)
    rows = []
    for name, adversarial_z in comparisons:
        if not adversarial_z:
            logger.info("No successful records for %s; row skipped.", name)
            continue
        row = _comparison_row(det, name, benign_z, adversarial_z)
        rows.append([digest, config.seed] + row)
        logger.info("%s: AUROC %.4f, FPR %.4f, TPR %.4f", name, row[3], row[4],
                    row[5])
    path = config.paths.resolve("reports") / "detect.csv"
    write_report(path, DETECT_HEADER, rows, "detect", config)
    logger.info("Detection report written to %s.", path)
    return path
