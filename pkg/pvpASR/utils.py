"""
Experiment configuration, config hashing and CSV report writing.
"""
import csv
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

from pvpASR import ATTACK_KINDS, __version__
from pvpASR.errors import ConfigurationError
from pvpASR.precision import parse_precisions


@dataclass
class PathsConfig:
    """Locations, relative to ``root`` unless absolute."""
    root: str = "."
    corpus: str = "corpus"
    weights: str = "model.pgw"
    records: str = "records"
    reports: str = "reports"
    detector: str = "detector.json"

    def resolve(self, name: str) -> Path:
        path = Path(getattr(self, name))
        return path if path.is_absolute() else Path(self.root) / path


@dataclass
class CorpusConfig:
    vocab_size: int = 10
    min_frequency: float = 300.0
    max_frequency: float = 3500.0
    token_duration: float = 0.12
    gap: float = 0.03
    noise_std: float = 0.01
    min_tokens: int = 2
    max_tokens: int = 8
    train: int = 1000
    test_clean: int = 500
    test_other: int = 200


@dataclass
class FrontEndSection:
    frame_length: int = 400
    hop: int = 160
    num_filters: int = 40


@dataclass
class ModelSection:
    hidden: int = 64


@dataclass
class TrainingSection:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 16
    clip_norm: float = 5.0
    target_token_error: float = 0.05


OPTIMISER_FIELDS = ("iterations", "learning_rate", "c", "c1", "c2",
                    "delta_bound", "norm_q", "poll_every", "early_stop")


@dataclass
class AttackSection:
    iterations: int = 4000
    learning_rate: float = 5e-4
    c: float = 1.0
    c1: float = 1.0
    c2: float = 0.05
    delta_bound: float = 0.02
    norm_q: str = "l2"
    poll_every: int = 50
    early_stop: bool = False
    kinds: List[str] = field(
        default_factory=lambda: ["cw", "psycho", "adaptive"])
    samples: int = 100
    # overrides applied on top of this section for the psychoacoustic stage
    psycho: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        unknown = [k for k in self.kinds if k not in ATTACK_KINDS]
        if unknown or not self.kinds:
            raise ConfigurationError(
                f"attack.kinds must be a non-empty subset of "
                f"{sorted(ATTACK_KINDS)}, got {self.kinds}.")
        if len(set(self.kinds)) != len(self.kinds):
            raise ConfigurationError(f"Duplicate attack in {self.kinds}.")
        tunable = set(OPTIMISER_FIELDS)
        bad = sorted(set(self.psycho) - tunable)
        if bad:
            raise ConfigurationError(
                f"Unknown configuration key(s) in 'attack.psycho': "
                f"{', '.join(bad)}.")

    def optimiser_settings(self, kind: str) -> Dict[str, Any]:
        """Keyword arguments of the attack optimiser for ``kind``."""
        settings = {name: getattr(self, name) for name in OPTIMISER_FIELDS}
        if kind == "psycho":
            settings.update(self.psycho)
        return settings


@dataclass
class DetectorSection:
    z_threshold: float = 3.0
    score_variant: str = "normalized_edit"
    calibration: int = 200
    evaluation: int = 200


@dataclass
class ExperimentConfig:
    """
    Fully resolved experiment settings.

    Every field has a default, so ``{}`` is a valid configuration file.
    """
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    frontend: FrontEndSection = field(default_factory=FrontEndSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    attack: AttackSection = field(default_factory=AttackSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    precisions: List[str] = field(
        default_factory=lambda: ["fp32", "fp16", "bf16"])
    seed: int = 0
    random_trials: int = 10
    threads: int = 1

    def __post_init__(self):
        counts = {
            "corpus.train": self.corpus.train,
            "corpus.test_clean": self.corpus.test_clean,
            "corpus.test_other": self.corpus.test_other,
            "attack.samples": self.attack.samples,
            "detector.calibration": self.detector.calibration,
            "detector.evaluation": self.detector.evaluation,
            "random_trials": self.random_trials,
            "threads": self.threads,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value}.")
        self.precisions = [p.value for p in parse_precisions(self.precisions)]
        if not self.precisions:
            raise ConfigurationError("At least one precision is required.")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def apply_overrides(config: ExperimentConfig,
                    seed: Optional[int] = None,
                    precisions: Optional[Sequence[str]] = None,
                    attacks: Optional[Sequence[str]] = None,
                    out: Optional[str] = None,
                    threads: Optional[int] = None) -> ExperimentConfig:
    """
    Copy of ``config`` with command-line overrides applied.

    Empty or None arguments leave the field untouched. ``out`` replaces the
    root every relative path is resolved against.
    """
    state = config.to_dict()
    if seed is not None:
        state["seed"] = int(seed)
    if precisions:
        state["precisions"] = list(precisions)
    if attacks:
        state["attack"]["kinds"] = list(attacks)
    if out is not None:
        state["paths"]["root"] = str(out)
    if threads is not None:
        state["threads"] = int(threads)
    return config_from_dict(state)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"Section '{where}' must be a JSON object.")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(
            f"Unknown configuration key(s) in '{where}': {', '.join(unknown)}.")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[
            name].default_factory is not dataclasses.MISSING else known[
                name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value,
                                  f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigurationError(f"Invalid section '{where}': {err}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config from nested dicts, rejecting unknown keys."""
    return _build(ExperimentConfig, data, "")


def load_config(path=None) -> ExperimentConfig:
    """
    Load an experiment config from a JSON file.

    Args:
        path (str): JSON file; defaults only if None.

    Returns:
        ExperimentConfig: Parsed config.

    Raises:
        ConfigurationError: Missing file, invalid JSON or unknown keys.
    """
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file {path} does not exist.")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigurationError(
                f"Cannot parse config file {path}: {err}") from None
    return config_from_dict(data)


# output location and worker count never change results
UNHASHED_FIELDS = ("paths", "threads")


def config_hash(config: ExperimentConfig) -> str:
    """First 12 hex digits of SHA-256 over the canonical JSON of ``config``."""
    state = {
        k: v
        for k, v in config.to_dict().items() if k not in UNHASHED_FIELDS
    }
    canonical = json.dumps(state, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _format(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        if value != value:
            return "nan"
        if value in (float("inf"), float("-inf")):
            return "inf" if value > 0 else "-inf"
        return "%.6f" % value
    return str(value)


def write_report(path,
                 header: Sequence[str],
                 rows: Iterable[Sequence],
                 command: str,
                 config: ExperimentConfig) -> Path:
    """
    Write a CSV report with a ``#`` JSON metadata line.

    The metadata holds the command, config hash, seed, package version and
    column names; there are no timestamps, so identical runs give identical
    files.

    Returns:
        pathlib.Path: Report path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "command": command,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "package_version": __version__,
        "columns": list(header),
    }
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("#" + json.dumps(metadata, sort_keys=True,
                                 separators=(",", ":")) + "\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(v) for v in row])
    return path


def read_report(path) -> Dict[str, Any]:
    """Parse a report written by :func:`write_report` into metadata and rows."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        first = f.readline()
        if not first.startswith("#"):
            raise ConfigurationError(f"{path} has no metadata line.")
        metadata = json.loads(first[1:])
        rows = list(csv.DictReader(f))
    return {"metadata": metadata, "rows": rows}


def shutdown(message: str, code: int = 1):
    """
    Terminates program execution with a one-line reason on standard error.

    Args:
        message (str): Reason for termination.
        code (int): Process exit code.
    """
    sys.stderr.write(f"Error: {message}\n")
    sys.exit(code)
