import logging
import sys

import click
from click._compat import get_text_stderr
from click.exceptions import ClickException, UsageError
from click.utils import echo

from pvpASR import ATTACK_KINDS, PRECISION_NAMES, __version__, pipeline
from pvpASR.errors import RUNTIME_ERRORS, USAGE_ERRORS
from pvpASR.utils import (ExperimentConfig, apply_overrides, config_hash,
                          load_config, shutdown)

logger = logging.getLogger(__name__)
handler = logging.StreamHandler(sys.stdout)
formatter = logging.Formatter(
    '[%(asctime)s] %(module)s.%(funcName)s %(levelname)s: %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S')
handler.setFormatter(formatter)
logger.addHandler(handler)
logger.setLevel(logging.INFO)


def _show_usage_error(self, file=None):
    if file is None:
        file = get_text_stderr()
    color = None
    if self.ctx is not None:
        color = self.ctx.color
        echo(self.ctx.get_help() + '\n', file=file, color=color)
    echo('Error: %s' % self.format_message(), file=file, color=color)


UsageError.show = _show_usage_error


def experiment_options(func):
    """Options shared by every subcommand."""
    options = [
        click.option(
            "-c",
            "--config",
            default=None,
            type=click.Path(exists=False, dir_okay=False),
            help="JSON experiment config. Defaults apply if omitted.",
        ),
        click.option(
            "-s",
            "--seed",
            default=None,
            type=click.IntRange(min=0),
            help="Override the experiment seed.",
        ),
        click.option(
            "-p",
            "--precision",
            "precisions",
            default=None,
            type=click.Choice(list(PRECISION_NAMES)),
            multiple=True,
            help="Precisions to use; repeat to give several. "
            "Default is the config list.",
        ),
        click.option(
            "-o",
            "--out",
            default=None,
            type=click.Path(file_okay=False),
            help="Root folder every relative path is resolved against.",
        ),
        click.option(
            "-t",
            "--threads",
            default=None,
            type=click.IntRange(min=1),
            help="Number of worker processes. Default is the config value.",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _resolve(config, seed, precisions, out, threads,
             attacks=None) -> ExperimentConfig:
    return apply_overrides(load_config(config),
                           seed=seed,
                           precisions=precisions,
                           attacks=attacks,
                           out=out,
                           threads=threads)


def _log_parameters(config_path, config: ExperimentConfig):
    logger.info("Command parameters:")
    logger.info("Config:                       %s", config_path)
    logger.info("Config hash:                  %s", config_hash(config))
    logger.info("Seed:                         %s", config.seed)
    logger.info("Precisions:                   %s", config.precisions)
    logger.info("Root:                         %s", config.paths.root)
    logger.info("Threads:                      %s", config.threads)


@click.group()
@click.option("--debug/--no-debug", default=False)
@click.version_option(version=__version__)
def main(debug):
    """pvpASR"""

    loggers = [
        logging.getLogger(name) for name in logging.root.manager.loggerDict
    ]
    for log in loggers:
        if debug:
            log.setLevel(logging.DEBUG)
        else:
            log.setLevel(logging.INFO)


@main.command()
@experiment_options
def gen_data(config, seed, precisions, out, threads):
    """Synthesize the toy-language corpus (WAV files and manifest)."""
    cfg = _resolve(config, seed, precisions, out, threads)
    _log_parameters(config, cfg)
    logger.info("Corpus:                       %s", cfg.paths.resolve("corpus"))
    logger.info("Train utterances:             %s", cfg.corpus.train)
    logger.info("Clean test utterances:        %s", cfg.corpus.test_clean)
    logger.info("Noisy test utterances:        %s", cfg.corpus.test_other)
    return pipeline.generate_data(cfg)


@main.command()
@experiment_options
def train(config, seed, precisions, out, threads):
    """Train the recognizer in FP32 and write its weight file."""
    cfg = _resolve(config, seed, precisions, out, threads)
    _log_parameters(config, cfg)
    logger.info("Weights:                      %s", cfg.paths.resolve("weights"))
    logger.info("Hidden size:                  %s", cfg.model.hidden)
    logger.info("Epochs:                       %s", cfg.training.epochs)
    logger.info("Batch size:                   %s", cfg.training.batch_size)
    logger.info("Learning rate:                %s", cfg.training.learning_rate)
    return pipeline.train_model(cfg)


@main.command()
@experiment_options
def eval_benign(config, seed, precisions, out, threads):
    """Benign WER/SER per inference precision and under random precision."""
    cfg = _resolve(config, seed, precisions, out, threads)
    _log_parameters(config, cfg)
    logger.info("Random trials:                %s", cfg.random_trials)
    return pipeline.evaluate_benign(cfg)


@main.command()
@experiment_options
@click.option(
    "-a",
    "--attack",
    "attacks",
    default=None,
    type=click.Choice(list(ATTACK_KINDS)),
    multiple=True,
    help="Attacks to run; repeat to give several. Default is the config list.",
)
def attack(config, seed, precisions, out, threads, attacks):
    """Generate targeted adversarial examples from the clean test split."""
    cfg = _resolve(config, seed, precisions, out, threads, attacks)
    _log_parameters(config, cfg)
    logger.info("Attacks:                      %s", cfg.attack.kinds)
    logger.info("Samples:                      %s", cfg.attack.samples)
    logger.info("Iterations:                   %s", cfg.attack.iterations)
    logger.info("Learning rate:                %s", cfg.attack.learning_rate)
    logger.info("Delta bound:                  %s", cfg.attack.delta_bound)
    logger.info("Records:                      %s", cfg.paths.resolve("records"))
    return pipeline.run_attacks(cfg)


@main.command()
@experiment_options
def eval_robust(config, seed, precisions, out, threads):
    """Target WER/SER of adversarial records at every precision."""
    cfg = _resolve(config, seed, precisions, out, threads)
    _log_parameters(config, cfg)
    logger.info("Records:                      %s", cfg.paths.resolve("records"))
    logger.info("Random trials:                %s", cfg.random_trials)
    return pipeline.evaluate_robust(cfg)


@main.command()
@experiment_options
def fit_detector(config, seed, precisions, out, threads):
    """Fit the precision-diversity detector on benign calibration audio."""
    cfg = _resolve(config, seed, precisions, out, threads)
    _log_parameters(config, cfg)
    logger.info("Calibration utterances:       %s", cfg.detector.calibration)
    logger.info("Score variant:                %s", cfg.detector.score_variant)
    logger.info("Z threshold:                  %s", cfg.detector.z_threshold)
    return pipeline.fit_detector(cfg)


@main.command()
@experiment_options
def detect(config, seed, precisions, out, threads):
    """AUROC of the detector on adversarial records against benign audio."""
    cfg = _resolve(config, seed, precisions, out, threads)
    _log_parameters(config, cfg)
    logger.info("Detector:                     %s", cfg.paths.resolve("detector"))
    logger.info("Evaluation utterances:        %s", cfg.detector.evaluation)
    return pipeline.detect(cfg)


def entry_point(argv=None) -> int:
    """
    Run the command line and map failures to exit codes.

    Returns 0 on success. Usage and configuration errors exit with 1, runtime
    and numerical errors with 2, each with one line on standard error.
    """
    try:
        rv = main.main(args=argv, prog_name="pvpASR", standalone_mode=False)
    except UsageError as err:
        err.show()
        return 1
    except ClickException as err:
        shutdown(err.format_message(), 1)
    except click.exceptions.Abort:
        shutdown("Aborted.", 1)
    except USAGE_ERRORS as err:
        shutdown(str(err), 1)
    except RUNTIME_ERRORS as err:
        shutdown(str(err), 2)
    return rv if isinstance(rv, int) and not isinstance(rv, bool) else 0


if __name__ == "__main__":
    sys.exit(entry_point())
