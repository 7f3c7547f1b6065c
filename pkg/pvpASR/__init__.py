__version__ = "0.1.0"
__author__ = "pvpASR developers"
__licencse__ = "BSD-3-Clause"

PRECISION_NAMES = {
    "fp32": "IEEE-754 binary32",
    "fp16": "IEEE-754 binary16",
    "bf16": "bfloat16",
}

ATTACK_KINDS = {
    "cw": "C&W",
    "psycho": "Psychoacoustic",
    "adaptive": "AdaptiveCW",
}

BAR_FORMAT = "{l_bar}{bar}| {n_fmt}/{total_fmt} [{elapsed}], {rate_fmt}{postfix}"

BENIGN_HEADER = [
    'config_hash', 'seed', 'split', 'precision', 'utterances', 'trials',
    'wer', 'ser'
]
ROBUST_HEADER = [
    'config_hash', 'seed', 'attack', 'source_precision', 'subset',
    'eval_precision', 'records', 'target_wer', 'target_ser', 'snr_seg_db'
]
DETECT_HEADER = [
    'config_hash', 'seed', 'comparison', 'benign', 'adversarial', 'auroc',
    'benign_fpr', 'adversarial_tpr', 'overflow_flagged', 'z_threshold',
    'score_variant'
]

__all__ = [
    "__version__",
    "BAR_FORMAT",
    "BENIGN_HEADER",
    "ROBUST_HEADER",
    "DETECT_HEADER",
]
