"""
Software emulation of the three inference number formats.

Values in reduced precision are stored as binary32 bit patterns that are
exactly representable in the target format ("fake quantization"). All
conversions round to nearest, ties to even.

Example:

    >>> import numpy as np
    >>> from pvpASR.precision import PrecisionMode, quantize_buffer
    >>> quantize_buffer(np.array([1.0009765625], dtype=np.float32), PrecisionMode.BF16)
    array([1.], dtype=float32)
"""
from enum import Enum
from typing import Iterable, List, Union

import numpy as np

from pvpASR.errors import ConfigurationError

_SIGN_MASK = np.uint32(0x80000000)
_ABS_MASK = np.uint32(0x7FFFFFFF)
_EXP_MASK = np.uint32(0x7F800000)
_CANONICAL_NAN = np.uint32(0x7FC00000)
_BF16_KEEP = np.uint32(0xFFFF0000)


class PrecisionMode(str, Enum):
    """
    Numeric format used to evaluate the model.

    The string value is the serialized form used in config files,
    CLI flags and reports.
    """
    FP32 = "fp32"
    FP16 = "fp16"
    BF16 = "bf16"

    def __str__(self) -> str:
        return self.value

    @property
    def exponent_bits(self) -> int:
        return {"fp32": 8, "fp16": 5, "bf16": 8}[self.value]

    @property
    def mantissa_bits(self) -> int:
        return {"fp32": 23, "fp16": 10, "bf16": 7}[self.value]

    @property
    def max_finite(self) -> float:
        """Largest finite value of the format."""
        bias = 2**(self.exponent_bits - 1) - 1
        return float((2 - 2.0**-self.mantissa_bits) * 2.0**bias)

    @property
    def eps(self) -> float:
        """Distance from 1.0 to the next representable value."""
        return 2.0**-self.mantissa_bits

    @classmethod
    def parse(cls, value: Union[str, "PrecisionMode"]) -> "PrecisionMode":
        """
        Parse a precision name.

        Args:
            value (str): One of "fp32", "fp16", "bf16" (case-insensitive).

        Returns:
            PrecisionMode: Parsed mode.

        Raises:
            ConfigurationError: Unknown precision name.
        """
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(
                f"Unknown precision '{value}'. Expected one of "
                f"{[m.value for m in cls]}.") from None


ALL_PRECISIONS: List[PrecisionMode] = [
    PrecisionMode.FP32, PrecisionMode.FP16, PrecisionMode.BF16
]


def parse_precisions(values: Iterable[Union[str, PrecisionMode]]
                     ) -> List[PrecisionMode]:
    """Parse a list of precision names, keeping order and rejecting duplicates."""
    modes = [PrecisionMode.parse(v) for v in values]
    if len(set(modes)) != len(modes):
        raise ConfigurationError(f"Duplicate precision in {list(values)}.")
    return modes


def _to_bf16(values: np.ndarray) -> np.ndarray:
    bits = values.view(np.uint32)
    is_nan = (bits & _ABS_MASK) > _EXP_MASK
    # round to nearest even on the upper 16 bits; a carry into the exponent
    # handles mantissa overflow and rounding to infinity
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    with np.errstate(over="ignore"):
        rounded = (bits + np.uint32(0x7FFF) + lsb) & _BF16_KEEP
    rounded = np.where(is_nan, (bits & _SIGN_MASK) | _CANONICAL_NAN, rounded)
    return rounded.astype(np.uint32).view(np.float32)


def _to_fp16(values: np.ndarray) -> np.ndarray:
    # numpy's float32 -> float16 cast is IEEE round-to-nearest-even
    # including subnormals and overflow to infinity
    with np.errstate(over="ignore", invalid="ignore"):
        out = values.astype(np.float16).astype(np.float32)
    bits = values.view(np.uint32)
    is_nan = (bits & _ABS_MASK) > _EXP_MASK
    if is_nan.any():
        out_bits = out.view(np.uint32).copy()
        out_bits[is_nan] = (bits[is_nan] & _SIGN_MASK) | _CANONICAL_NAN
        out = out_bits.view(np.float32)
    return out


def quantize_buffer(values, mode: PrecisionMode) -> np.ndarray:
    """
    Round every element to the nearest value representable in ``mode``.

    Args:
        values (np.ndarray): Any array, converted to binary32 first.
        mode (PrecisionMode): Target format.

    Returns:
        np.ndarray: New float32 array of the same shape. FP32 returns an
        unchanged copy.
    """
    arr = np.array(values, dtype=np.float32, copy=True)
    if arr.size == 0:
        return arr
    shape = arr.shape
    flat = np.ascontiguousarray(arr).reshape(-1)
    mode = PrecisionMode.parse(mode)
    if mode is PrecisionMode.FP32:
        out = flat
    elif mode is PrecisionMode.FP16:
        out = _to_fp16(flat)
    else:
        out = _to_bf16(flat)
    return out.reshape(shape)


def quantize(value, mode: PrecisionMode) -> np.float32:
    """
    Scalar form of :func:`quantize_buffer`.

    Args:
        value (float): A number, converted to binary32.
        mode (PrecisionMode): Target format.

    Returns:
        np.float32: Nearest representable value, ties to even.
    """
    return quantize_buffer(np.array([value], dtype=np.float32), mode)[0]


def is_representable(values, mode: PrecisionMode) -> bool:
    """Check that quantizing ``values`` to ``mode`` changes no bit (NaN excluded)."""
    arr = np.asarray(values, dtype=np.float32)
    q = quantize_buffer(arr, mode)
    finite_or_inf = ~np.isnan(arr)
    return bool(
        np.array_equal(
            arr[finite_or_inf].view(np.uint32),
            q[finite_or_inf].view(np.uint32)))
