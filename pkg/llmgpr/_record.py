"""Helpers for `llmgpr.record` module."""

import re
from typing import Any, Optional, cast

import numpy

# -----------------------------------------------------------------------------
# regular expressions
# -----------------------------------------------------------------------------
"""Regexp for float data in TSV files."""
FLOAT = r"[+-]?(?:\d+\.\d*|\d+|\.\d+)(?:[eE][+-]?\d+)?"
"""Regexp for integer data in TSV files."""
INT = r"[+-]?\d+"
"""Regexp for opaque identifiers (anything without tabs or line breaks)."""
ID = r"[^\t\r\n]*[^\t\r\n ]"
"""Regexp for free text fields, possibly empty."""
TEXT = r"[^\t\r\n]*"
"""Regexp for a comma-separated list of identifiers."""
ID_LIST = r"[^\t\r\n,]+(?:,[^\t\r\n,]+)*"
"""Regexp for field separators."""
SEP = r"\t"
"""Regexp for line tails, allowing trailing whitespace."""
TAIL = r"[ \r]*"

"""Compiled regexp for int data in TSV files."""
RE_INT = re.compile("^" + INT + "$")
"""Compiled regexp for float data in TSV files."""
RE_FLOAT = re.compile("^" + FLOAT + "$")


def cap(regexp: str, name: str) -> str:
    """Return capture-pattern of REGEXP string."""
    return "(?P<{}>{})".format(name, regexp)


def possible(regexp: str) -> str:
    """Return possible pattern ```?``` of REGEXP string."""
    return "(?:{})?".format(regexp)


# -----------------------------------------------------------------------------
# other utility
# -----------------------------------------------------------------------------
def to_number(v: Any) -> float:
    """Convert any object to float or int depending on the expression."""
    if isinstance(v, float) or isinstance(v, int):
        return v
    elif isinstance(v, str):
        if RE_INT.match(v):
            return int(v)
        elif RE_FLOAT.match(v):
            return float(v)
        raise ValueError("to_number failed: %s" % v)
    elif isinstance(v, numpy.ndarray) and v.ndim == 0:
        return cast(float, v.__pos__())
    elif isinstance(v, numpy.generic):
        return cast(float, v.item())
    else:
        return to_number(str(v))


def number_to_str(v: float, float_format: str = ".6f") -> str:
    """Convert int or float to string."""
    if isinstance(v, (int, numpy.integer)):
        return "{:d}".format(int(v))
    elif isinstance(v, (float, numpy.floating)):
        if v == 0:
            v = 0.0  # convert -0.0 to +0.0
        return ("{:" + float_format + "}").format(float(v))
    else:
        raise TypeError(v)


def optional_text(v: Optional[str]) -> Optional[str]:
    """Return None for empty fields, otherwise the stripped text."""
    if v is None:
        return None
    v = v.strip()
    return v or None
