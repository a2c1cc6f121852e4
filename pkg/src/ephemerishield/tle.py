"""Two-line element set parsing and serialisation.

The parser is strict: any checksum, column or range violation raises a
:class:`TleError` subclass naming the offending line and column range.
Formatting quirks found in real element sets (explicit ``+`` signs, zero
padded angle fields, the sign of a zero exponent) are captured in
:class:`TleStyle` so that ``serialize_tle(parse_tle(l1, l2)) == (l1, l2)``
byte for byte.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .constants import MU_EARTH, SECONDS_PER_DAY, TWO_PI
from .elements import Epoch, InfeasibleElementsError, OrbitalElements, wrap_angle

LINE_LENGTH = 69


class TleError(ValueError):
    """Base class for element-set format errors.

    ``line`` is 0, 1 or 2; ``columns`` is the inclusive 1-based column range.
    """

    code = "format"

    def __init__(self, message: str, line: int = 0, columns: tuple[int, int] = (0, 0)):
        self.line = line
        self.columns = columns
        where = f"line {line}, columns {columns[0]}-{columns[1]}" if columns[0] != columns[1] \
            else f"line {line}, column {columns[0]}"
        super().__init__(f"{message} ({where})")

    def to_dict(self) -> dict:
        return {"code": self.code, "line": self.line,
                "columns": list(self.columns), "message": str(self)}


class TleLengthError(TleError):
    code = "length"


class ChecksumError(TleError):
    code = "checksum"


class TleFieldError(TleError):
    code = "field"


class NoradMismatchError(TleError):
    code = "norad_mismatch"


class TleRangeError(TleError):
    code = "range"


def compute_checksum(line: str) -> int:
    """Modulo-10 checksum of the first 68 columns: digits count their value, '-' counts 1."""
    if len(line) != LINE_LENGTH - 1:
        raise TleLengthError(f"checksum needs 68 characters, got {len(line)}",
                             columns=(1, LINE_LENGTH - 1))
    total = 0
    for ch in line:
        if "0" <= ch <= "9":
            total += ord(ch) - 48
        elif ch == "-":
            total += 1
    return total % 10


@dataclass(frozen=True)
class TleStyle:
    """Textual choices that do not change any decoded value."""

    ndot_plus: str = " "
    nddot_plus: str = " "
    bstar_plus: str = " "
    nddot_zero_exp: str = "+"
    bstar_zero_exp: str = "+"
    zero_padded: tuple[str, ...] = ()


@dataclass(frozen=True)
class TleRecord:
    norad_id: int
    classification: str
    intl_designator: str
    epoch_year: int                 # two digits
    epoch_day: float
    mean_motion_dot_half: float     # rev/day^2
    mean_motion_ddot_sixth: float   # rev/day^3
    bstar: float                    # 1 / earth radii
    ephemeris_type: str
    element_set_no: int
    inclination_deg: float
    raan_deg: float
    eccentricity: float
    argp_deg: float
    mean_anomaly_deg: float
    mean_motion_rev_per_day: float
    rev_number: int
    object_name: Optional[str] = None
    style: TleStyle = field(default_factory=TleStyle)

    @property
    def full_epoch_year(self) -> int:
        return full_year(self.epoch_year)

    @property
    def epoch(self) -> Epoch:
        return Epoch.from_year_day(self.full_epoch_year, self.epoch_day)


def full_year(two_digit: int) -> int:
    """Resolve a two-digit TLE year with the 1957 pivot."""
    return 1900 + two_digit if two_digit >= 57 else 2000 + two_digit


# -- field decoding ----------------------------------------------------------

_RE_INT5 = re.compile(r"\d{5}")
_RE_EPOCH_DAY = re.compile(r"\d{3}\.\d{8}")
_RE_NDOT = re.compile(r"[ +-]\.\d{8}")
_RE_EXP = re.compile(r"[ +-]\d{5}[+-]\d")
_RE_ANGLE = re.compile(r" *\d{1,3}\.\d{4}")
_RE_MM = re.compile(r" *\d{1,2}\.\d{8}")
_RE_RIGHT_INT = re.compile(r" *\d+")
_RE_DESIGNATOR = re.compile(r"[ -~]{8}")

# (line, name, first column, last column) -- 1-based inclusive
_L1_SPACES = (2, 9, 18, 33, 44, 53, 62, 64)
_L2_SPACES = (2, 8, 17, 26, 34, 43, 52)


def _cut(line: str, start: int, end: int) -> str:
    return line[start - 1:end]


def _field(line: str, lineno: int, start: int, end: int, pattern: re.Pattern, name: str) -> str:
    text = _cut(line, start, end)
    if not pattern.fullmatch(text):
        raise TleFieldError(f"malformed {name} field {text!r}", lineno, (start, end))
    return text


def _decode_exp(text: str) -> float:
    sign = -1.0 if text[0] == "-" else 1.0
    mantissa = int(text[1:6])
    exponent = int(text[6:8])
    return sign * mantissa * 1e-5 * 10.0 ** exponent


def _check_line(line: str, lineno: int) -> None:
    if not isinstance(line, str):
        raise TleLengthError("line is not text", lineno, (1, LINE_LENGTH))
    if len(line) != LINE_LENGTH:
        raise TleLengthError(f"expected {LINE_LENGTH} characters, got {len(line)}",
                             lineno, (1, LINE_LENGTH))
    if not line.isascii() or not line.isprintable():
        raise TleFieldError("non-printable characters", lineno, (1, LINE_LENGTH))
    if line[0] != str(lineno):
        raise TleFieldError(f"line number must be {lineno}", lineno, (1, 1))
    for col in (_L1_SPACES if lineno == 1 else _L2_SPACES):
        if line[col - 1] != " ":
            raise TleFieldError("expected a blank separator", lineno, (col, col))
    digit = line[68]
    if not digit.isdigit():
        raise ChecksumError("checksum is not a digit", lineno, (69, 69))
    expected = compute_checksum(line[:68])
    if int(digit) != expected:
        raise ChecksumError(f"checksum {digit} does not match computed {expected}",
                            lineno, (69, 69))


def _padded(text: str, fmt: str, value) -> bool:
    return text.startswith("0") and text != fmt.format(value) and len(text) > 1


def parse_tle(line1: str, line2: str, line0: Optional[str] = None) -> TleRecord:
    """Decode a two-line element set, verifying both checksums."""
    _check_line(line1, 1)
    _check_line(line2, 2)

    norad1 = int(_field(line1, 1, 3, 7, _RE_INT5, "catalog number"))
    norad2 = int(_field(line2, 2, 3, 7, _RE_INT5, "catalog number"))
    if norad1 != norad2:
        raise NoradMismatchError(f"catalog number {norad2:05d} differs from line 1 ({norad1:05d})",
                                 2, (3, 7))
    if norad1 == 0:
        raise TleRangeError("catalog number must be positive", 1, (3, 7))

    classification = line1[7]
    if classification not in "UCS":
        raise TleFieldError(f"classification {classification!r} not in U/C/S", 1, (8, 8))
    designator = _field(line1, 1, 10, 17, _RE_DESIGNATOR, "international designator").rstrip()
    year = int(_field(line1, 1, 19, 20, re.compile(r"\d{2}"), "epoch year"))
    day_text = _field(line1, 1, 21, 32, _RE_EPOCH_DAY, "epoch day")
    day = float(day_text)
    if not 1.0 <= day < 367.0:
        raise TleRangeError(f"epoch day {day_text} outside [1, 367)", 1, (21, 32))
    ndot_text = _field(line1, 1, 34, 43, _RE_NDOT, "mean motion derivative")
    ndot = float("0" + ndot_text[1:])
    if ndot_text[0] == "-":
        ndot = -ndot
    nddot_text = _field(line1, 1, 45, 52, _RE_EXP, "second derivative")
    bstar_text = _field(line1, 1, 54, 61, _RE_EXP, "bstar")
    eph_type = line1[62]
    if not (eph_type.isdigit() or eph_type == " "):
        raise TleFieldError("ephemeris type must be a digit", 1, (63, 63))
    elset_text = _field(line1, 1, 65, 68, _RE_RIGHT_INT, "element set number")

    incl_text = _field(line2, 2, 9, 16, _RE_ANGLE, "inclination")
    raan_text = _field(line2, 2, 18, 25, _RE_ANGLE, "right ascension")
    ecc_text = _field(line2, 2, 27, 33, re.compile(r"\d{7}"), "eccentricity")
    argp_text = _field(line2, 2, 35, 42, _RE_ANGLE, "argument of perigee")
    ma_text = _field(line2, 2, 44, 51, _RE_ANGLE, "mean anomaly")
    mm_text = _field(line2, 2, 53, 63, _RE_MM, "mean motion")
    rev_text = _field(line2, 2, 64, 68, _RE_RIGHT_INT, "revolution number")

    incl = float(incl_text)
    if incl > 180.0:
        raise TleRangeError("inclination exceeds 180 degrees", 2, (9, 16))
    angles = {}
    for name, text, cols in (("raan", raan_text, (18, 25)), ("argp", argp_text, (35, 42)),
                             ("mean_anomaly", ma_text, (44, 51))):
        value = float(text)
        if value >= 360.0:
            raise TleRangeError(f"{name} must be below 360 degrees", 2, cols)
        angles[name] = value
    mean_motion = float(mm_text)
    if mean_motion <= 0.0:
        raise TleRangeError("mean motion must be positive", 2, (53, 63))

    padded = []
    for name, text, fmt, value in (
        ("inclination", incl_text, "{:8.4f}", incl),
        ("raan", raan_text, "{:8.4f}", angles["raan"]),
        ("argp", argp_text, "{:8.4f}", angles["argp"]),
        ("mean_anomaly", ma_text, "{:8.4f}", angles["mean_anomaly"]),
        ("mean_motion", mm_text, "{:11.8f}", mean_motion),
        ("rev_number", rev_text, "{:5d}", int(rev_text)),
        ("element_set_no", elset_text, "{:4d}", int(elset_text)),
    ):
        if _padded(text, fmt, value):
            padded.append(name)

    style = TleStyle(
        ndot_plus="+" if ndot_text[0] == "+" else " ",
        nddot_plus="+" if nddot_text[0] == "+" else " ",
        bstar_plus="+" if bstar_text[0] == "+" else " ",
        nddot_zero_exp=nddot_text[6] if nddot_text[7] == "0" else "+",
        bstar_zero_exp=bstar_text[6] if bstar_text[7] == "0" else "+",
        zero_padded=tuple(padded),
    )

    name = None
    if line0 is not None:
        name = line0[2:] if line0.startswith("0 ") else line0
        name = name.strip()
        if len(name) > 24 or not name.isprintable():
            raise TleFieldError("object name must be at most 24 printable characters", 0, (1, 24))
        name = name or None

    return TleRecord(
        norad_id=norad1,
        classification=classification,
        intl_designator=designator,
        epoch_year=year,
        epoch_day=day,
        mean_motion_dot_half=ndot,
        mean_motion_ddot_sixth=_decode_exp(nddot_text),
        bstar=_decode_exp(bstar_text),
        ephemeris_type=eph_type,
        element_set_no=int(elset_text),
        inclination_deg=incl,
        raan_deg=angles["raan"],
        eccentricity=int(ecc_text) / 1e7,
        argp_deg=angles["argp"],
        mean_anomaly_deg=angles["mean_anomaly"],
        mean_motion_rev_per_day=mean_motion,
        rev_number=int(rev_text),
        object_name=name,
        style=style,
    )


# -- serialisation -----------------------------------------------------------

def _range(ok: bool, message: str, line: int, cols: tuple[int, int]) -> None:
    if not ok:
        raise TleRangeError(message, line, cols)


def _encode_exp(value: float, plus: str, zero_exp: str, cols: tuple[int, int]) -> str:
    _range(math.isfinite(value), "value must be finite", 1, cols)
    sign = "-" if math.copysign(1.0, value) < 0 and value != 0.0 else plus
    magnitude = abs(value)
    if magnitude == 0.0:
        return f"{sign}00000{zero_exp}0"
    exponent = math.floor(math.log10(magnitude)) + 1
    mantissa = round(magnitude / 10.0 ** exponent * 1e5)
    if mantissa >= 100000:
        exponent += 1
        mantissa = round(magnitude / 10.0 ** exponent * 1e5)
    if mantissa < 10000 and exponent > -9:
        # log10 rounding put us one decade high
        exponent -= 1
        mantissa = round(magnitude / 10.0 ** exponent * 1e5)
    _range(-9 <= exponent <= 9 and 0 < mantissa < 100000,
           f"{value!r} not representable in exponent notation", 1, cols)
    exp_sign = "-" if exponent < 0 else ("+" if exponent > 0 else zero_exp)
    return f"{sign}{mantissa:05d}{exp_sign}{abs(exponent)}"


def _fmt(value, width_fmt: str, padded: bool) -> str:
    if padded:
        width_fmt = width_fmt.replace("{:", "{:0", 1)
    return width_fmt.format(value)


def serialize_tle(record: TleRecord) -> tuple[str, str]:
    """Format a record back into its two 69-column lines."""
    r = record
    st = r.style
    pad = set(st.zero_padded)

    _range(0 < r.norad_id <= 99999, "catalog number must be 1..99999", 1, (3, 7))
    _range(r.classification in ("U", "C", "S") and len(r.classification) == 1,
           "classification must be U, C or S", 1, (8, 8))
    _range(len(r.intl_designator) <= 8 and r.intl_designator.isprintable(),
           "designator longer than 8 characters", 1, (10, 17))
    _range(0 <= r.epoch_year <= 99, "epoch year must have two digits", 1, (19, 20))
    _range(1.0 <= r.epoch_day < 367.0, "epoch day outside [1, 367)", 1, (21, 32))
    day_text = f"{r.epoch_day:012.8f}"
    _range(len(day_text) == 12, "epoch day does not fit its columns", 1, (21, 32))

    _range(math.isfinite(r.mean_motion_dot_half) and abs(r.mean_motion_dot_half) < 1.0,
           "mean motion derivative must satisfy |x| < 1", 1, (34, 43))
    ndot_digits = f"{abs(r.mean_motion_dot_half):.8f}"
    _range(ndot_digits.startswith("0."), "mean motion derivative rounds to 1", 1, (34, 43))
    ndot_sign = "-" if r.mean_motion_dot_half < 0 or (
        r.mean_motion_dot_half == 0.0 and math.copysign(1.0, r.mean_motion_dot_half) < 0) \
        else st.ndot_plus
    ndot_text = ndot_sign + ndot_digits[1:]

    nddot_text = _encode_exp(r.mean_motion_ddot_sixth, st.nddot_plus, st.nddot_zero_exp, (45, 52))
    bstar_text = _encode_exp(r.bstar, st.bstar_plus, st.bstar_zero_exp, (54, 61))
    _range(len(r.ephemeris_type) == 1 and (r.ephemeris_type.isdigit() or r.ephemeris_type == " "),
           "ephemeris type must be one digit", 1, (63, 63))
    _range(0 <= r.element_set_no <= 9999, "element set number must be 0..9999", 1, (65, 68))

    _range(0.0 <= r.inclination_deg <= 180.0, "inclination outside [0, 180]", 2, (9, 16))
    for value, cols, name in ((r.raan_deg, (18, 25), "raan"), (r.argp_deg, (35, 42), "argp"),
                              (r.mean_anomaly_deg, (44, 51), "mean anomaly")):
        _range(0.0 <= value < 360.0, f"{name} outside [0, 360)", 2, cols)
        _range(f"{value:.4f}" != "360.0000", f"{name} rounds to 360", 2, cols)
    ecc = round(r.eccentricity * 1e7)
    _range(0 <= ecc <= 9999999, "eccentricity outside [0, 1)", 2, (27, 33))
    _range(math.isfinite(r.mean_motion_rev_per_day) and r.mean_motion_rev_per_day > 0.0
           and len(f"{r.mean_motion_rev_per_day:.8f}") <= 11,
           "mean motion must be in (0, 100) rev/day", 2, (53, 63))
    _range(0 <= r.rev_number <= 99999, "revolution number must be 0..99999", 2, (64, 68))

    body1 = (
        f"1 {r.norad_id:05d}{r.classification} {r.intl_designator:<8s} "
        f"{r.epoch_year:02d}{day_text} {ndot_text} {nddot_text} {bstar_text} "
        f"{r.ephemeris_type} {_fmt(r.element_set_no, '{:4d}', 'element_set_no' in pad)}"
    )
    body2 = (
        f"2 {r.norad_id:05d} "
        f"{_fmt(r.inclination_deg, '{:8.4f}', 'inclination' in pad)} "
        f"{_fmt(r.raan_deg, '{:8.4f}', 'raan' in pad)} "
        f"{ecc:07d} "
        f"{_fmt(r.argp_deg, '{:8.4f}', 'argp' in pad)} "
        f"{_fmt(r.mean_anomaly_deg, '{:8.4f}', 'mean_anomaly' in pad)} "
        f"{_fmt(r.mean_motion_rev_per_day, '{:11.8f}', 'mean_motion' in pad)}"
        f"{_fmt(r.rev_number, '{:5d}', 'rev_number' in pad)}"
    )
    assert len(body1) == 68 and len(body2) == 68, (body1, body2)
    return body1 + str(compute_checksum(body1)), body2 + str(compute_checksum(body2))


def format_tle(record: TleRecord, include_name: bool = True) -> str:
    line1, line2 = serialize_tle(record)
    lines = [line1, line2]
    if include_name and record.object_name:
        lines.insert(0, record.object_name)
    return "\n".join(lines) + "\n"


# -- conversion --------------------------------------------------------------

def mean_motion_to_sma(rev_per_day: float) -> float:
    n = rev_per_day * TWO_PI / SECONDS_PER_DAY
    return (MU_EARTH / (n * n)) ** (1.0 / 3.0)


def sma_to_mean_motion(sma_km: float) -> float:
    return math.sqrt(MU_EARTH / sma_km ** 3) * SECONDS_PER_DAY / TWO_PI


def to_orbital_elements(record: TleRecord) -> tuple[OrbitalElements, Epoch]:
    """Convert to mean elements (radians, km) and the record epoch.

    Raises :class:`InfeasibleElementsError` if the perigee lies below the
    Earth's surface.
    """
    oe = OrbitalElements.from_angles(
        mean_motion_to_sma(record.mean_motion_rev_per_day),
        record.eccentricity,
        math.radians(record.inclination_deg),
        math.radians(record.raan_deg),
        math.radians(record.argp_deg),
        math.radians(record.mean_anomaly_deg),
        record.mean_motion_dot_half,
    )
    oe.check_feasible()
    return oe, record.epoch


def from_orbital_elements(
    oe: OrbitalElements,
    epoch: Epoch,
    norad_id: int,
    *,
    classification: str = "U",
    intl_designator: str = "",
    bstar: float = 0.0,
    element_set_no: int = 999,
    rev_number: int = 0,
    object_name: Optional[str] = None,
) -> TleRecord:
    """Build a record from mean elements; values are rounded to TLE precision."""
    year, day = epoch.to_year_day()

    def deg(angle: float) -> float:
        d = round(math.degrees(wrap_angle(angle)), 4)
        return 0.0 if d >= 360.0 else d

    return TleRecord(
        norad_id=norad_id,
        classification=classification,
        intl_designator=intl_designator,
        epoch_year=year % 100,
        epoch_day=round(day, 8),
        mean_motion_dot_half=round(oe.mean_motion_dot_half, 8),
        mean_motion_ddot_sixth=0.0,
        bstar=bstar,
        ephemeris_type="0",
        element_set_no=element_set_no,
        inclination_deg=round(math.degrees(oe.inclination_rad), 4),
        raan_deg=deg(oe.raan_rad),
        eccentricity=round(oe.eccentricity, 7),
        argp_deg=deg(oe.argp_rad),
        mean_anomaly_deg=deg(oe.mean_anomaly_rad),
        mean_motion_rev_per_day=round(sma_to_mean_motion(oe.semi_major_axis_km), 8),
        rev_number=rev_number,
        object_name=object_name,
    )


def read_tle_text(text: str) -> list[TleRecord]:
    """Parse a catalog file of 2- or 3-line groups (blank lines ignored)."""
    lines = [ln.rstrip("\r\n") for ln in text.splitlines() if ln.strip()]
    records = []
    i = 0
    while i < len(lines):
        name = None
        if not lines[i].startswith("1 "):
            name = lines[i]
            i += 1
        if i + 1 >= len(lines):
            raise TleLengthError("incomplete element set at end of file", 1, (1, LINE_LENGTH))
        records.append(parse_tle(lines[i], lines[i + 1], name))
        i += 2
    return records


def iter_line_pairs(text: str) -> Iterable[tuple[str, str]]:
    lines = [ln.rstrip("\r\n") for ln in text.splitlines() if ln.strip()]
    for a, b in zip(lines, lines[1:]):
        if a.startswith("1 ") and b.startswith("2 "):
            yield a, b


__all__ = [
    "ChecksumError", "InfeasibleElementsError", "NoradMismatchError", "TleError",
    "TleFieldError", "TleLengthError", "TleRangeError", "TleRecord", "TleStyle",
    "compute_checksum", "format_tle", "from_orbital_elements", "full_year",
    "mean_motion_to_sma", "parse_tle", "read_tle_text", "serialize_tle",
    "sma_to_mean_motion", "to_orbital_elements",
]
