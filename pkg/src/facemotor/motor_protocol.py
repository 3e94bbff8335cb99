"""Motor control table, PWM normalization and the servo wire frame.

The built-in table lists all 33 actuators of the face. Intervals may be
numerically descending (motor 1 runs 1800 -> 1400); normalization is
direction-agnostic, 0 always maps to the lower-bound value and 1 to the
upper-bound value.

Servo frame layout (76 bytes, all integers little-endian)::

    offset  size  field
    0       4     magic b"MFAC"
    4       1     format version (1)
    5       1     flags (0)
    6       2     sequence number, u16
    8       66    33 x u16 PWM, ordered by motor id
    74      2     CRC-16/CCITT-FALSE over bytes 0..73, u16
"""

from __future__ import annotations

import binascii
import csv
import io
import math
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

N_MOTORS = 33
N_EXPRESSION = 26
PWM_MIN = 0
PWM_MAX = 2000

FRAME_MAGIC = b"MFAC"
FRAME_VERSION = 1
FRAME_SIZE = 76
_FRAME_HEADER = struct.Struct("<4sBBH")
_FRAME_BODY = struct.Struct("<" + "H" * N_MOTORS)

GROUPS = ("upper", "lower", "excluded")
DRIVES = ("rigid", "tendon")


class MotorTableError(ValueError):
    pass


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class MotorSpec:
    id: int
    name: str
    lower_pwm: int
    start_pwm: int
    upper_pwm: int
    drive: str = "rigid"
    group: str = "excluded"

    def __post_init__(self):
        if not 1 <= self.id <= N_MOTORS:
            raise MotorTableError(f"unknown motor id {self.id}")
        for v in (self.lower_pwm, self.start_pwm, self.upper_pwm):
            if not PWM_MIN <= v <= PWM_MAX:
                raise MotorTableError(f"motor {self.id}: PWM {v} outside [0, 2000]")
        lo, hi = sorted((self.lower_pwm, self.upper_pwm))
        if not lo <= self.start_pwm <= hi:
            raise MotorTableError(
                f"motor {self.id}: start {self.start_pwm} outside interval "
                f"[{self.lower_pwm}, {self.upper_pwm}]"
            )
        if self.drive not in DRIVES:
            raise MotorTableError(f"motor {self.id}: unknown drive {self.drive!r}")
        if self.group not in GROUPS:
            raise MotorTableError(f"motor {self.id}: unknown group {self.group!r}")
        if self.group != "excluded" and self.lower_pwm == self.upper_pwm:
            raise MotorTableError(f"motor {self.id}: empty interval")

    @property
    def is_expression(self) -> bool:
        return self.group != "excluded"

    def contains(self, pwm) -> bool:
        lo, hi = sorted((self.lower_pwm, self.upper_pwm))
        return lo <= pwm <= hi


# id, name, lower, start, upper, drive, group
# Cheeks and noses are the tendon-driven channels; eye gaze, tongue and neck
# are excluded from the expression vector.
DEFAULT_TABLE_TEXT = """\
# id,name,lower_pwm,start_pwm,upper_pwm,drive,group
1,Left Cheek,1800,1800,1400,tendon,lower
2,Left Nose,800,800,0,tendon,upper
3,Left Eyebrow Center,980,1080,1480,rigid,upper
4,Left Eyebrow Peak,1100,800,500,rigid,upper
5,Left Upper Eyelid,1700,1300,600,rigid,upper
6,Left Lower Eyelid,1000,1200,1800,rigid,upper
7,Eyes Up/Down Gaze,300,1000,1500,rigid,excluded
8,Upper Lip Center,1000,1000,600,rigid,lower
9,Left Upper Corner Mouth Movement,500,1000,1500,rigid,lower
10,Upper Lip Right,1000,1000,1200,rigid,lower
11,Tongue Extension/Retraction,800,1000,1200,rigid,excluded
12,Tongue Up/Down,800,500,300,rigid,excluded
13,Chin (passive),1200,1600,1600,rigid,lower
14,Left Lower Corner Mouth Movement,1000,1000,1500,rigid,lower
15,Lower Lip Center,1300,1300,1900,rigid,lower
16,Lower Lip Left,1500,1500,800,rigid,lower
17,Lower Lip Right,800,800,1200,rigid,lower
18,Chin (active),1200,1600,1600,rigid,lower
19,Right Lower Corner Mouth Movement,1000,1000,500,rigid,lower
20,Jaw Left/Right,400,1000,1600,rigid,lower
21,Upper Lip Left,1000,1000,800,rigid,lower
22,Right Upper Corner Mouth Movement,1500,1000,500,rigid,lower
23,Mouth Opening/Closing,1150,1050,1050,rigid,lower
24,Eyes Left/Right Gaze,800,1150,1500,rigid,excluded
25,Right Lower Eyelid,1200,1000,400,rigid,upper
26,Right Upper Eyelid,500,1000,1600,rigid,upper
27,Right Eyebrow Peak,900,1200,1500,rigid,upper
28,Right Eyebrow Center,1300,1200,800,rigid,upper
29,Right Nose,1200,1200,2000,tendon,upper
30,Right Cheek,0,0,600,tendon,lower
31,Neck Rotation,1500,1750,2000,rigid,excluded
32,Neck Nodding/Shaking (left),900,1200,1300,rigid,excluded
33,Neck Nodding/Shaking (right),1200,900,800,rigid,excluded
"""


@dataclass(frozen=True)
class MotorSpecTable:
    specs: tuple

    def __post_init__(self):
        ids = [s.id for s in self.specs]
        if ids != list(range(1, N_MOTORS + 1)):
            missing = sorted(set(range(1, N_MOTORS + 1)) - set(ids))
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise MotorTableError(
                f"motor ids must be exactly 1..{N_MOTORS} in order "
                f"(missing={missing}, duplicate={dupes})"
            )
        n_expr = sum(s.is_expression for s in self.specs)
        if n_expr != N_EXPRESSION:
            raise MotorTableError(
                f"expected {N_EXPRESSION} expression motors, got {n_expr}"
            )

    def __getitem__(self, motor_id: int) -> MotorSpec:
        if not 1 <= motor_id <= N_MOTORS:
            raise KeyError(f"unknown motor id {motor_id}")
        return self.specs[motor_id - 1]

    def __iter__(self):
        return iter(self.specs)

    def __len__(self):
        return len(self.specs)

    @property
    def expression_specs(self) -> list[MotorSpec]:
        """The 26 motors forming a MotorVector, ordered by id."""
        return [s for s in self.specs if s.is_expression]

    @property
    def expression_ids(self) -> list[int]:
        return [s.id for s in self.expression_specs]

    def group_labels(self) -> list[str]:
        """Upper/lower label for each MotorVector component."""
        return [s.group for s in self.expression_specs]

    def neutral_vector(self) -> np.ndarray:
        """Normalized start values of the expression motors."""
        return np.array([normalize(s.start_pwm, s) for s in self.expression_specs])

    def to_full_command(self, motor) -> list[int]:
        """Expand a normalized 26-vector to 33 PWMs; excluded motors hold start."""
        motor = check_motor_vector(motor)
        out = [s.start_pwm for s in self.specs]
        for value, spec in zip(motor, self.expression_specs):
            out[spec.id - 1] = denormalize(float(value), spec)
        return out

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write("# id,name,lower_pwm,start_pwm,upper_pwm,drive,group\n")
        w = csv.writer(buf, lineterminator="\n")
        for s in self.specs:
            w.writerow([s.id, s.name, s.lower_pwm, s.start_pwm, s.upper_pwm, s.drive, s.group])
        return buf.getvalue()


def load_spec_table(source: str | None = None) -> MotorSpecTable:
    """Parse a motor table from CSV text (column order as DEFAULT_TABLE_TEXT).

    ``drive`` and ``group`` columns are optional and default to ``rigid`` and
    ``excluded``. With no source the built-in table is returned.
    """
    if source is None:
        source = DEFAULT_TABLE_TEXT
    rows = []
    lines = [ln for ln in source.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    for rec in csv.reader(lines):
        rec = [f.strip() for f in rec]
        if len(rec) < 5:
            raise MotorTableError(f"malformed row {rec!r}")
        try:
            mid, lower, start, upper = int(rec[0]), int(rec[2]), int(rec[3]), int(rec[4])
        except ValueError as exc:
            raise MotorTableError(f"non-integer field in row {rec!r}") from exc
        if not 1 <= mid <= N_MOTORS:
            raise MotorTableError(f"unknown motor id {mid}")
        drive = rec[5] if len(rec) > 5 and rec[5] else "rigid"
        group = rec[6] if len(rec) > 6 and rec[6] else "excluded"
        rows.append(MotorSpec(mid, rec[1], lower, start, upper, drive, group))
    rows.sort(key=lambda s: s.id)
    return MotorSpecTable(tuple(rows))


_DEFAULT = None


def default_table() -> MotorSpecTable:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_spec_table()
    return _DEFAULT


def normalize(pwm, spec: MotorSpec) -> float:
    if not spec.contains(pwm):
        raise ValueError(
            f"PWM {pwm} outside motor {spec.id} interval [{spec.lower_pwm}, {spec.upper_pwm}]"
        )
    return (pwm - spec.lower_pwm) / (spec.upper_pwm - spec.lower_pwm)


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def denormalize(value: float, spec: MotorSpec) -> int:
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise ValueError(f"normalized value {value} outside [0, 1]")
    return _round_half_away(spec.lower_pwm + value * (spec.upper_pwm - spec.lower_pwm))


def check_motor_vector(motor, n: int = N_EXPRESSION) -> np.ndarray:
    """Validate a normalized command vector; returns a float64 copy."""
    p = np.asarray(motor, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"expected motor vector of shape ({n},), got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite command")
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("motor command outside [0, 1]")
    return p.copy()


def clamp_to_limits(motor) -> np.ndarray:
    p = np.asarray(motor, dtype=float)
    if p.shape[-1:] != (N_EXPRESSION,):
        raise ValueError(f"expected {N_EXPRESSION} commands, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite command")
    return np.clip(p, 0.0, 1.0)


def crc16_ccitt_false(data: bytes) -> int:
    # crc_hqx is poly 0x1021, MSB-first, no final xor; init 0xFFFF gives CCITT-FALSE
    return binascii.crc_hqx(data, 0xFFFF)


def encode_servo_frame(full_command: Sequence[int], sequence_no: int) -> bytes:
    cmd = list(full_command)
    if len(cmd) != N_MOTORS:
        raise FrameError(f"expected {N_MOTORS} channels, got {len(cmd)}")
    for i, v in enumerate(cmd):
        if int(v) != v or not PWM_MIN <= v <= PWM_MAX:
            raise FrameError(f"channel {i + 1}: PWM {v} outside [0, 2000]")
    if not 0 <= sequence_no <= 0xFFFF:
        raise FrameError(f"sequence number {sequence_no} does not fit u16")
    body = _FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, 0, sequence_no)
    body += _FRAME_BODY.pack(*(int(v) for v in cmd))
    return body + struct.pack("<H", crc16_ccitt_false(body))


def decode_servo_frame(frame: bytes) -> tuple[list[int], int]:
    """Inverse of :func:`encode_servo_frame`; returns (pwms, sequence_no)."""
    if len(frame) != FRAME_SIZE:
        raise FrameError(f"expected {FRAME_SIZE} bytes, got {len(frame)}")
    (crc,) = struct.unpack_from("<H", frame, FRAME_SIZE - 2)
    if crc != crc16_ccitt_false(frame[: FRAME_SIZE - 2]):
        raise FrameError("CRC mismatch")
    magic, version, flags, seq = _FRAME_HEADER.unpack_from(frame, 0)
    if magic != FRAME_MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != FRAME_VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if flags != 0:
        raise FrameError(f"unknown flags {flags:#x}")
    pwms = list(_FRAME_BODY.unpack_from(frame, _FRAME_HEADER.size))
    if any(v > PWM_MAX for v in pwms):
        raise FrameError("PWM out of range")
    return pwms, seq


def iter_frames(data: bytes) -> Iterable[tuple[list[int], int]]:
    if len(data) % FRAME_SIZE:
        raise FrameError("stream length is not a multiple of the frame size")
    for off in range(0, len(data), FRAME_SIZE):
        yield decode_servo_frame(data[off : off + FRAME_SIZE])
