"""Minimal DICOM Part-10 reader/writer for uncompressed CT slices.

Supports Explicit and Implicit VR Little Endian transfer syntaxes only.
Every malformed input maps to a typed :class:`DicomError`; nothing else
escapes :func:`parse_slice`.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC_OFFSET = 128
MAGIC = b"DICM"

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LE = "1.2.840.10008.1.2"

CT_SOP_CLASS_UID = "1.2.840.10008.5.1.4.1.1.2"
IMPLEMENTATION_UID = "1.2.826.0.1.3680043.10.1242.1"
UID_ROOT = "1.2.826.0.1.3680043.10.1242.2."

UNDEFINED_LENGTH = 0xFFFFFFFF

TAG_PATIENT_ID = (0x0010, 0x0020)
TAG_INSTANCE_NUMBER = (0x0020, 0x0013)
TAG_SLICE_LOCATION = (0x0020, 0x1041)
TAG_ROWS = (0x0028, 0x0010)
TAG_COLUMNS = (0x0028, 0x0011)
TAG_BITS_ALLOCATED = (0x0028, 0x0100)
TAG_PIXEL_REPRESENTATION = (0x0028, 0x0103)
TAG_RESCALE_INTERCEPT = (0x0028, 0x1052)
TAG_RESCALE_SLOPE = (0x0028, 0x1053)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)
TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)

# VRs whose explicit encoding uses a 2-byte reserved field + 4-byte length.
_LONG_VRS = {b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN"}


class DicomError(Exception):
    """Base class for every failure this codec can raise."""


class MissingMagic(DicomError):
    """No DICM marker at offset 128."""


class UnsupportedTransferSyntax(DicomError):
    """Compressed, big-endian, or sequence-encapsulated content."""


class MissingRequiredTag(DicomError):
    def __init__(self, tag: tuple[int, int]):
        self.tag = tag
        super().__init__(f"required tag ({tag[0]:04X},{tag[1]:04X}) absent")


class PixelLengthMismatch(DicomError):
    """PixelData length disagrees with rows*cols*2."""


class MalformedDicom(DicomError):
    """Structurally broken stream: truncated headers, bad values."""


class InvalidSlice(DicomError):
    """DicomSlice constructed with out-of-contract field values."""


class EmptyVolume(DicomError):
    """Directory holds no parseable slice."""


class InconsistentGeometry(DicomError):
    """Slices of one volume disagree on rows/cols."""


class MixedPatients(DicomError):
    """Slices of one volume carry different PatientIDs."""


@dataclass(frozen=True)
class DicomSlice:
    """One decoded CT slice with the tags this toolkit consumes."""

    patient_id: str
    instance_number: int
    rows: int
    cols: int
    pixel_representation: int
    rescale_slope: float
    rescale_intercept: float
    stored_pixels: np.ndarray = field(repr=False)
    slice_location: float | None = None

    def __post_init__(self):
        if not self.patient_id or not self.patient_id.isascii():
            raise InvalidSlice("patient_id must be non-empty ascii")
        if self.instance_number < 0:
            raise InvalidSlice("negative instance_number")
        if self.rows < 1 or self.cols < 1:
            raise InvalidSlice("rows/cols must be >= 1")
        if self.pixel_representation not in (0, 1):
            raise InvalidSlice("pixel_representation must be 0 or 1")
        if not math.isfinite(self.rescale_slope) or self.rescale_slope == 0:
            raise InvalidSlice("rescale_slope must be finite and nonzero")
        if not math.isfinite(self.rescale_intercept):
            raise InvalidSlice("rescale_intercept must be finite")
        if self.slice_location is not None and not math.isfinite(self.slice_location):
            raise InvalidSlice("slice_location must be finite")
        want = np.int16 if self.pixel_representation == 1 else np.uint16
        px = self.stored_pixels
        if px.dtype != want:
            raise InvalidSlice(f"stored_pixels dtype {px.dtype} mismatches representation")
        if px.shape != (self.rows, self.cols):
            raise InvalidSlice("stored_pixels shape mismatches rows/cols")

    def __eq__(self, other):
        if not isinstance(other, DicomSlice):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.instance_number == other.instance_number
            and self.rows == other.rows
            and self.cols == other.cols
            and self.pixel_representation == other.pixel_representation
            and self.rescale_slope == other.rescale_slope
            and self.rescale_intercept == other.rescale_intercept
            and self.slice_location == other.slice_location
            and np.array_equal(self.stored_pixels, other.stored_pixels)
        )


@dataclass(frozen=True)
class ScanVolume:
    """Ordered slices of a single patient with uniform geometry."""

    patient_id: str
    slices: tuple[DicomSlice, ...]

    @property
    def rows(self) -> int:
        return self.slices[0].rows

    @property
    def cols(self) -> int:
        return self.slices[0].cols

    def __len__(self) -> int:
        return len(self.slices)


class _Reader:
    """Bounds-checked little-endian cursor over a byte buffer."""

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.remaining() < n:
            raise MalformedDicom(f"truncated at offset {self.pos}: need {n} bytes")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def skip(self, n: int) -> None:
        if n < 0 or self.remaining() < n:
            raise MalformedDicom(f"skip past end at offset {self.pos}")
        self.pos += n

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_element(r: _Reader, explicit: bool) -> tuple[tuple[int, int], bytes | None, int]:
    """Read one element header and its value.

    Returns (tag, value, length). value is None for skipped sequences.
    """
    group = r.u16()
    element = r.u16()
    tag = (group, element)
    if explicit:
        vr = r.take(2)
        if vr in _LONG_VRS:
            r.skip(2)
            length = r.u32()
            if vr == b"SQ" or length == UNDEFINED_LENGTH:
                if length == UNDEFINED_LENGTH:
                    raise UnsupportedTransferSyntax(
                        f"undefined-length element ({group:04X},{element:04X})"
                    )
                r.skip(length)
                return tag, None, length
        else:
            length = r.u16()
    else:
        length = r.u32()
        if length == UNDEFINED_LENGTH:
            raise UnsupportedTransferSyntax(
                f"undefined-length element ({group:04X},{element:04X})"
            )
    if tag == TAG_PIXEL_DATA and length > r.remaining():
        raise PixelLengthMismatch(
            f"PixelData declares {length} bytes, {r.remaining()} remain"
        )
    return tag, r.take(length), length


def _ascii(value: bytes) -> str:
    try:
        return value.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedDicom(f"non-ascii text value: {value[:20]!r}") from exc


def _text(value: bytes) -> str:
    return _ascii(value).rstrip(" \x00")


def _decimal(value: bytes, tag: tuple[int, int]) -> float:
    s = _text(value).strip()
    try:
        return float(s)
    except ValueError as exc:
        raise MalformedDicom(f"bad decimal string {s!r} in ({tag[0]:04X},{tag[1]:04X})") from exc


def _integer(value: bytes, tag: tuple[int, int]) -> int:
    s = _text(value).strip()
    try:
        return int(s)
    except ValueError as exc:
        raise MalformedDicom(f"bad integer string {s!r} in ({tag[0]:04X},{tag[1]:04X})") from exc


def _ushort(value: bytes, tag: tuple[int, int]) -> int:
    if len(value) != 2:
        raise MalformedDicom(f"({tag[0]:04X},{tag[1]:04X}) wants 2 bytes, got {len(value)}")
    return struct.unpack("<H", value)[0]


def parse_slice(data: bytes) -> DicomSlice:
    """Decode one Part-10 file into a DicomSlice.

    Raises MissingMagic, UnsupportedTransferSyntax, MissingRequiredTag,
    PixelLengthMismatch, or MalformedDicom.
    """
    if len(data) < MAGIC_OFFSET + 4 or data[MAGIC_OFFSET : MAGIC_OFFSET + 4] != MAGIC:
        raise MissingMagic("no DICM marker at offset 128")
    r = _Reader(data, MAGIC_OFFSET + 4)

    # File meta group (0002,xxxx) is always Explicit VR LE.
    transfer_syntax = EXPLICIT_VR_LE
    while r.remaining() >= 2:
        peek_group = struct.unpack_from("<H", r.buf, r.pos)[0]
        if peek_group != 0x0002:
            break
        tag, value, _ = _read_element(r, explicit=True)
        if tag == TAG_TRANSFER_SYNTAX and value is not None:
            transfer_syntax = _text(value)

    if transfer_syntax == EXPLICIT_VR_LE:
        explicit = True
    elif transfer_syntax == IMPLICIT_VR_LE:
        explicit = False
    else:
        raise UnsupportedTransferSyntax(transfer_syntax)

    found: dict[tuple[int, int], bytes] = {}
    while r.remaining() > 0:
        tag, value, _ = _read_element(r, explicit)
        if value is not None:
            found[tag] = value

    required = [
        TAG_PATIENT_ID,
        TAG_INSTANCE_NUMBER,
        TAG_ROWS,
        TAG_COLUMNS,
        TAG_BITS_ALLOCATED,
        TAG_RESCALE_INTERCEPT,
        TAG_RESCALE_SLOPE,
        TAG_PIXEL_DATA,
    ]
    for tag in required:
        if tag not in found:
            raise MissingRequiredTag(tag)

    bits = _ushort(found[TAG_BITS_ALLOCATED], TAG_BITS_ALLOCATED)
    if bits != 16:
        raise UnsupportedTransferSyntax(f"BitsAllocated {bits} unsupported (16 only)")
    rows = _ushort(found[TAG_ROWS], TAG_ROWS)
    cols = _ushort(found[TAG_COLUMNS], TAG_COLUMNS)
    rep_raw = found.get(TAG_PIXEL_REPRESENTATION)
    representation = _ushort(rep_raw, TAG_PIXEL_REPRESENTATION) if rep_raw is not None else 0

    pixel_bytes = found[TAG_PIXEL_DATA]
    expected = rows * cols * 2
    if len(pixel_bytes) != expected:
        raise PixelLengthMismatch(
            f"PixelData holds {len(pixel_bytes)} bytes, geometry wants {expected}"
        )
    if representation not in (0, 1):
        raise MalformedDicom(f"PixelRepresentation {representation} out of range")
    dtype = "<i2" if representation == 1 else "<u2"
    if rows * cols == 0:
        raise MalformedDicom("zero-area pixel grid")
    pixels = np.frombuffer(pixel_bytes, dtype=dtype).reshape(rows, cols).copy()

    loc_raw = found.get(TAG_SLICE_LOCATION)
    try:
        return DicomSlice(
            patient_id=_text(found[TAG_PATIENT_ID]),
            instance_number=_integer(found[TAG_INSTANCE_NUMBER], TAG_INSTANCE_NUMBER),
            rows=rows,
            cols=cols,
            pixel_representation=representation,
            rescale_slope=_decimal(found[TAG_RESCALE_SLOPE], TAG_RESCALE_SLOPE),
            rescale_intercept=_decimal(found[TAG_RESCALE_INTERCEPT], TAG_RESCALE_INTERCEPT),
            stored_pixels=pixels,
            slice_location=None if loc_raw is None else _decimal(loc_raw, TAG_SLICE_LOCATION),
        )
    except InvalidSlice:
        raise
    except OverflowError as exc:
        raise MalformedDicom(str(exc)) from exc


def _pad_even(value: bytes, pad: bytes) -> bytes:
    return value + pad if len(value) % 2 else value


def _element(group: int, element: int, vr: bytes, value: bytes) -> bytes:
    pad = b"\x00" if vr in (b"UI", b"OB", b"OW") else b" "
    value = _pad_even(value, pad)
    head = struct.pack("<HH", group, element)
    if vr in _LONG_VRS:
        return head + vr + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + vr + struct.pack("<H", len(value)) + value


def _ds(value: float) -> bytes:
    return repr(float(value)).encode("ascii")


def _sop_instance_uid(s: DicomSlice) -> str:
    seed = f"{s.patient_id}|{s.instance_number}|{s.rows}x{s.cols}".encode()
    digest = int.from_bytes(hashlib.sha256(seed).digest()[:12], "big")
    return UID_ROOT + str(digest)


def write_slice(s: DicomSlice) -> bytes:
    """Encode a DicomSlice as Explicit VR Little Endian Part-10 bytes."""
    meta = b"".join(
        [
            _element(0x0002, 0x0001, b"OB", b"\x00\x01"),
            _element(0x0002, 0x0002, b"UI", CT_SOP_CLASS_UID.encode()),
            _element(0x0002, 0x0003, b"UI", _sop_instance_uid(s).encode()),
            _element(0x0002, 0x0010, b"UI", EXPLICIT_VR_LE.encode()),
            _element(0x0002, 0x0012, b"UI", IMPLEMENTATION_UID.encode()),
        ]
    )
    group_length = _element(0x0002, 0x0000, b"UL", struct.pack("<I", len(meta)))

    body = [
        _element(0x0008, 0x0060, b"CS", b"CT"),
        _element(0x0010, 0x0020, b"LO", s.patient_id.encode("ascii")),
        _element(0x0020, 0x0013, b"IS", str(s.instance_number).encode()),
    ]
    if s.slice_location is not None:
        body.append(_element(0x0020, 0x1041, b"DS", _ds(s.slice_location)))
    pixels = np.ascontiguousarray(
        s.stored_pixels, dtype="<i2" if s.pixel_representation == 1 else "<u2"
    )
    body += [
        _element(0x0028, 0x0002, b"US", struct.pack("<H", 1)),
        _element(0x0028, 0x0004, b"CS", b"MONOCHROME2"),
        _element(0x0028, 0x0010, b"US", struct.pack("<H", s.rows)),
        _element(0x0028, 0x0011, b"US", struct.pack("<H", s.cols)),
        _element(0x0028, 0x0100, b"US", struct.pack("<H", 16)),
        _element(0x0028, 0x0101, b"US", struct.pack("<H", 16)),
        _element(0x0028, 0x0102, b"US", struct.pack("<H", 15)),
        _element(0x0028, 0x0103, b"US", struct.pack("<H", s.pixel_representation)),
        _element(0x0028, 0x1052, b"DS", _ds(s.rescale_intercept)),
        _element(0x0028, 0x1053, b"DS", _ds(s.rescale_slope)),
        _element(0x7FE0, 0x0010, b"OW", pixels.tobytes()),
    ]
    return b"\x00" * MAGIC_OFFSET + MAGIC + group_length + meta + b"".join(body)


def load_volume(directory: str | Path) -> ScanVolume:
    """Parse every DICOM file under directory into one ordered volume.

    Non-DICOM files (no DICM marker) are ignored; any broken DICOM file
    aborts the load. Slices sort by instance_number, then slice_location,
    then filename, so enumeration order never matters.
    """
    directory = Path(directory)
    parsed: list[tuple[DicomSlice, str]] = []
    for path in sorted(directory.iterdir()):
        if not path.is_file():
            continue
        try:
            parsed.append((parse_slice(path.read_bytes()), path.name))
        except MissingMagic:
            continue
    if not parsed:
        raise EmptyVolume(f"no parseable slices under {directory}")

    patients = {s.patient_id for s, _ in parsed}
    if len(patients) > 1:
        raise MixedPatients(f"{directory} mixes patients {sorted(patients)}")
    shapes = {(s.rows, s.cols) for s, _ in parsed}
    if len(shapes) > 1:
        raise InconsistentGeometry(f"{directory} mixes geometries {sorted(shapes)}")

    def order(item: tuple[DicomSlice, str]):
        s, name = item
        missing = s.slice_location is None
        return (s.instance_number, missing, s.slice_location or 0.0, name)

    parsed.sort(key=order)
    return ScanVolume(patient_id=parsed[0][0].patient_id, slices=tuple(s for s, _ in parsed))
