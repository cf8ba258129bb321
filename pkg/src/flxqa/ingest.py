"""Readers and writers for RTDOSE, optimal-fluence text and FLXQA containers.

Only Explicit VR Little Endian DICOM is handled.  The optimal-fluence grammar
is a stand-in for the vendor text layout:

    optimalfluence
    SizeX: <cols>
    SizeY: <rows>
    SpacingX: <mm>
    SpacingY: <mm>
    OriginX: <mm>
    OriginY: <mm>
    [Beam: <1..9>]
    [GantryAngle: <deg>]
    Values:
    <SizeY rows of SizeX numbers>
"""

from __future__ import annotations

import hashlib
import math
import re
import struct
from dataclasses import dataclass
from decimal import ROUND_CEILING, Decimal

import numpy as np

from .errors import Corrupt, NotContainer, ParseError, Unsupported
from .volgrid import FluenceMap, Grid3, Mask3

MAX_VOXELS = 2**28

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
RT_DOSE_STORAGE = "1.2.840.10008.5.1.4.1.1.481.2"
UID_ROOT = "1.2.826.0.1.3680043.10.1147"

# VRs whose length field is 4 bytes (preceded by 2 reserved bytes).
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
_VALID_VRS = _LONG_VRS | {
    b"AE", b"AS", b"AT", b"CS", b"DA", b"DS", b"DT", b"FD", b"FL", b"IS", b"LO", b"LT",
    b"PN", b"SH", b"SL", b"SS", b"ST", b"TM", b"UI", b"UL", b"US",
}
_UNDEFINED = 0xFFFFFFFF

ROWS = (0x0028, 0x0010)
COLUMNS = (0x0028, 0x0011)
NUMBER_OF_FRAMES = (0x0028, 0x0008)
PIXEL_SPACING = (0x0028, 0x0030)
BITS_ALLOCATED = (0x0028, 0x0100)
PIXEL_REPRESENTATION = (0x0028, 0x0103)
IMAGE_POSITION = (0x0020, 0x0032)
GRID_FRAME_OFFSETS = (0x3004, 0x000C)
DOSE_GRID_SCALING = (0x3004, 0x000E)
PIXEL_DATA = (0x7FE0, 0x0010)
SLICE_THICKNESS = (0x0018, 0x0050)
TRANSFER_SYNTAX = (0x0002, 0x0010)

_REQUIRED = (ROWS, COLUMNS, NUMBER_OF_FRAMES, PIXEL_SPACING, BITS_ALLOCATED,
             PIXEL_REPRESENTATION, IMAGE_POSITION, GRID_FRAME_OFFSETS,
             DOSE_GRID_SCALING, PIXEL_DATA)


def _tagstr(tag):
    return f"({tag[0]:04X},{tag[1]:04X})"


@dataclass
class RtDoseMeta:
    """Geometry and encoding fields pulled from an RTDOSE header."""

    rows: int
    cols: int
    frames: int
    pixel_spacing: tuple
    frame_offsets: list
    dose_grid_scaling: float
    image_position: tuple
    bits_allocated: int
    pixel_representation: int
    slice_thickness: float | None = None


# -- DICOM element walking ------------------------------------------------------


def _read_elements(buf, pos, end, out, top_level=True):
    """Walk explicit-VR-LE elements in ``buf[pos:end]``, filling ``out`` with raw values.

    Only top-level elements are recorded; sequences are skipped structurally.
    """
    while pos < end:
        if pos + 8 > end:
            raise Corrupt(f"truncated element header at byte {pos}")
        group, elem = struct.unpack_from("<HH", buf, pos)
        if group == 0xFFFE:
            # item/sequence delimiters can only appear inside sequences
            raise Corrupt(f"unexpected delimiter ({group:04X},{elem:04X}) at byte {pos}")
        vr = bytes(buf[pos + 4:pos + 6])
        if vr not in _VALID_VRS:
            raise ParseError(f"invalid VR {vr!r} for tag ({group:04X},{elem:04X}) at byte {pos}")
        if vr in _LONG_VRS:
            if pos + 12 > end:
                raise Corrupt(f"truncated long element header at byte {pos}")
            (length,) = struct.unpack_from("<I", buf, pos + 8)
            pos += 12
        else:
            (length,) = struct.unpack_from("<H", buf, pos + 6)
            pos += 8
        if length == _UNDEFINED:
            if vr not in (b"SQ", b"UN", b"OB"):
                raise Corrupt(f"undefined length on VR {vr!r} at byte {pos}")
            if (group, elem) == PIXEL_DATA:
                raise Unsupported("encapsulated (compressed) pixel data is not supported")
            pos = _skip_undefined_sequence(buf, pos, end)
            continue
        if pos + length > end:
            raise Corrupt(
                f"element ({group:04X},{elem:04X}) declares {length} bytes but only "
                f"{end - pos} remain"
            )
        if top_level:
            out[(group, elem)] = (vr, buf[pos:pos + length])
        pos += length
    return pos


def _skip_undefined_sequence(buf, pos, end):
    """Return the offset just past a sequence delimitation item."""
    while True:
        if pos + 8 > end:
            raise Corrupt("unterminated sequence of undefined length")
        group, elem, length = struct.unpack_from("<HHI", buf, pos)
        pos += 8
        if (group, elem) == (0xFFFE, 0xE0DD):
            return pos
        if (group, elem) != (0xFFFE, 0xE000):
            raise Corrupt(f"expected sequence item at byte {pos - 8}")
        if length == _UNDEFINED:
            pos = _skip_undefined_item(buf, pos, end)
        else:
            if pos + length > end:
                raise Corrupt("sequence item overruns the file")
            pos += length


def _skip_undefined_item(buf, pos, end):
    while True:
        if pos + 8 > end:
            raise Corrupt("unterminated item of undefined length")
        group, elem = struct.unpack_from("<HH", buf, pos)
        if (group, elem) == (0xFFFE, 0xE00D):
            return pos + 8
        # parse one nested element without recording it
        sub = {}
        vr = bytes(buf[pos + 4:pos + 6])
        if vr not in _VALID_VRS:
            raise ParseError(f"invalid VR {vr!r} inside sequence item at byte {pos}")
        if vr in _LONG_VRS:
            if pos + 12 > end:
                raise Corrupt("truncated nested element")
            (length,) = struct.unpack_from("<I", buf, pos + 8)
            hdr = 12
        else:
            (length,) = struct.unpack_from("<H", buf, pos + 6)
            hdr = 8
        if length == _UNDEFINED:
            pos = _skip_undefined_sequence(buf, pos + hdr, end)
        else:
            if pos + hdr + length > end:
                raise Corrupt("nested element overruns the file")
            pos = _read_elements(buf, pos, pos + hdr + length, sub, top_level=False)


def _text(raw):
    return bytes(raw).decode("ascii", errors="strict").strip(" \x00")


def _ds_list(tag, raw):
    try:
        txt = _text(raw)
    except UnicodeDecodeError:
        raise ParseError(f"non-ASCII decimal string in {_tagstr(tag)}") from None
    parts = [p.strip() for p in txt.split("\\")] if txt else []
    out = []
    for p in parts:
        if not re.fullmatch(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?", p):
            raise ParseError(f"malformed decimal {p!r} in {_tagstr(tag)}")
        v = float(p)
        if not math.isfinite(v):
            raise ParseError(f"decimal {p!r} in {_tagstr(tag)} overflows")
        out.append(v)
    return out


def _us(tag, raw):
    if len(raw) != 2:
        raise ParseError(f"{_tagstr(tag)} must be a 2-byte US value, got {len(raw)} bytes")
    return struct.unpack("<H", raw)[0]


def _is(tag, raw):
    vals = _ds_list(tag, raw)
    if len(vals) != 1 or vals[0] != int(vals[0]):
        raise ParseError(f"{_tagstr(tag)} must be a single integer string")
    return int(vals[0])


def read_rtdose_meta(data):
    """Parse the header of an RTDOSE byte string; returns ``(meta, pixel_bytes)``."""
    buf = memoryview(bytes(data))
    if len(buf) < 132 or bytes(buf[128:132]) != b"DICM":
        raise ParseError("missing DICOM preamble / 'DICM' prefix")
    elements = {}
    _read_elements(buf, 132, len(buf), elements)

    if TRANSFER_SYNTAX not in elements:
        raise ParseError(f"missing required tag {_tagstr(TRANSFER_SYNTAX)} (TransferSyntaxUID)")
    try:
        ts = _text(elements[TRANSFER_SYNTAX][1])
    except UnicodeDecodeError:
        raise ParseError("TransferSyntaxUID is not ASCII") from None
    if ts != EXPLICIT_VR_LE:
        raise Unsupported(f"transfer syntax {ts} is not supported (only {EXPLICIT_VR_LE})")
    for tag in _REQUIRED:
        if tag not in elements:
            raise ParseError(f"missing required tag {_tagstr(tag)}")

    raw = {tag: elements[tag][1] for tag in _REQUIRED}
    rows = _us(ROWS, raw[ROWS])
    cols = _us(COLUMNS, raw[COLUMNS])
    frames = _is(NUMBER_OF_FRAMES, raw[NUMBER_OF_FRAMES])
    bits = _us(BITS_ALLOCATED, raw[BITS_ALLOCATED])
    rep = _us(PIXEL_REPRESENTATION, raw[PIXEL_REPRESENTATION])
    spacing = _ds_list(PIXEL_SPACING, raw[PIXEL_SPACING])
    position = _ds_list(IMAGE_POSITION, raw[IMAGE_POSITION])
    offsets = _ds_list(GRID_FRAME_OFFSETS, raw[GRID_FRAME_OFFSETS])
    scaling = _ds_list(DOSE_GRID_SCALING, raw[DOSE_GRID_SCALING])

    if rows < 1 or cols < 1 or frames < 1:
        raise Corrupt(f"nonpositive dimensions rows={rows} cols={cols} frames={frames}")
    if rows * cols * frames > MAX_VOXELS:
        raise Corrupt(f"declared grid of {rows * cols * frames} voxels exceeds the cap")
    if bits not in (16, 32):
        raise Unsupported(f"BitsAllocated={bits}; only 16 and 32 are supported")
    if rep not in (0, 1):
        raise ParseError(f"PixelRepresentation must be 0 or 1, got {rep}")
    if len(spacing) != 2 or min(spacing) <= 0:
        raise ParseError(f"PixelSpacing must hold two positive values, got {spacing}")
    if len(position) != 3:
        raise ParseError(f"ImagePositionPatient must hold three values, got {position}")
    if len(offsets) != frames:
        raise Corrupt(f"GridFrameOffsetVector has {len(offsets)} entries for {frames} frames")
    if len(scaling) != 1 or not scaling[0] > 0:
        raise ParseError(f"DoseGridScaling must be one positive value, got {scaling}")
    diffs = np.diff(offsets)
    if frames > 1 and not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise Corrupt("GridFrameOffsetVector is not strictly monotone")

    thickness = None
    if SLICE_THICKNESS in elements:
        st = _ds_list(SLICE_THICKNESS, elements[SLICE_THICKNESS][1])
        if len(st) == 1 and st[0] > 0:
            thickness = st[0]
    meta = RtDoseMeta(rows, cols, frames, tuple(spacing), list(offsets), scaling[0],
                      tuple(position), bits, rep, thickness)
    return meta, bytes(raw[PIXEL_DATA])


def parse_rtdose(data):
    """Decode an RTDOSE file (bytes) into a dose :class:`Grid3` in Gy."""
    meta, pixels = read_rtdose_meta(data)
    n = meta.rows * meta.cols * meta.frames
    nbytes = meta.bits_allocated // 8
    # odd-length pixel payloads are padded to even length
    if len(pixels) not in (n * nbytes, n * nbytes + 1):
        raise Corrupt(f"pixel data holds {len(pixels)} bytes, expected {n * nbytes}")
    kind = "i" if meta.pixel_representation else "u"
    stored = np.frombuffer(pixels[:n * nbytes], dtype=f"<{kind}{nbytes}")
    dose = stored.astype(np.float64).reshape(meta.frames, meta.rows, meta.cols) * meta.dose_grid_scaling

    offsets = np.asarray(meta.frame_offsets, dtype=np.float64)
    # offsets are relative to ImagePositionPatient when the first one is zero
    z = offsets + meta.image_position[2] if offsets[0] == 0 else offsets
    if meta.frames > 1:
        steps = np.diff(z)
        if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-6):
            raise Unsupported("non-uniform frame spacing cannot be represented on a regular grid")
        if steps[0] < 0:
            dose = dose[::-1]
            z = z[::-1]
        dz = float(abs(z[-1] - z[0]) / (meta.frames - 1))
    else:
        dz = meta.slice_thickness or 1.0
    row_mm, col_mm = meta.pixel_spacing
    origin = (meta.image_position[0], meta.image_position[1], float(z[0]))
    return Grid3(dose, (col_mm, row_mm, dz), origin, "Gy")


# -- DICOM writing -------------------------------------------------------------


def _format_ds(x):
    """Shortest decimal string (<= 16 chars, the DS limit) that represents ``x``."""
    x = float(x)
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    r = repr(x)
    if len(r) <= 16:
        return r
    for prec in range(16, 0, -1):
        s = f"{x:.{prec}g}"
        if len(s) <= 16:
            return s
    raise ValueError(f"cannot encode {x} as DS")


def _scaling_string(s):
    """DS text for the dose scaling, rounded up so that max/scaling <= 65535."""
    txt = _format_ds(s)
    if float(txt) >= s:
        return txt
    d = Decimal(s)
    for digits in range(12, 4, -1):
        q = d.quantize(Decimal(1).scaleb(d.adjusted() - digits + 1), rounding=ROUND_CEILING)
        txt = format(q.normalize(), "f") if -6 <= q.adjusted() < 10 else format(q.normalize(), "E")
        if len(txt) <= 16:
            return txt
    raise ValueError(f"cannot encode dose scaling {s}")


def _element(group, elem, vr, value):
    if isinstance(value, str):
        payload = value.encode("ascii")
        if len(payload) % 2:
            payload += b"\x00" if vr == b"UI" else b" "
    else:
        payload = bytes(value)
        if len(payload) % 2:
            payload += b"\x00"
    if vr in _LONG_VRS:
        return struct.pack("<HH2sHI", group, elem, vr, 0, len(payload)) + payload
    if len(payload) > 0xFFFF:
        raise ValueError(f"value too long for short VR {vr!r}")
    return struct.pack("<HH2sH", group, elem, vr, len(payload)) + payload


def _us_bytes(v):
    return struct.pack("<H", v)


def dose_scaling(max_dose):
    """Scaling (Gy per stored unit) used for 16-bit storage of a grid with this maximum."""
    if max_dose <= 0:
        return 1.0
    return float(_scaling_string(max_dose / 65535.0))


def write_rtdose(grid):
    """Encode a dose grid as a minimal 16-bit unsigned RTDOSE file (bytes)."""
    if grid.unit != "Gy":
        raise ValueError(f"RTDOSE export needs a Gy grid, got unit {grid.unit!r}")
    values = grid.values
    if np.any(values < 0):
        raise ValueError("RTDOSE cannot store negative dose values")
    nx, ny, nz = grid.dims
    if nx > 0xFFFF or ny > 0xFFFF:
        raise ValueError("in-plane dimensions exceed the 16-bit Rows/Columns range")
    vmax = float(values.max())
    if vmax > 0:
        scale_txt = _scaling_string(vmax / 65535.0)
    else:
        scale_txt = "1"
    scale = float(scale_txt)
    stored = np.clip(np.rint(values / scale), 0, 65535).astype("<u2")
    pixels = stored.tobytes()

    sx, sy, sz = grid.spacing
    x0, y0, z0 = grid.origin
    offsets = "\\".join(_format_ds(k * sz) for k in range(nz))
    digest = hashlib.sha1(pixels + repr((grid.spacing, grid.origin, grid.dims)).encode()).hexdigest()
    instance_uid = f"{UID_ROOT}.{int(digest[:24], 16)}"[:64]

    ds = b"".join([
        _element(0x0008, 0x0016, b"UI", RT_DOSE_STORAGE),
        _element(0x0008, 0x0018, b"UI", instance_uid),
        _element(0x0008, 0x0060, b"CS", "RTDOSE"),
        _element(0x0018, 0x0050, b"DS", _format_ds(sz)),
        _element(0x0020, 0x0032, b"DS", "\\".join(_format_ds(v) for v in (x0, y0, z0))),
        _element(0x0020, 0x0037, b"DS", "1\\0\\0\\0\\1\\0"),
        _element(0x0028, 0x0002, b"US", _us_bytes(1)),
        _element(0x0028, 0x0004, b"CS", "MONOCHROME2"),
        _element(0x0028, 0x0008, b"IS", str(nz)),
        _element(0x0028, 0x0009, b"AT", struct.pack("<HH", 0x3004, 0x000C)),
        _element(0x0028, 0x0010, b"US", _us_bytes(ny)),
        _element(0x0028, 0x0011, b"US", _us_bytes(nx)),
        _element(0x0028, 0x0030, b"DS", f"{_format_ds(sy)}\\{_format_ds(sx)}"),
        _element(0x0028, 0x0100, b"US", _us_bytes(16)),
        _element(0x0028, 0x0101, b"US", _us_bytes(16)),
        _element(0x0028, 0x0102, b"US", _us_bytes(15)),
        _element(0x0028, 0x0103, b"US", _us_bytes(0)),
        _element(0x3004, 0x0002, b"CS", "GY"),
        _element(0x3004, 0x0004, b"CS", "PHYSICAL"),
        _element(0x3004, 0x000A, b"CS", "PLAN"),
        _element(0x3004, 0x000C, b"DS", offsets),
        _element(0x3004, 0x000E, b"DS", scale_txt),
        _element(0x7FE0, 0x0010, b"OW", pixels),
    ])
    meta_body = b"".join([
        _element(0x0002, 0x0001, b"OB", b"\x00\x01"),
        _element(0x0002, 0x0002, b"UI", RT_DOSE_STORAGE),
        _element(0x0002, 0x0003, b"UI", instance_uid),
        _element(0x0002, 0x0010, b"UI", EXPLICIT_VR_LE),
        _element(0x0002, 0x0012, b"UI", UID_ROOT),
    ])
    meta = _element(0x0002, 0x0000, b"UL", struct.pack("<I", len(meta_body))) + meta_body
    return b"\x00" * 128 + b"DICM" + meta + ds


# -- optimal fluence text --------------------------------------------------------

_REQUIRED_FLUENCE_KEYS = ("SizeX", "SizeY", "SpacingX", "SpacingY", "OriginX", "OriginY")
_OPTIONAL_FLUENCE_KEYS = ("Beam", "GantryAngle")
_DECIMAL = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")


def _parse_decimal(tok, lineno):
    if not _DECIMAL.fullmatch(tok):
        raise ParseError(f"line {lineno}: non-numeric token {tok!r}")
    v = float(tok)
    if not math.isfinite(v):
        raise ParseError(f"line {lineno}: value {tok!r} overflows")
    return v


def parse_optimal_fluence(text):
    """Parse an optimal-fluence text file into a :class:`FluenceMap`."""
    lines = text.splitlines()
    if not lines or lines[0].strip().lower() != "optimalfluence":
        raise ParseError("line 1: expected 'optimalfluence' header")
    header = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line == "Values:":
            break
        key, sep, val = line.partition(":")
        key = key.strip()
        if not sep or key not in _REQUIRED_FLUENCE_KEYS + _OPTIONAL_FLUENCE_KEYS:
            raise ParseError(f"line {i}: unrecognized header line {line!r}")
        if key in header:
            raise ParseError(f"line {i}: duplicate header key {key!r}")
        header[key] = (val.strip(), i)
    else:
        raise ParseError("missing 'Values:' section")
    for key in _REQUIRED_FLUENCE_KEYS:
        if key not in header:
            raise ParseError(f"missing header key {key!r}")

    def num(key):
        val, lineno = header[key]
        return _parse_decimal(val, lineno)

    def count(key):
        v = num(key)
        if v != int(v) or v < 1:
            raise ParseError(f"line {header[key][1]}: {key} must be a positive integer")
        return int(v)

    cols, rows = count("SizeX"), count("SizeY")
    if rows * cols > MAX_VOXELS:
        raise Corrupt(f"declared fluence of {rows * cols} values exceeds the cap")
    beam = count("Beam") if "Beam" in header else 1
    angle = num("GantryAngle") if "GantryAngle" in header else 0.0

    data = []
    for lineno in range(i + 1, len(lines) + 1):
        line = lines[lineno - 1].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) != cols:
            raise Corrupt(f"line {lineno}: expected {cols} values, got {len(toks)}")
        row = [_parse_decimal(t, lineno) for t in toks]
        if any(v < 0 for v in row):
            raise ParseError(f"line {lineno}: negative fluence value")
        data.append(row)
        if len(data) > rows:
            raise Corrupt(f"more than the declared {rows} value rows")
    if len(data) != rows:
        raise Corrupt(f"expected {rows} value rows, got {len(data)}")
    spacing = (num("SpacingX"), num("SpacingY"))
    if min(spacing) <= 0:
        raise ParseError("fluence spacing must be positive")
    try:
        return FluenceMap(np.array(data, dtype=np.float64), beam, angle, spacing,
                          (num("OriginX"), num("OriginY")))
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def write_optimal_fluence(fmap):
    """Render a :class:`FluenceMap` in the optimal-fluence text grammar."""
    out = [
        "optimalfluence",
        f"SizeX: {fmap.cols}",
        f"SizeY: {fmap.rows}",
        f"SpacingX: {fmap.spacing[0]!r}",
        f"SpacingY: {fmap.spacing[1]!r}",
        f"OriginX: {fmap.origin[0]!r}",
        f"OriginY: {fmap.origin[1]!r}",
        f"Beam: {fmap.beam_index}",
        f"GantryAngle: {fmap.gantry_angle!r}",
        "Values:",
    ]
    for row in fmap.values:
        out.append(" ".join(f"{v:.6g}" for v in row))
    return "\n".join(out) + "\n"


# -- FLXQA container ----------------------------------------------------------------

MAGIC = b"FLXQA\x00\x01\x00"
_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1"}
_KINDS = ("grid", "mask", "fluence", "tensor")


def _fmt_floats(vals):
    return " ".join(repr(float(v)) for v in vals)


def write_container(obj, dtype=None):
    """Serialize a Grid3, Mask3, FluenceMap or plain ndarray to FLXQA bytes.

    Grids and fluences default to ``f32``; masks are always ``u8``; arrays
    keep f64 unless ``dtype='f32'``.
    """
    header = {}
    if isinstance(obj, Mask3):
        dtype = "u8"
        header.update(kind="mask", dims=" ".join(map(str, obj.dims)),
                      spacing=_fmt_floats(obj.spacing), origin=_fmt_floats(obj.origin),
                      name=obj.name)
        data = obj.values.astype(np.uint8)
    elif isinstance(obj, Grid3):
        dtype = dtype or "f32"
        header.update(kind="grid", dims=" ".join(map(str, obj.dims)),
                      spacing=_fmt_floats(obj.spacing), origin=_fmt_floats(obj.origin),
                      unit=obj.unit)
        data = obj.values
    elif isinstance(obj, FluenceMap):
        dtype = dtype or "f32"
        header.update(kind="fluence", dims=f"{obj.cols} {obj.rows}",
                      spacing=_fmt_floats(obj.spacing), origin=_fmt_floats(obj.origin),
                      beam=str(obj.beam_index), gantry=repr(obj.gantry_angle), unit="unitless")
        data = obj.values
    else:
        arr = np.asarray(obj)
        dtype = dtype or ("u8" if arr.dtype == np.uint8 else "f64")
        # dims listed fastest-first, like the spatial kinds
        header.update(kind="tensor", dims=" ".join(map(str, arr.shape[::-1])))
        data = arr
    if dtype not in _DTYPES:
        raise ValueError(f"unknown container dtype {dtype!r}")
    if "\n" in header.get("name", ""):
        raise ValueError("structure names cannot contain newlines")
    lines = [f"dtype: {dtype}"] + [f"{k}: {v}" for k, v in header.items()]
    text = ("\n".join(lines) + "\n\n").encode("utf-8")
    head = MAGIC + text
    head += b"\x00" * (-len(head) % 64)
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes()
    return head + payload


def read_container(data):
    """Decode FLXQA bytes back into the object type they were written from."""
    data = bytes(data)
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise NotContainer("missing FLXQA magic")
    end = data.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise Corrupt("container header is not terminated by a blank line")
    try:
        text = data[len(MAGIC):end].decode("utf-8")
    except UnicodeDecodeError:
        raise Corrupt("container header is not valid UTF-8") from None
    header = {}
    for line in text.split("\n"):
        key, sep, val = line.partition(":")
        if not sep:
            raise Corrupt(f"malformed header line {line!r}")
        header[key.strip()] = val.strip()
    start = end + 2
    start += -start % 64
    if start > len(data):
        raise Corrupt("header padding runs past end of file")
    if any(data[end + 2:start]):
        raise Corrupt("nonzero bytes in header padding")
    for key in ("dtype", "kind", "dims"):
        if key not in header:
            raise Corrupt(f"container header lacks {key!r}")
    dtype, kind = header["dtype"], header["kind"]
    if dtype not in _DTYPES:
        raise Corrupt(f"unknown dtype {dtype!r}")
    if kind not in _KINDS:
        raise Corrupt(f"unknown kind {kind!r}")
    try:
        dims = [int(d) for d in header["dims"].split()]
    except ValueError:
        raise Corrupt(f"malformed dims {header['dims']!r}") from None
    if not dims or min(dims) < 1:
        raise Corrupt(f"invalid dims {dims}")
    n = int(np.prod(dims, dtype=object))
    if n > MAX_VOXELS:
        raise Corrupt(f"declared {n} values exceeds the cap")
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    payload = data[start:]
    if len(payload) != n * itemsize:
        raise Corrupt(f"payload holds {len(payload)} bytes, dims/dtype declare {n * itemsize}")
    arr = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(dims[::-1])

    def floats(key, count):
        try:
            vals = tuple(float(v) for v in header[key].split())
        except (KeyError, ValueError):
            raise Corrupt(f"missing or malformed {key!r}") from None
        if len(vals) != count:
            raise Corrupt(f"{key!r} needs {count} values")
        return vals

    try:
        if kind == "tensor":
            return arr.astype(np.float64) if dtype != "u8" else arr.copy()
        if kind == "fluence":
            if len(dims) != 2:
                raise Corrupt("fluence containers need two dims")
            return FluenceMap(arr.astype(np.float64), int(header.get("beam", 1)),
                              float(header.get("gantry", 0.0)), floats("spacing", 2),
                              floats("origin", 2))
        if len(dims) != 3:
            raise Corrupt(f"{kind} containers need three dims")
        if kind == "mask":
            return Mask3(arr.astype(bool), header.get("name", ""), floats("spacing", 3),
                         floats("origin", 3))
        return Grid3(arr.astype(np.float64), floats("spacing", 3), floats("origin", 3),
                     header.get("unit", "unitless"))
    except Corrupt:
        raise
    except ValueError as exc:
        raise Corrupt(f"container content is invalid: {exc}") from None


# -- file helpers ---------------------------------------------------------------------


def sniff(data):
    """Return 'rtdose', 'container', 'fluence' or None for a raw file."""
    if data[:len(MAGIC)] == MAGIC:
        return "container"
    if len(data) >= 132 and data[128:132] == b"DICM":
        return "rtdose"
    if data.lstrip()[:14].lower() == b"optimalfluence":
        return "fluence"
    return None


def load(path):
    """Read any supported file from disk, dispatching on its content."""
    with open(path, "rb") as fh:
        data = fh.read()
    kind = sniff(data)
    if kind == "container":
        return read_container(data)
    if kind == "rtdose":
        return parse_rtdose(data)
    if kind == "fluence":
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError:
            raise ParseError(f"{path}: fluence file is not ASCII text") from None
        return parse_optimal_fluence(text)
    raise ParseError(f"{path}: unrecognized file format")
