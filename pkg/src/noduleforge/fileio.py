"""File ingestion and emission: MetaImage volumes and the CSV schemas.

All writers go through a temp-file-and-rename so a failure never leaves a
partial output behind. Floats are written with repr, which round-trips
exactly through Python's float parser.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .exceptions import CsvParseError, MhdParseError
from .metrics import CPM_RATES, CpmResult, FrocCurve
from .screening import Candidate
from .volumes import NoduleAnnotation, Volume

ELEMENT_TYPES = {
    "MET_SHORT": np.dtype(np.int16),
    "MET_FLOAT": np.dtype(np.float32),
    "MET_UCHAR": np.dtype(np.uint8),
}

CANDIDATE_HEADER = ["scan_id", "x", "y", "z", "probability"]
DETECTION_HEADER = CANDIDATE_HEADER + ["diameter"]
ANNOTATION_HEADER = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"]
TRACE_HEADER = ["iter", "loss", "selected", "total"]
FROC_HEADER = ["fps_per_scan", "sensitivity"]
CPM_HEADER = ["fps_rate", "sensitivity"]


def _atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# MetaImage


@dataclass
class MhdHeader:
    ndims: int
    dim_size: tuple[int, int, int]
    element_spacing: tuple[float, float, float]
    offset: tuple[float, float, float]
    element_type: str
    data_file: str
    byte_order_msb: bool = False


def parse_mhd(header_text: str) -> MhdHeader:
    """Parse a line-oriented ``Key = Value`` MetaImage header (case-sensitive)."""
    fields: dict[str, str] = {}
    for lineno, line in enumerate(header_text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MhdParseError(f"line {lineno} is not 'Key = Value': {line!r}")
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()

    def require(key: str) -> str:
        if key not in fields:
            raise MhdParseError(f"missing required key {key}")
        return fields[key]

    raw_ndims = require("NDims")
    try:
        ndims = int(raw_ndims)
    except ValueError as e:
        raise MhdParseError(f"NDims is not an integer: {raw_ndims!r}") from e
    if ndims != 3:
        raise MhdParseError(f"NDims must be 3, got {ndims}")

    def triple(key: str, conv, default=None):
        if key not in fields:
            if default is None:
                raise MhdParseError(f"missing required key {key}")
            return default
        parts = fields[key].split()
        if len(parts) != 3:
            raise MhdParseError(f"{key} needs 3 values, got {len(parts)}")
        try:
            return tuple(conv(p) for p in parts)
        except ValueError as e:
            raise MhdParseError(f"{key} has a non-numeric entry: {fields[key]!r}") from e

    dim_size = triple("DimSize", int)
    if any(d <= 0 for d in dim_size):
        raise MhdParseError(f"DimSize must be positive, got {dim_size}")
    element_type = require("ElementType")
    if element_type not in ELEMENT_TYPES:
        raise MhdParseError(
            f"unsupported ElementType {element_type}; supported: "
            + ", ".join(sorted(ELEMENT_TYPES))
        )
    msb = fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False"))
    return MhdHeader(
        ndims=ndims,
        dim_size=dim_size,
        element_spacing=triple("ElementSpacing", float, (1.0, 1.0, 1.0)),
        offset=triple("Offset", float, (0.0, 0.0, 0.0)),
        element_type=element_type,
        data_file=require("ElementDataFile"),
        byte_order_msb=msb.lower() == "true",
    )


def load_mhd(header_path) -> Volume:
    """Read header + raw data into a Volume (float64, (z, y, x) layout)."""
    header_path = os.fspath(header_path)
    with open(header_path, "r") as f:
        header = parse_mhd(f.read())
    raw_path = os.path.join(os.path.dirname(header_path), header.data_file)
    dtype = ELEMENT_TYPES[header.element_type]
    if header.byte_order_msb:
        dtype = dtype.newbyteorder(">")
    nx, ny, nz = header.dim_size
    expected = nx * ny * nz * dtype.itemsize
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise MhdParseError(
            f"ElementDataFile {header.data_file} holds {actual} bytes, "
            f"expected {expected} for DimSize {header.dim_size}"
        )
    raw = np.fromfile(raw_path, dtype=dtype)
    scan_id = os.path.splitext(os.path.basename(header_path))[0]
    return Volume(
        data=raw.astype(np.float64).reshape(nz, ny, nx),
        spacing=header.element_spacing,
        origin=header.offset,
        scan_id=scan_id,
    )


def write_mhd(vol: Volume, header_path) -> None:
    """Write a Volume as MET_FLOAT header + raw pair."""
    header_path = os.fspath(header_path)
    base = os.path.splitext(os.path.basename(header_path))[0]
    raw_name = base + ".raw"
    nx, ny, nz = vol.dims
    header = (
        "NDims = 3\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {vol.spacing[0]!r} {vol.spacing[1]!r} {vol.spacing[2]!r}\n"
        f"Offset = {vol.origin[0]!r} {vol.origin[1]!r} {vol.origin[2]!r}\n"
        "BinaryDataByteOrderMSB = False\n"
        "ElementType = MET_FLOAT\n"
        f"ElementDataFile = {raw_name}\n"
    )
    _atomic_write_bytes(os.path.join(os.path.dirname(header_path), raw_name),
                        vol.data.astype("<f4").tobytes())
    _atomic_write_text(header_path, header)


# ---------------------------------------------------------------------------
# CSV helpers


def _read_rows(path, expected_headers):
    with open(path, "r", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: file is empty, expected a header row")
        header = [h.strip() for h in header]
        match = None
        for candidate in expected_headers:
            if header == candidate:
                match = candidate
                break
        if match is None:
            raise CsvParseError(
                f"{path}: bad header {header}, expected one of "
                + " | ".join(",".join(h) for h in expected_headers)
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(match):
                raise CsvParseError(
                    f"{path}: line {lineno} has {len(row)} columns, "
                    f"expected {len(match)}"
                )
            rows.append((lineno, row))
    return match, rows


def _num(path, lineno, col, value) -> float:
    try:
        return float(value)
    except ValueError as e:
        raise CsvParseError(
            f"{path}: line {lineno}, column {col}: non-numeric value {value!r}"
        ) from e


def _format_row(values) -> list[str]:
    return [repr(v) if isinstance(v, float) else str(v) for v in values]


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write_text(path, buf.getvalue())


def write_candidates_csv(path, cands) -> None:
    """Candidate CSV; refined candidates get the extended diameter column.

    Coordinates are whatever frame the candidates carry: voxel units for
    phantom volumes, world mm when the source volume had real geometry.
    """
    cands = list(cands)
    extended = any(c.refined_diameter is not None for c in cands)
    rows = []
    for c in cands:
        row = [c.scan_id, float(c.position[0]), float(c.position[1]),
               float(c.position[2]), float(c.final_probability)]
        if extended:
            row.append(float(c.refined_diameter if c.refined_diameter is not None else -1.0))
        rows.append(_format_row(row))
    _write_csv(path, DETECTION_HEADER if extended else CANDIDATE_HEADER, rows)


def read_candidates_csv(path) -> list[Candidate]:
    header, rows = _read_rows(path, [CANDIDATE_HEADER, DETECTION_HEADER])
    out = []
    for lineno, row in rows:
        pos = tuple(_num(path, lineno, c, row[i])
                    for i, c in ((1, "x"), (2, "y"), (3, "z")))
        prob = _num(path, lineno, "probability", row[4])
        if not 0.0 <= prob <= 1.0:
            raise CsvParseError(
                f"{path}: line {lineno}: probability {prob} outside [0, 1]"
            )
        cand = Candidate(position=pos, probability=prob, scan_id=row[0])
        if header is DETECTION_HEADER:
            cand.refined_diameter = _num(path, lineno, "diameter", row[5])
        out.append(cand)
    return out


def write_annotations_csv(path, annos) -> None:
    rows = [
        _format_row([a.scan_id, a.centroid[0], a.centroid[1], a.centroid[2],
                     a.diameter])
        for a in annos
    ]
    _write_csv(path, ANNOTATION_HEADER, rows)


def read_annotations_csv(path) -> list[NoduleAnnotation]:
    _, rows = _read_rows(path, [ANNOTATION_HEADER])
    out = []
    for lineno, row in rows:
        centroid = tuple(_num(path, lineno, c, row[i])
                         for i, c in ((1, "coordX"), (2, "coordY"), (3, "coordZ")))
        d = _num(path, lineno, "diameter_mm", row[4])
        if d <= 0:
            raise CsvParseError(f"{path}: line {lineno}: diameter {d} must be positive")
        out.append(NoduleAnnotation(centroid=centroid, diameter=d, scan_id=row[0]))
    return out


def write_loss_trace_csv(path, trace) -> None:
    rows = [_format_row([r.iteration, float(r.loss), r.selected, r.total])
            for r in trace]
    _write_csv(path, TRACE_HEADER, rows)


def write_froc_csv(path, curve: FrocCurve) -> None:
    rows = [_format_row([float(f), float(s)]) for f, s in curve.points]
    _write_csv(path, FROC_HEADER, rows)


def read_froc_csv(path) -> list[tuple[float, float]]:
    _, rows = _read_rows(path, [FROC_HEADER])
    return [(_num(path, ln, "fps_per_scan", r[0]),
             _num(path, ln, "sensitivity", r[1])) for ln, r in rows]


def write_cpm_csv(path, result: CpmResult) -> None:
    rows = [_format_row([float(r), float(s)])
            for r, s in zip(CPM_RATES, result.per_rate)]
    rows.append(_format_row(["mean", float(result.cpm)]))
    _write_csv(path, CPM_HEADER, rows)
