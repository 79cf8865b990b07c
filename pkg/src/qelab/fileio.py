"""Readers and writers for the on-disk formats.

* scan text: ``# scan width=<W> height=<H> pixel_um=<p>`` then H rows of W values
* spectrum CSV: header ``wavelength_nm,counts``
* saturation CSV: ``power_uw,rate_cps[,rate_err_cps]`` with an optional
  ``# integration_s=<t>`` comment line
* QTAG binary timestamps (little-endian): ``b"QTAG"``, u16 version, u16
  channel count, u64 duration_ps, then packed ``(u8 channel, u64 time_ps)``
* simulator config: flat ``key = value`` text
"""
import csv
import io
import logging
import re
import struct

import numpy as np

from .errors import InvalidInputError
from .photophysics import SaturationCurve
from .scan import ScanImage
from .sim import SimEmitterConfig
from .spectroscopy import Spectrum
from .stream import TimestampStream

_logger = logging.getLogger(__name__)

QTAG_MAGIC = b"QTAG"
QTAG_VERSION = 1
QTAG_HEADER = struct.Struct("<4sHHQ")
QTAG_RECORD = np.dtype([("channel", "u1"), ("time_ps", "<u8")])  # packed, 9 bytes


def write_qtag(path, stream):
    rec = np.empty(len(stream), dtype=QTAG_RECORD)
    rec["channel"] = stream.channels
    rec["time_ps"] = stream.times_ps
    n_ch = len(stream.channel_ids)
    with open(path, "wb") as fh:
        fh.write(QTAG_HEADER.pack(QTAG_MAGIC, QTAG_VERSION, n_ch, stream.duration_ps))
        fh.write(rec.tobytes())


def read_qtag(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < QTAG_HEADER.size:
        raise InvalidInputError(f"{path}: truncated QTAG header")
    magic, version, n_ch, duration = QTAG_HEADER.unpack_from(data)
    if magic != QTAG_MAGIC:
        raise InvalidInputError(f"{path}: not a QTAG file")
    if version != QTAG_VERSION:
        raise InvalidInputError(f"{path}: unsupported QTAG version {version}")
    body = memoryview(data)[QTAG_HEADER.size:]
    if len(body) % QTAG_RECORD.itemsize:
        raise InvalidInputError(f"{path}: truncated record block")
    rec = np.frombuffer(body, dtype=QTAG_RECORD)
    stream = TimestampStream(rec["channel"], rec["time_ps"].astype(np.int64), duration)
    if len(stream.channel_ids) != n_ch:
        _logger.warning("%s: header lists %d channels, found %d", path, n_ch,
                        len(stream.channel_ids))
    return stream


_SCAN_HEADER = re.compile(r"#\s*scan\s+width=(\d+)\s+height=(\d+)\s+pixel_um=([0-9.eE+-]+)")


def write_scan(path, image):
    with open(path, "w") as fh:
        fh.write(f"# scan width={image.width_px} height={image.height_px} "
                 f"pixel_um={image.pixel_size_um!r}\n")
        for row in image.counts:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_scan(path):
    with open(path) as fh:
        header = fh.readline()
        m = _SCAN_HEADER.match(header.strip())
        if not m:
            raise InvalidInputError(f"{path}: missing '# scan width=.. height=.. pixel_um=..' header")
        w, h, pix = int(m.group(1)), int(m.group(2)), float(m.group(3))
        rows = [line.split() for line in fh if line.strip()]
    if len(rows) != h or any(len(r) != w for r in rows):
        raise InvalidInputError(f"{path}: grid does not match {w}x{h}")
    return ScanImage(np.array(rows, dtype=float), pix)


def write_spectrum(path, spectrum):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["wavelength_nm", "counts"])
        for wl, c in zip(spectrum.wavelengths_nm, spectrum.intensities):
            wr.writerow([repr(float(wl)), repr(float(c))])


def read_spectrum(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["wavelength_nm", "counts"]:
        raise InvalidInputError(f"{path}: expected header 'wavelength_nm,counts'")
    try:
        data = np.array([[float(a), float(b)] for a, b in rows[1:] if a.strip()])
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
    if data.size == 0:
        raise InvalidInputError(f"{path}: no data rows")
    return Spectrum(data[:, 0], data[:, 1])


def write_saturation(path, curve, integration_s=None):
    with open(path, "w", newline="") as fh:
        if integration_s is not None:
            fh.write(f"# integration_s={integration_s!r}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["power_uw", "rate_cps", "rate_err_cps"])
        for row in zip(curve.power_uw, curve.rate_cps, curve.rate_err_cps):
            wr.writerow([repr(float(v)) for v in row])


def read_saturation(path):
    """Read a saturation CSV; missing errors become Poisson ``sqrt(rate / t)``."""
    integration_s = None
    lines = []
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                m = re.search(r"integration_s\s*=\s*([0-9.eE+-]+)", s)
                if m:
                    integration_s = float(m.group(1))
                continue
            lines.append(s)
    rows = list(csv.reader(io.StringIO("\n".join(lines))))
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    try:
        data = [[float(v) for v in r] for r in rows]
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from None
    if not data or len({len(r) for r in data}) != 1 or len(data[0]) not in (2, 3):
        raise InvalidInputError(f"{path}: expected 2 or 3 numeric columns")
    arr = np.array(data)
    if arr.shape[1] == 3:
        err = arr[:, 2]
    else:
        if integration_s is None:
            _logger.warning("%s: no rate errors and no integration time; assuming 1 s", path)
            integration_s = 1.0
        err = np.sqrt(np.maximum(arr[:, 1], 1.0 / integration_s) / integration_s)
    return SaturationCurve(arr[:, 0], arr[:, 1], err)


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_sim_config(path):
    values = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise InvalidInputError(f"{path}:{n}: expected key=value")
            k, v = (p.strip() for p in s.split("=", 1))
            values[k] = v
    return SimEmitterConfig.from_mapping(values)


def write_sim_config(path, config):
    with open(path, "w") as fh:
        for k, v in config.to_mapping().items():
            fh.write(f"{k} = {v}\n")
