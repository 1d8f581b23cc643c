"""File formats: AER event files, PGM frames, flow files, checkpoints.

All binary formats are little-endian with a 4-byte magic. Parse errors
report the byte offset of the offending record.
"""

import struct

import numpy as np

from .events import Event, EventStream

AER_MAGIC = b"AER1"
FLO_MAGIC = b"FLO1"
CKPT_MAGIC = b"FFNW"


class ParseError(ValueError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = "%s (at byte %d)" % (message, offset)
        super().__init__(message)
        self.offset = offset


# ---------------------------------------------------------------------------
# AER event files
# ---------------------------------------------------------------------------

_AER_HEADER = struct.Struct("<HHQQQ")
_AER_RECORD = struct.Struct("<HHQb")


def write_aer(stream, path):
    with open(path, "wb") as fh:
        fh.write(AER_MAGIC)
        fh.write(_AER_HEADER.pack(stream.width, stream.height,
                                  stream.t_start, stream.t_end, len(stream)))
        for e in stream.events:
            fh.write(_AER_RECORD.pack(e.x, e.y, e.t, e.p))


def read_aer(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != AER_MAGIC:
        raise ParseError("bad magic %r" % (data[:4],), offset=0)
    if len(data) < 4 + _AER_HEADER.size:
        raise ParseError("truncated header", offset=len(data))
    width, height, t_start, t_end, count = _AER_HEADER.unpack_from(data, 4)
    offset = 4 + _AER_HEADER.size
    expected = offset + count * _AER_RECORD.size
    if len(data) != expected:
        raise ParseError("record count %d does not match file size" % count,
                         offset=min(len(data), expected))
    events = []
    for _ in range(count):
        x, y, t, p = _AER_RECORD.unpack_from(data, offset)
        if x >= width or y >= height:
            raise ParseError("coordinates (%d,%d) outside %dx%d" % (x, y, width, height),
                             offset=offset)
        if p not in (1, -1):
            raise ParseError("polarity must be +1 or -1, got %d" % p, offset=offset)
        events.append(Event(x, y, t, p))
        offset += _AER_RECORD.size
    try:
        return EventStream(events, width, height, t_start, t_end)
    except ValueError as e:
        raise ParseError(str(e))


# ---------------------------------------------------------------------------
# PGM frames
# ---------------------------------------------------------------------------

def write_pgm(image, path):
    """8-bit binary PGM from a float image in [0,1]."""
    arr = np.asarray(image)
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (W, H))
        fh.write(data.tobytes())


def read_pgm(path):
    """Float image in [0,1] from an 8-bit binary PGM."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ParseError("not a binary PGM", offset=0)
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    W, H, maxval = fields
    if maxval != 255:
        raise ParseError("only 8-bit PGM supported", offset=0)
    raw = data[pos:pos + W * H]
    if len(raw) != W * H:
        raise ParseError("truncated pixel data", offset=pos + len(raw))
    return np.frombuffer(raw, dtype=np.uint8).reshape(H, W).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# flow files
# ---------------------------------------------------------------------------

def write_flo(flow, path):
    """Flow [2, H, W] (u, v in pixels) to the FLO1 format."""
    flow = np.asarray(flow, dtype=np.float32)
    _, H, W = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<II", W, H))
        interleaved = np.stack([flow[0], flow[1]], axis=-1)  # [H, W, 2]
        fh.write(interleaved.astype("<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FLO_MAGIC:
        raise ParseError("bad magic %r" % (data[:4],), offset=0)
    if len(data) < 12:
        raise ParseError("truncated header", offset=len(data))
    W, H = struct.unpack_from("<II", data, 4)
    expected = 12 + W * H * 8
    if len(data) != expected:
        raise ParseError("flow payload size mismatch", offset=min(len(data), expected))
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(H, W, 2)
    return np.stack([arr[:, :, 0], arr[:, :, 1]]).astype(np.float32)


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(params, path):
    """Named parameter arrays to the FFNW binary format.

    ``params`` is an ordered mapping name -> numpy array; data is stored
    as row-major f32.
    """
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.asarray(arr, dtype="<f4")  # tobytes() emits C order
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise ParseError("bad magic %r" % (data[:4],), offset=0)
    (count,) = struct.unpack_from("<I", data, 4)
    offset = 8
    params = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + nlen].decode("utf-8")
            offset += nlen
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from("<%dI" % rank, data, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
        except (struct.error, ValueError):
            raise ParseError("truncated parameter record", offset=offset)
        params[name] = arr.reshape(dims).copy()
    return params


# ---------------------------------------------------------------------------
# key = value config text
# ---------------------------------------------------------------------------

def write_config_text(cfg, path):
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write("%s = %s\n" % (key, cfg[key]))


def read_config_text(path):
    cfg = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("line %d: expected 'key = value'" % lineno)
            key, _, value = line.partition("=")
            cfg[key.strip()] = value.strip()
    return cfg
