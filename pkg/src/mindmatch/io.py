"""File formats: PPM/PGM images, Middlebury .flo flow, checkpoints, key=value configs, CSV."""

from __future__ import annotations

import csv
import dataclasses
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .bench import FlowField, MetricReport
from .matcher import Correspondence, MatchSet
from .network import MindNet, NetConfig
from .tensor import LayerParams
from .train import OptimizerState


class FormatError(ValueError):
    pass


# images ----------------------------------------------------------------


def _header_fields(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated tokens after the magic, skipping ``#`` comments."""
    pos = 2
    fields = []
    while len(fields) < count:
        if pos >= len(buf):
            raise FormatError(f"truncated header at byte {pos}")
        ch = buf[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise FormatError(f"unterminated comment at byte {pos}")
            pos = nl + 1
        else:
            start = pos
            while pos < len(buf) and buf[pos : pos + 1].isdigit():
                pos += 1
            if pos == start:
                raise FormatError(f"expected a decimal number at byte {pos}")
            fields.append((int(buf[start:pos]), start))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"expected whitespace after header at byte {pos}")
    return fields, pos + 1


def decode_image(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r} at byte 0 (need P5 or P6)")
    ((w, _), (h, hoff), (maxval, moff)), start = _header_fields(buf, 3)
    if w < 1 or h < 1:
        raise FormatError(f"non-positive image size at byte {hoff}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {moff} (only 255)")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    payload = buf[start : start + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes from byte {start}, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, ch).transpose(2, 0, 1)
    if ch == 1:
        arr = np.repeat(arr, 3, axis=0)
    return (arr.astype(np.float64) / 255.0)[None]


def encode_image(x: np.ndarray, gray: bool = False) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[0]
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) or (1, 3, h, w) image, got {x.shape}")
    q = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    _, h, w = q.shape
    if gray:
        return f"P5\n{w} {h}\n255\n".encode() + q[0].tobytes()
    return f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    """Binary PGM/PPM to a ``(1, 3, h, w)`` array in [0, 1]; grey is replicated to RGB."""
    return decode_image(Path(path).read_bytes())


def write_image(path, x, gray: bool = False):
    Path(path).write_bytes(encode_image(x, gray))


# flow ------------------------------------------------------------------

FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e9


def encode_flow(flow: FlowField) -> bytes:
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = flow.u
    data[..., 1] = flow.v
    return struct.pack("<fii", FLO_MAGIC, w, h) + data.tobytes()


def decode_flow(buf: bytes) -> FlowField:
    if len(buf) < 12:
        raise FormatError(f"flow file truncated: {len(buf)} bytes, header needs 12")
    magic, w, h = struct.unpack("<fii", buf[:12])
    if magic != FLO_MAGIC:
        raise FormatError(f"bad flow magic {buf[:4]!r} at byte 0")
    if w < 1 or h < 1:
        raise FormatError(f"invalid flow size {w}x{h} at byte 4")
    need = 8 * w * h
    if len(buf) - 12 != need:
        raise FormatError(f"flow payload is {len(buf) - 12} bytes, expected {need} for {w}x{h}")
    data = np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2)
    u, v = data[..., 0].astype(np.float64), data[..., 1].astype(np.float64)
    valid = (np.abs(u) <= UNKNOWN_FLOW) & (np.abs(v) <= UNKNOWN_FLOW) & np.isfinite(u) & np.isfinite(v)
    return FlowField(u, v, valid)


def read_flow(path) -> FlowField:
    return decode_flow(Path(path).read_bytes())


def write_flow(path, flow: FlowField, mark_invalid: bool = False):
    """Write ``flow``; with ``mark_invalid`` invalid pixels carry the 1e10 unknown-flow sentinel."""
    if mark_invalid:
        u = np.where(flow.valid, flow.u, 1e10)
        v = np.where(flow.valid, flow.v, 1e10)
        flow = FlowField(u, v, flow.valid)
    Path(path).write_bytes(encode_flow(flow))


# checkpoints -----------------------------------------------------------

CKPT_MAGIC = b"MINDCKPT"
CKPT_VERSION = 1
LAYER_TAGS = {"conv": 1, "convT": 2, "prelu": 3}
TAG_KINDS = {v: k for k, v in LAYER_TAGS.items()}


class CheckpointError(FormatError):
    pass


def _u32s(values):
    return struct.pack(f"<{len(values)}I", *values)


def _pack_array(a: np.ndarray) -> bytes:
    return _u32s([a.ndim, *a.shape]) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode_checkpoint(net: MindNet, state: Optional[OptimizerState] = None) -> bytes:
    cfg = net.config
    out = [CKPT_MAGIC, _u32s([CKPT_VERSION])]
    out.append(_u32s([cfg.input_h, cfg.input_w, cfg.convs_per_block, cfg.head_convs, cfg.out_channels]))
    for seq in (cfg.block_channels, cfg.dconv_channels, cfg.skips):
        out.append(_u32s([len(seq), *seq]))
    out.append(_u32s([len(net.layers)]))
    for kind, p in zip(net.kinds, net.layers):
        arrays = p.arrays()
        out.append(_u32s([LAYER_TAGS[kind], len(arrays)]))
        out += [_pack_array(a) for _, a in arrays]
    if state is None:
        out.append(_u32s([0]))
    else:
        out.append(_u32s([1, state.t, len(state.m)]))
        out += [_pack_array(a) for a in state.m]
        out += [_pack_array(a) for a in state.v]
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more bytes)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32s(self, n):
        return struct.unpack(f"<{n}I", self.take(4 * n))

    def u32(self):
        return self.u32s(1)[0]

    def seq(self):
        return self.u32s(self.u32())

    def array(self):
        ndim = self.u32()
        if ndim > 8:
            raise CheckpointError(f"implausible array rank {ndim} at byte {self.pos - 4}")
        shape = self.u32s(ndim)
        count = int(np.prod(shape))
        if count > len(self.buf):
            raise CheckpointError(f"array of {count} floats at byte {self.pos} exceeds the file size")
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def decode_checkpoint(buf: bytes, expect: Optional[NetConfig] = None):
    """Parse checkpoint bytes into ``(net, state_or_None)``.

    When ``expect`` is given, a config mismatch raises naming the field.
    """
    if len(buf) < len(CKPT_MAGIC) + 8:
        raise CheckpointError("checkpoint truncated before header end")
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:8]!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch; file is corrupted or truncated")
    r = _Reader(body)
    r.take(8)
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (this build reads {CKPT_VERSION})")
    input_h, input_w, cpb, head, outc = r.u32s(5)
    blocks, dconvs, skips = r.seq(), r.seq(), r.seq()
    cfg = NetConfig(input_h, input_w, blocks, dconvs, cpb, head, skips, outc)
    if expect is not None:
        for f in dataclasses.fields(NetConfig):
            if getattr(cfg, f.name) != getattr(expect, f.name):
                raise CheckpointError(
                    f"checkpoint {f.name}={getattr(cfg, f.name)} does not match expected {getattr(expect, f.name)}"
                )
    layers = []
    for _ in range(r.u32()):
        tag, n = r.u32s(2)
        if tag not in TAG_KINDS:
            raise CheckpointError(f"unknown layer tag {tag} at byte {r.pos - 8}")
        arrays = [r.array() for _ in range(n)]
        if TAG_KINDS[tag] == "prelu":
            if n != 1:
                raise CheckpointError("PReLU record must hold exactly one array")
            layers.append(LayerParams.prelu(arrays[0]))
        else:
            if n != 2:
                raise CheckpointError("convolution record must hold weight and bias")
            layers.append(LayerParams.conv(arrays[0], arrays[1]))
    try:
        net = MindNet(cfg, layers)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint layers inconsistent with its config: {exc}") from exc
    state = None
    if r.u32():
        t, count = r.u32s(2)
        m = [r.array() for _ in range(count)]
        v = [r.array() for _ in range(count)]
        if [a.shape for a in m] != [a.shape for a in net.parameters()]:
            raise CheckpointError("optimizer state shapes do not mirror the parameters")
        state = OptimizerState(m, v, t)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after checkpoint body")
    return net, state


def save_checkpoint(path, net: MindNet, state: Optional[OptimizerState] = None):
    """Parameters are stored as little-endian float32."""
    Path(path).write_bytes(encode_checkpoint(net, state))


def load_checkpoint(path, expect: Optional[NetConfig] = None):
    return decode_checkpoint(Path(path).read_bytes(), expect)


# key=value configs -----------------------------------------------------


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple) or default is None:
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def build_dataclass(cls, values: dict):
    """Instantiate ``cls`` from string ``values``; keys not naming a field are ignored here."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            default = f.default if f.default is not dataclasses.MISSING else None
            kwargs[f.name] = _coerce(values[f.name], default)
    return cls(**kwargs)


def load_config(path, *classes):
    """Read a key=value file into one instance per class; keys matching no class are an error."""
    values = parse_kv(Path(path).read_text())
    known = {f.name for cls in classes for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise FormatError(f"{path}: unknown config keys {', '.join(unknown)}")
    try:
        return [build_dataclass(cls, values) for cls in classes]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# CSV -------------------------------------------------------------------

MATCH_FIELDS = ["anchor_i", "anchor_j", "p1_r", "p1_c", "p3_r", "p3_c", "score1", "score3"]


def write_matches(path, ms: MatchSet):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MATCH_FIELDS)
        for m in ms:
            w.writerow([*m.anchor, *m.p1, *m.p3, repr(float(m.score1)), repr(float(m.score3))])


def read_matches(path) -> MatchSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MATCH_FIELDS:
        raise FormatError(f"{path}: header must be {','.join(MATCH_FIELDS)}")
    matches = []
    for n, row in enumerate(rows[1:], 2):
        if len(row) != len(MATCH_FIELDS):
            raise FormatError(f"{path}: line {n} has {len(row)} fields")
        ai, aj, r1, c1, r3, c3 = (int(v) for v in row[:6])
        s1, s3 = float(row[6]), float(row[7])
        matches.append(Correspondence((ai, aj), (r1, c1), (r3, c3), s1, s3, s1 > 0 and s3 > 0))
    h = max((m.anchor[0] for m in matches), default=-1) + 1
    w = max((m.anchor[1] for m in matches), default=-1) + 1
    stride = matches[1].anchor[1] - matches[0].anchor[1] if len(matches) > 1 and matches[1].anchor[0] == matches[0].anchor[0] else 1
    return MatchSet(matches, stride, h, w)


def write_report(path, report: MetricReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in report.rows():
            w.writerow([k, "" if v is None else v])


def write_loss_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            w.writerow([step, repr(float(loss)), repr(float(lr))])
