"""Single-file checkpoint container.

Layout (little-endian throughout):

    magic  b"CRK1"
    u32    format version (currently 1)
    then repeated sections until EOF:
        u16    name length, then ascii name
        u64    payload length, then payload bytes

Section payloads:

    config     utf-8 text of the flat key=value configuration snapshot
    codebook   b"OPQC", u32 D, u32 M, u32 sub_dim, u8 dtype code,
               rotation then centroids, row-major
    table      b"CETB", u32 D, u32 M, u32 d_v, u8 dtype code, row-major data
    encoder    b"SENC", u32 L, u32 H, u32 d_v, u32 n_max, u8 dtype code,
               parameter blocks flattened in tensor_shapes() order
    optimizer  named-array blob (see _pack_arrays)
    alignment  b"ALGN", u32 D, u32 M, u8 dtype code, theta row-major,
               f64 sinkhorn_temp, u32 sinkhorn_iters, f64 gumbel_noise_scale
    log        utf-8 text, one key=value line per epoch
    item_codes u32 N, u32 D, int32 data row-major
    provenance ascii hex digest of the source checkpoint's parameters

Dtype codes: 4 = float32, 8 = float64. A float64 training state therefore
round-trips bit-identically.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .encoder import SequenceEncoderParams, tensor_shapes
from .errors import FormatError
from .quantizer import OpqCodebook

MAGIC = b"CRK1"
VERSION = 1

_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Everything needed to resume or transfer a trained model."""

    config_text: str
    codebook: OpqCodebook
    table: np.ndarray                  # (D, M, d_v)
    encoder: SequenceEncoderParams
    optimizer_arrays: dict = None
    log: list = field(default_factory=list)
    item_codes: np.ndarray = None      # (N, D) or None
    provenance: str = None             # hex digest of the source checkpoint


def params_digest(table, enc_params):
    """SHA-256 over the model parameters, for provenance tracking."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(table).tobytes())
    for name in enc_params.tensors:
        h.update(name.encode())
        h.update(np.ascontiguousarray(enc_params.tensors[name]).tobytes())
    return h.hexdigest()


def array_digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


# -- low-level helpers -------------------------------------------------------

def _dtype_code(arr):
    if arr.dtype == np.float32:
        return 4
    if arr.dtype == np.float64:
        return 8
    raise FormatError(f"unsupported dtype {arr.dtype}")


def _pack_array(arr):
    code = _dtype_code(arr)
    return struct.pack("<B", code) + np.ascontiguousarray(arr).astype(
        _DTYPE_CODES[code], copy=False).tobytes()


class _Reader:
    def __init__(self, payload, name):
        self.buf = payload
        self.pos = 0
        self.name = name

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"section {self.name!r} is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def array(self, shape):
        code = self.u8()
        if code not in _DTYPE_CODES:
            raise FormatError(f"section {self.name!r}: bad dtype code {code}")
        dt = _DTYPE_CODES[code]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).reshape(shape).copy()


def _pack_arrays(arrays):
    """Named-array blob: u32 count, then per array name/dtype/ndim/dims/data."""
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        enc = name.encode("ascii")
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<BB", _dtype_code(arr), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(_pack_array(arr)[1:])
    return b"".join(parts)


def _unpack_arrays(reader):
    count = reader.u32()
    out = OrderedDict()
    for _ in range(count):
        name_len = struct.unpack("<H", reader.take(2))[0]
        name = reader.take(name_len).decode("ascii")
        code = reader.u8()
        ndim = reader.u8()
        shape = struct.unpack(f"<{ndim}I", reader.take(4 * ndim))
        dt = _DTYPE_CODES.get(code)
        if dt is None:
            raise FormatError(f"array {name!r}: bad dtype code {code}")
        count_elems = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = reader.take(count_elems * dt.itemsize)
        out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return out


# -- section encoders / decoders --------------------------------------------

def pack_codebook(cb):
    head = b"OPQC" + struct.pack("<III", cb.num_subspaces, cb.num_centroids,
                                 cb.sub_dim)
    return head + _pack_array(cb.rotation) + _pack_array(cb.centroids)[1:]


def unpack_codebook(payload):
    r = _Reader(payload, "codebook")
    if r.take(4) != b"OPQC":
        raise FormatError("codebook section has a bad magic tag")
    d, m, sub = r.u32(), r.u32(), r.u32()
    rotation = r.array((d * sub, d * sub))
    code = _dtype_code(rotation)
    dt = _DTYPE_CODES[code]
    raw = r.take(d * m * sub * dt.itemsize)
    centroids = np.frombuffer(raw, dtype=dt).reshape(d, m, sub).copy()
    return OpqCodebook(rotation, centroids)


def pack_table(table):
    d, m, dv = table.shape
    return (b"CETB" + struct.pack("<III", d, m, dv) + _pack_array(table))


def unpack_table(payload):
    r = _Reader(payload, "table")
    if r.take(4) != b"CETB":
        raise FormatError("table section has a bad magic tag")
    d, m, dv = r.u32(), r.u32(), r.u32()
    return r.array((d, m, dv))


def pack_encoder(enc):
    head = b"SENC" + struct.pack("<IIII", enc.n_layers, enc.n_heads,
                                 enc.d_model, enc.n_max)
    code = _dtype_code(next(iter(enc.tensors.values())))
    flat = np.concatenate([enc.tensors[name].ravel()
                           for name, _ in tensor_shapes(enc.n_layers,
                                                        enc.n_heads,
                                                        enc.d_model,
                                                        enc.n_max)])
    return head + struct.pack("<B", code) + np.ascontiguousarray(
        flat).astype(_DTYPE_CODES[code], copy=False).tobytes()


def unpack_encoder(payload):
    r = _Reader(payload, "encoder")
    if r.take(4) != b"SENC":
        raise FormatError("encoder section has a bad magic tag")
    nl, nh, dm, nx = r.u32(), r.u32(), r.u32(), r.u32()
    code = r.u8()
    dt = _DTYPE_CODES.get(code)
    if dt is None:
        raise FormatError(f"encoder section: bad dtype code {code}")
    tensors = OrderedDict()
    for name, shape in tensor_shapes(nl, nh, dm, nx):
        count = int(np.prod(shape, dtype=np.int64))
        raw = r.take(count * dt.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return SequenceEncoderParams(nl, nh, dm, nx, tensors)


def pack_alignment(align):
    d, m, _ = align.theta.shape
    return (b"ALGN" + struct.pack("<II", d, m) + _pack_array(align.theta)
            + struct.pack("<d", align.sinkhorn_temp)
            + struct.pack("<I", align.sinkhorn_iters)
            + struct.pack("<d", align.gumbel_noise_scale))


def unpack_alignment(payload):
    from .transfer import AlignmentMatrices
    r = _Reader(payload, "alignment")
    if r.take(4) != b"ALGN":
        raise FormatError("alignment section has a bad magic tag")
    d, m = r.u32(), r.u32()
    theta = r.array((d, m, m))
    temp = r.f64()
    iters = r.u32()
    noise = r.f64()
    return AlignmentMatrices(theta, temp, iters, noise)


def pack_item_codes(codes):
    n, d = codes.shape
    return struct.pack("<II", n, d) + codes.astype("<i4").tobytes()


def unpack_item_codes(payload):
    r = _Reader(payload, "item_codes")
    n, d = r.u32(), r.u32()
    raw = r.take(n * d * 4)
    return np.frombuffer(raw, dtype="<i4").reshape(n, d).astype(np.int64)


# -- container ---------------------------------------------------------------

def write_container(path, sections):
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for name, payload in sections.items():
            enc = name.encode("ascii")
            fh.write(struct.pack("<H", len(enc)) + enc)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_container(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint container (bad magic)")
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise FormatError(
            f"{path}: unsupported container version {version} "
            f"(expected {VERSION})")
    sections = OrderedDict()
    pos = 8
    while pos < len(data):
        if pos + 2 > len(data):
            raise FormatError(f"{path}: truncated section header")
        (name_len,) = struct.unpack("<H", data[pos:pos + 2])
        pos += 2
        if pos + name_len + 8 > len(data):
            raise FormatError(f"{path}: truncated section header")
        name = data[pos:pos + name_len].decode("ascii")
        pos += name_len
        (size,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        if pos + size > len(data):
            raise FormatError(f"{path}: section {name!r} is truncated")
        sections[name] = data[pos:pos + size]
        pos += size
    return sections


def save_checkpoint(ckpt, path):
    """Write a checkpoint; round-trips bit-identically through load."""
    sections = OrderedDict()
    sections["config"] = ckpt.config_text.encode("utf-8")
    sections["codebook"] = pack_codebook(ckpt.codebook)
    sections["table"] = pack_table(ckpt.table)
    sections["encoder"] = pack_encoder(ckpt.encoder)
    if ckpt.optimizer_arrays:
        sections["optimizer"] = _pack_arrays(ckpt.optimizer_arrays)
    sections["log"] = "\n".join(ckpt.log).encode("utf-8")
    if ckpt.item_codes is not None:
        sections["item_codes"] = pack_item_codes(ckpt.item_codes)
    if ckpt.provenance:
        sections["provenance"] = ckpt.provenance.encode("ascii")
    write_container(path, sections)


def load_checkpoint(path):
    sections = read_container(path)
    for required in ("config", "codebook", "table", "encoder"):
        if required not in sections:
            raise FormatError(f"{path}: missing section {required!r}")
    optimizer = None
    if "optimizer" in sections:
        optimizer = _unpack_arrays(_Reader(sections["optimizer"], "optimizer"))
    log_text = sections.get("log", b"").decode("utf-8")
    return Checkpoint(
        config_text=sections["config"].decode("utf-8"),
        codebook=unpack_codebook(sections["codebook"]),
        table=unpack_table(sections["table"]),
        encoder=unpack_encoder(sections["encoder"]),
        optimizer_arrays=optimizer,
        log=log_text.split("\n") if log_text else [],
        item_codes=(unpack_item_codes(sections["item_codes"])
                    if "item_codes" in sections else None),
        provenance=(sections["provenance"].decode("ascii")
                    if "provenance" in sections else None),
    )


def save_alignment(align, path, provenance=None):
    sections = OrderedDict()
    sections["alignment"] = pack_alignment(align)
    if provenance:
        sections["provenance"] = provenance.encode("ascii")
    write_container(path, sections)


def load_alignment(path):
    sections = read_container(path)
    if "alignment" not in sections:
        raise FormatError(f"{path}: missing section 'alignment'")
    return unpack_alignment(sections["alignment"])
