"""Binary checkpoint (``GTAS``) and dataset (``GTAD``) files.

All integers and floats are little-endian; floats are IEEE-754 binary32.

Checkpoint::

    b"GTAS" | version u16 | count u32
    per entry: name_len u16 | name utf-8 | role u8 | layer_index u16 |
               ndim u8 | dims u32 * ndim | payload f32 * prod(dims)

Dataset::

    b"GTAD" | version u16 | classes u8 | height u16 | width u16 | channels u8
    three groups (labeled, unlabeled, heldout), each: count u32, then per sample:
        id u32 | hidden u8 | image f32 * (C*H*W) | mask u8 * (H*W)

``hidden`` is 1 for unlabeled samples: their masks are stored for analysis
only and must not be used as training targets.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from ..errors import FormatError, VersionError
from ..segmodel import Param, ParamStore, Role
from ..synthdata import DatasetSplit, SegSample

CKPT_MAGIC = b"GTAS"
CKPT_VERSION = 1
DATA_MAGIC = b"GTAD"
DATA_VERSION = 1


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: needed {n} bytes", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def header(self, magic: bytes, version: int):
        got = self.take(4)
        if got != magic:
            raise FormatError(f"bad magic {got!r} for {self.what}, expected {magic!r}", offset=0)
        (v,) = self.unpack("<H")
        if v != version:
            raise VersionError(
                f"{self.what} format version {v} is not supported (this build reads version {version}); "
                "re-create the file with this version of the tool", offset=4)

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes in {self.what}", offset=self.pos)


def checkpoint_bytes(params: ParamStore) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<HI", CKPT_VERSION, len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        out.write(struct.pack("<H", len(name)))
        out.write(name)
        out.write(struct.pack("<BHB", int(p.role), p.layer_index, p.data.ndim))
        out.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return out.getvalue()


def checkpoint_from_bytes(buf: bytes) -> ParamStore:
    r = _Reader(buf, "checkpoint")
    r.header(CKPT_MAGIC, CKPT_VERSION)
    (count,) = r.unpack("<I")
    params = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        start = r.pos
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", offset=start) from None
        role_at = r.pos
        role, layer, ndim = r.unpack("<BHB")
        if role not in (0, 1):
            raise FormatError(f"invalid role byte {role}", offset=role_at)
        dims = r.unpack(f"<{ndim}I")
        data = r.floats(int(np.prod(dims, dtype=np.int64))).reshape(dims)
        params.append(Param(name, Role(role), layer, data))
    r.done()
    return ParamStore(params)


def save_checkpoint(params: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def dataset_bytes(split: DatasetSplit) -> bytes:
    groups = (split.labeled, split.unlabeled, split.heldout)
    first = next(s for g in groups for s in g)
    C, H, W = first.image.shape
    out = io.BytesIO()
    out.write(DATA_MAGIC)
    out.write(struct.pack("<HBHHB", DATA_VERSION, split.classes, H, W, C))
    for hidden, group in zip((0, 1, 0), groups):
        out.write(struct.pack("<I", len(group)))
        for s in group:
            if s.image.shape != (C, H, W):
                raise FormatError(f"sample {s.id} has image shape {s.image.shape}, expected {(C, H, W)}")
            out.write(struct.pack("<IB", s.id, hidden))
            out.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
            out.write(np.ascontiguousarray(s.mask, dtype=np.uint8).tobytes())
    return out.getvalue()


def dataset_from_bytes(buf: bytes) -> DatasetSplit:
    r = _Reader(buf, "dataset")
    r.header(DATA_MAGIC, DATA_VERSION)
    classes, H, W, C = r.unpack("<BHHB")
    groups = []
    for expect_hidden in (0, 1, 0):
        (count,) = r.unpack("<I")
        group = []
        for _ in range(count):
            at = r.pos
            sid, hidden = r.unpack("<IB")
            if hidden != expect_hidden:
                raise FormatError(f"sample {sid} has hidden flag {hidden}, expected {expect_hidden}", offset=at + 4)
            image = r.floats(C * H * W).reshape(C, H, W)
            mask_at = r.pos
            mask = np.frombuffer(r.take(H * W), dtype=np.uint8).reshape(H, W).copy()
            if mask.size and mask.max() >= classes:
                raise FormatError(f"sample {sid} mask has class id >= {classes}", offset=mask_at)
            group.append(SegSample(image, mask, sid))
        groups.append(group)
    r.done()
    return DatasetSplit(groups[0], groups[1], groups[2], classes)


def save_dataset(split: DatasetSplit, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(split))


def load_dataset(path) -> DatasetSplit:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
