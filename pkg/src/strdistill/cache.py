"""On-disk cache for teacher features.

Records are appended to ``features.bin``; ``index.tsv`` maps each sample id to
the byte offset and length of its record. A record is::

    b"SDSF" | u16 version | u8 dtype tag (1 = float32 LE)
    | u8 n_img_stages | u16 n_img_tokens | u16 img_dim
    | u8 n_txt_stages | u16 n_ctx       | u16 txt_dim
    | n_ctx mask bytes
    | float32 payload: image stages, text stages, text cls, image cls
    | u32 CRC32 of everything above

All integers are little-endian.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CacheMiss, CorruptRecord
from .teacher import TeacherFeatures

MAGIC = b"SDSF"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHBBHHBHH")
_CRC = struct.Struct("<I")


def encode_record(feats: TeacherFeatures) -> bytes:
    if feats.batched:
        raise ValueError("cache records hold a single sample")
    n_img, d_img = feats.image_stages[0].shape
    n_ctx, d_txt = feats.text_stages[0].shape
    header = _HEADER.pack(
        MAGIC, VERSION, DTYPE_F32,
        len(feats.image_stages), n_img, d_img,
        len(feats.text_stages), n_ctx, d_txt,
    )
    mask = feats.text_mask.to(torch.uint8).cpu().numpy().tobytes()
    parts = [*feats.image_stages, *feats.text_stages, feats.text_cls, feats.image_cls]
    payload = b"".join(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes() for p in parts)
    body = header + mask + payload
    return body + _CRC.pack(zlib.crc32(body))


def decode_record(blob: bytes, sample_id: str = "?") -> TeacherFeatures:
    if len(blob) < _HEADER.size + _CRC.size:
        raise CorruptRecord(f"record for {sample_id!r} is truncated")
    body, (crc,) = blob[:-_CRC.size], _CRC.unpack(blob[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise CorruptRecord(f"checksum mismatch for {sample_id!r}")
    magic, version, dtype, s_img, n_img, d_img, s_txt, n_ctx, d_txt = _HEADER.unpack_from(body)
    if magic != MAGIC or version != VERSION or dtype != DTYPE_F32:
        raise CorruptRecord(f"bad header for {sample_id!r}")
    off = _HEADER.size
    mask = torch.from_numpy(np.frombuffer(body, dtype=np.uint8, count=n_ctx, offset=off).astype(bool))
    off += n_ctx
    floats = np.frombuffer(body, dtype="<f4", offset=off)
    expected = s_img * n_img * d_img + s_txt * n_ctx * d_txt + d_txt + d_img
    if floats.size != expected:
        raise CorruptRecord(f"payload size mismatch for {sample_id!r}")
    floats = torch.from_numpy(floats.astype(np.float32))
    pos = 0

    def take(*shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = floats[pos:pos + n].reshape(shape)
        pos += n
        return out

    img = [take(n_img, d_img) for _ in range(s_img)]
    txt = [take(n_ctx, d_txt) for _ in range(s_txt)]
    return TeacherFeatures(img, txt, mask, take(d_txt), take(d_img))


class FeatureCache:
    """Append-only record store. Many readers; one writer per sample id."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.data_path = self.root / "features.bin"
        self.index_path = self.root / "index.tsv"
        self._lock = threading.Lock()
        self._index: dict[str, tuple[int, int]] = {}
        self._load_index()

    def _load_index(self) -> None:
        if not self.index_path.exists():
            return
        for line in self.index_path.read_text().splitlines():
            parts = line.split("\t")
            if len(parts) != 3:
                continue
            sid, offset, length = parts
            self._index[sid] = (int(offset), int(length))

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    def __len__(self) -> int:
        return len(self._index)

    def write(self, sample_id: str, feats: TeacherFeatures) -> None:
        if "\t" in sample_id or "\n" in sample_id:
            raise ValueError(f"sample id {sample_id!r} contains a tab or newline")
        blob = encode_record(feats)
        with self._lock:
            with open(self.data_path, "ab") as fh:
                offset = fh.seek(0, os.SEEK_END)
                fh.write(blob)
            with open(self.index_path, "a") as fh:
                fh.write(f"{sample_id}\t{offset}\t{len(blob)}\n")
            self._index[sample_id] = (offset, len(blob))

    def read(self, sample_id: str) -> TeacherFeatures:
        try:
            offset, length = self._index[sample_id]
        except KeyError:
            raise CacheMiss(sample_id) from None
        with open(self.data_path, "rb") as fh:
            fh.seek(offset)
            blob = fh.read(length)
        if len(blob) != length:
            raise CorruptRecord(f"record for {sample_id!r} is truncated")
        return decode_record(blob, sample_id)

    def read_many(self, sample_ids) -> TeacherFeatures:
        return TeacherFeatures.stack([self.read(s) for s in sample_ids])

