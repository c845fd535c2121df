"""Binary tensor format, checkpoint container, and frame I/O.

Tensor format (TTEN): magic b"TTEN", one precision byte (0 = float32,
1 = float64), one ndim byte, ndim little-endian uint32 extents, then the
row-major little-endian payload.

Checkpoint: a text header (config lines, then a manifest of name/offset/
length records) followed by concatenated TTEN blobs. Offsets are relative to
the end of the header, so the header stays human-readable.

Frames: directories of 8-bit PNGs, numerically ordered by the digits in the
file stem, or a single .tten clip file.
"""

import io
import os
import re
import struct

import numpy as np
from PIL import Image

MAGIC = b"TTEN"
CHECKPOINT_MAGIC = "CCKP1"
_PRECISION = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FileFormatError(IOError):
    """Malformed or inconsistent file content."""


def write_tten(target, array):
    """Write one array in TTEN form to a path or binary file object."""
    array = np.ascontiguousarray(array)
    if array.dtype not in _CODES:
        array = array.astype(np.float32)
    if array.ndim > 255:
        raise FileFormatError("too many dimensions for TTEN")

    def emit(f):
        f.write(MAGIC)
        f.write(struct.pack("<BB", _CODES[array.dtype], array.ndim))
        f.write(struct.pack(f"<{array.ndim}I", *array.shape))
        f.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())

    if hasattr(target, "write"):
        emit(target)
    else:
        with open(target, "wb") as f:
            emit(f)


def read_tten(source):
    """Read one TTEN array from a path or binary file object."""

    def parse(f):
        magic = f.read(4)
        if magic != MAGIC:
            raise FileFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        code, ndim = struct.unpack("<BB", f.read(2))
        if code not in _PRECISION:
            raise FileFormatError(f"unknown precision code {code}")
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        dtype = _PRECISION[code]
        count = int(np.prod(shape)) if shape else 1
        payload = f.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise FileFormatError("truncated TTEN payload")
        return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()

    if hasattr(source, "read"):
        return parse(source)
    with open(source, "rb") as f:
        return parse(f)


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(path, arrays, config):
    """Write named arrays plus a flat {key: value} config header."""
    blobs = {}
    for name in sorted(arrays):
        buf = io.BytesIO()
        write_tten(buf, np.asarray(arrays[name]))
        blobs[name] = buf.getvalue()
    header = [CHECKPOINT_MAGIC, "[config]"]
    for key in sorted(config):
        header.append(f"{key} = {config[key]}")
    header.append("[manifest]")
    offset = 0
    for name, blob in blobs.items():
        header.append(f"{name} {offset} {len(blob)}")
        offset += len(blob)
    header.append("[payload]")
    text = ("\n".join(header) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(text)
        for blob in blobs.values():
            f.write(blob)


def load_checkpoint(path):
    """Read back (arrays, config-as-strings) from :func:`save_checkpoint`."""
    with open(path, "rb") as f:
        raw = f.read()
    marker = b"[payload]\n"
    cut = raw.find(marker)
    if cut < 0 or not raw.startswith(CHECKPOINT_MAGIC.encode()):
        raise FileFormatError(f"{path} is not a checkpoint file")
    header = raw[:cut].decode("utf-8").splitlines()
    payload = raw[cut + len(marker):]
    config, manifest = {}, []
    section = None
    for line in header[1:]:
        line = line.strip()
        if line in ("[config]", "[manifest]"):
            section = line
            continue
        if not line:
            continue
        if section == "[config]":
            key, _, value = line.partition("=")
            config[key.strip()] = value.strip()
        elif section == "[manifest]":
            name, offset, length = line.rsplit(" ", 2)
            manifest.append((name, int(offset), int(length)))
    arrays = {}
    for name, offset, length in manifest:
        arrays[name] = read_tten(io.BytesIO(payload[offset:offset + length]))
    return arrays, config


# -- frames ----------------------------------------------------------------


def _numeric_key(stem):
    digits = re.findall(r"\d+", stem)
    if not digits:
        raise FileFormatError(f"frame name {stem!r} carries no frame number")
    return int(digits[-1])


def load_frames(path):
    """Load a clip as float [t, c, h, w] in [0, 1].

    ``path`` is either a directory of PNG frames (numeric stem order) or a
    single .tten clip file.
    """
    if os.path.isfile(path) and path.endswith(".tten"):
        clip = read_tten(path)
        if clip.ndim != 4:
            raise FileFormatError(f"clip tensor must be 4-D, got {clip.shape}")
        return np.clip(clip.astype(np.float64), 0.0, 1.0)
    if not os.path.isdir(path):
        raise FileFormatError(f"no such frame source: {path}")
    names = [n for n in os.listdir(path) if n.lower().endswith(".png")]
    if not names:
        raise FileFormatError(f"no PNG frames in {path}")
    names.sort(key=lambda n: _numeric_key(os.path.splitext(n)[0]))
    frames = []
    extents = None
    for name in names:
        with Image.open(os.path.join(path, name)) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        if extents is None:
            extents = arr.shape
        elif arr.shape != extents:
            raise FileFormatError(
                f"frame {name} has extents {arr.shape[:2]}, expected {extents[:2]}")
        frames.append(arr.transpose(2, 0, 1))
    return np.stack(frames, axis=0)


def save_frames(clip, path):
    """Write a [t, c, h, w] clip as zero-padded 8-bit PNGs."""
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise FileFormatError(f"clip must be [t,c,h,w], got {clip.shape}")
    os.makedirs(path, exist_ok=True)
    quantized = np.clip(np.rint(clip * 255.0), 0, 255).astype(np.uint8)
    for t in range(clip.shape[0]):
        frame = quantized[t]
        if frame.shape[0] == 1:
            img = Image.fromarray(frame[0], mode="L")
        elif frame.shape[0] == 3:
            img = Image.fromarray(frame.transpose(1, 2, 0), mode="RGB")
        else:
            raise FileFormatError(f"cannot encode {frame.shape[0]}-channel frames")
        img.save(os.path.join(path, f"{t:05d}.png"))


def list_videos(path):
    """Frame sources under ``path``: subdirectories with PNGs, .tten files,
    or the directory itself when it directly holds frames."""
    if os.path.isfile(path):
        return [path]
    entries = sorted(os.listdir(path))
    subs = [os.path.join(path, e) for e in entries
            if os.path.isdir(os.path.join(path, e))]
    ttens = [os.path.join(path, e) for e in entries if e.endswith(".tten")]
    if subs or ttens:
        return subs + ttens
    return [path]
