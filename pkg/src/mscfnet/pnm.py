"""Binary portable pixmap/graymap (P6/P5, maxval 255) I/O and the class palette."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} at byte {offset}")
        self.offset = offset


# Cityscapes-style colors for the first 19 classes.
CITYSCAPES_PALETTE = np.array(
    [
        (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
        (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
        (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
        (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
    ],
    dtype=np.uint8,
)


def palette(num_classes: int) -> np.ndarray:
    if num_classes <= len(CITYSCAPES_PALETTE):
        return CITYSCAPES_PALETTE[:num_classes].copy()
    extra = np.random.default_rng(19).integers(0, 256, size=(num_classes - len(CITYSCAPES_PALETTE), 3))
    return np.concatenate([CITYSCAPES_PALETTE, extra.astype(np.uint8)])


def colorize(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """H×W class map to H×W×3 uint8; ignore pixels (>= num_classes) render black."""
    pal = np.concatenate([palette(num_classes), np.zeros((1, 3), dtype=np.uint8)])
    idx = np.where(labels < num_classes, labels, num_classes)
    return pal[idx]


def _tokens(buf: bytes, n: int):
    """Read ``n`` whitespace-separated header tokens; returns (tokens, offset of raster)."""
    toks, pos = [], 0
    while len(toks) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PnmError("unexpected end of header", pos)
        toks.append((buf[start:pos], start))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PnmError("missing whitespace after header", pos)
    return toks, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Return H×W (P5) or H×W×3 (P6) uint8."""
    toks, start = _tokens(buf, 4)
    magic = toks[0][0]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}", toks[0][1])
    vals = []
    for tok, off in toks[1:]:
        if not tok.isdigit():
            raise PnmError(f"bad header field {tok!r}", off)
        vals.append(int(tok))
    w, h, maxval = vals
    if w < 1 or h < 1:
        raise PnmError("nonpositive image size", toks[1][1])
    if maxval != 255:
        raise PnmError(f"maxval {maxval} unsupported (need 255)", toks[3][1])
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(buf) - start < need:
        raise PnmError(f"raster needs {need} bytes, found {len(buf) - start}", len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("PNM output must be uint8")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def write_pnm(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(arr))


def image_to_tensor_data(rgb: np.ndarray) -> np.ndarray:
    """H×W×3 uint8 to 3×H×W float64 in [0, 1]."""
    return rgb.astype(np.float64).transpose(2, 0, 1) / 255.0


def tensor_data_to_image(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
