"""
Capture file formats:

* PPM (binary "P6", maxval 255) for RGB and segmentation images
* PFM ("Pf", little endian, rows bottom-up) for float32 depth
* ASCII PLY (float x, y, z vertices) for point clouds, via plyfile
"""

import logging
import re
from typing import List, Sequence, Tuple

# PyPI
import numpy as np
import numpy.typing as npt
from plyfile import PlyData, PlyElement

logger = logging.getLogger(__name__)

PLY_DTYPE = [('x', 'f4'), ('y', 'f4'), ('z', 'f4')]


class ImageIOError(Exception):
    """
    reading or writing a capture file failed
    """
    def __init__(self, path: str, cause: Exception):
        super().__init__(f"{path}: {cause}")
        self.path = path
        self.cause = cause


def _write(path: str, header: bytes, payload: bytes) -> None:
    try:
        with open(path, 'wb') as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise ImageIOError(path, e) from e


def _read(path: str) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise ImageIOError(path, e) from e


# three whitespace separated header fields after the magic, then one
# whitespace byte before the payload
_HEADER_RE = re.compile(rb'^(P6|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s')


def _header(path: str, data: bytes, magic: bytes) -> Tuple[int, int, bytes, bytes]:
    m = _HEADER_RE.match(data)
    if not m or m.group(1) != magic:
        raise ImageIOError(path, ValueError(f"not a {magic.decode()} file"))
    return int(m.group(2)), int(m.group(3)), m.group(4), data[m.end():]


def write_ppm(image: npt.ArrayLike, path: str) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"PPM needs an (h, w, 3) uint8 image, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    _write(path, f"P6\n{w} {h}\n255\n".encode('ascii'), np.ascontiguousarray(img).tobytes())


def read_ppm(path: str) -> npt.NDArray[np.uint8]:
    data = _read(path)
    w, h, maxval, payload = _header(path, data, b'P6')
    if maxval != b'255':
        raise ImageIOError(path, ValueError(f"unsupported maxval {maxval!r}"))
    if len(payload) != w * h * 3:
        raise ImageIOError(path, ValueError(f"expected {w * h * 3} bytes, got {len(payload)}"))
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pfm(depth: npt.ArrayLike, path: str) -> None:
    """
    single channel; negative scale means little endian
    """
    img = np.asarray(depth, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"PFM depth must be 2-D, got shape {img.shape}")
    h, w = img.shape
    payload = np.flipud(img).astype('<f4').tobytes()
    _write(path, f"Pf\n{w} {h}\n-1.0\n".encode('ascii'), payload)


def read_pfm(path: str) -> npt.NDArray[np.float32]:
    data = _read(path)
    w, h, scale, payload = _header(path, data, b'Pf')
    endian = '<' if float(scale) < 0 else '>'
    if len(payload) != w * h * 4:
        raise ImageIOError(path, ValueError(f"expected {w * h * 4} bytes, got {len(payload)}"))
    img = np.frombuffer(payload, dtype=f"{endian}f4").reshape(h, w)
    return np.flipud(img).astype(np.float32)


def write_ply(points: npt.ArrayLike, path: str, comments: Sequence[str] = ()) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    vertex = np.empty(len(pts), dtype=PLY_DTYPE)
    vertex['x'] = pts[:, 0]
    vertex['y'] = pts[:, 1]
    vertex['z'] = pts[:, 2]
    el = PlyElement.describe(vertex, 'vertex')
    try:
        PlyData([el], text=True, comments=list(comments)).write(path)
    except OSError as e:
        raise ImageIOError(path, e) from e
    logger.debug(f"wrote {len(pts)} points to {path}")


def read_ply(path: str) -> npt.NDArray[np.float64]:
    try:
        ply = PlyData.read(path)
    except Exception as e:
        # OSError, or one of plyfile's own parse errors
        raise ImageIOError(path, e) from e
    v = ply['vertex'].data
    return np.stack([v['x'], v['y'], v['z']], axis=1).astype(float)


def ply_comments(path: str) -> List[str]:
    try:
        return list(PlyData.read(path).comments)
    except Exception as e:
        raise ImageIOError(path, e) from e
