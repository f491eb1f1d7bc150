"""
Pinhole camera and ray-cast rendering.

Camera frame: +Z forward, +X right, +Y down (image rows grow
downward).  Pixel (u, v) covers [u, u+1) x [v, v+1); its primary ray
passes through the pixel centre (u + 0.5, v + 0.5).
"""

from dataclasses import dataclass
from enum import Enum
import logging
import math
import time
from typing import NamedTuple, Optional, Tuple

# PyPI
import numpy as np
import numpy.typing as npt

from twinlink.scenecam.scene import Scene
from twinlink.stats import Stats
from twinlink.transform import Transform

logger = logging.getLogger(__name__)

# shadow ray start offset along the surface normal (m)
SHADOW_BIAS = 1e-4


class RenderMode(Enum):
    RGB = 'rgb'
    SEG = 'seg'
    DEPTH = 'depth'


class DepthMode(Enum):
    PLANAR = 'planar'           # camera-space Z of the hit
    RAY = 'ray'                 # distance from camera centre to the hit


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 1920
    height: int = 1080
    fx: float = 1371.0
    fy: float = 1371.0
    cx: float = 960.0
    cy: float = 540.0

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"bad image size {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive: {self.fx}, {self.fy}")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError("principal point must be finite")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 70.0) -> 'CameraIntrinsics':
        """
        square pixels, principal point at the image centre
        """
        if not 0 < hfov_deg < 180:
            raise ValueError(f"bad horizontal field of view {hfov_deg}")
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2)

    def pixel_grid(self) -> Tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        """
        (u, v) index arrays, shape (height, width)
        """
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u.astype(float), v.astype(float)

    def rays(self) -> npt.NDArray[np.float64]:
        """
        un-normalized camera-frame ray directions with z = 1, (h*w, 3) row-major
        """
        u, v = self.pixel_grid()
        x = (u + 0.5 - self.cx) / self.fx
        y = (v + 0.5 - self.cy) / self.fy
        return np.stack([x.ravel(), y.ravel(), np.ones(x.size)], axis=1)


class Frame(NamedTuple):
    rgb: npt.NDArray[np.uint8]          # (h, w, 3)
    seg: npt.NDArray[np.uint8]          # (h, w, 3)
    depth: npt.NDArray[np.float32]      # (h, w), +inf where nothing was hit
    ids: npt.NDArray[np.int64]          # (h, w), -1 where nothing was hit


def render_all(scene: Scene, cam_pose: Transform, intr: CameraIntrinsics,
               depth_mode: DepthMode = DepthMode.PLANAR) -> Frame:
    """
    cast one primary ray per pixel and shade all three images
    """
    t0 = time.monotonic()
    h, w = intr.height, intr.width
    d_cam = intr.rays()
    scale = np.linalg.norm(d_cam, axis=1)
    dirs = cam_pose.rotate(d_cam / scale[:, None])
    origin = np.asarray(cam_pose.translation, dtype=float)
    hits = scene.intersect_rays(origin[None, :], dirs)
    hit = hits.ids >= 0

    # depth
    if DepthMode(depth_mode) == DepthMode.PLANAR:
        depth = hits.t / scale          # d_cam has z = 1
    else:
        depth = hits.t.copy()
    depth = np.where(hit, depth, np.inf).astype(np.float32)

    # segmentation
    seg = np.zeros((h * w, 3), dtype=np.uint8)
    seg[:] = scene.background
    for oid, color in scene.palette.items():
        seg[hits.ids == oid] = color

    # shading: Lambertian direct light with hard shadows, no ambient term
    rgb = np.zeros((h * w, 3))
    idx = np.nonzero(hit)[0]
    if len(idx):
        p = origin + hits.t[idx, None] * dirs[idx]
        n = hits.normals[idx]
        start = p + n * SHADOW_BIAS
        radiance = np.zeros(len(idx))
        for light in scene.lights:
            to_light = np.asarray(light.position, dtype=float) - p
            dist = np.linalg.norm(to_light, axis=1)
            cos = np.einsum('ij,ij->i', n, to_light) / dist
            lit = cos > 0
            if not np.any(lit):
                continue
            blocked = np.zeros(len(idx), dtype=bool)
            blocked[lit] = scene.occluded(start[lit], light)
            contrib = np.where(lit & ~blocked, cos * light.intensity / (dist * dist), 0.0)
            radiance += contrib
        rgb[idx] = scene.albedo_table[hits.ids[idx]] * radiance[:, None]
    rgb8 = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)

    elapsed = time.monotonic() - t0
    Stats.get().timing('render.duration', elapsed)
    logger.debug(f"rendered {w}x{h} in {elapsed:.3f}s, {int(hit.sum())} hits")
    return Frame(rgb8.reshape(h, w, 3), seg.reshape(h, w, 3), depth.reshape(h, w),
                 hits.ids.reshape(h, w))


def render(scene: Scene, cam_pose: Transform, intr: CameraIntrinsics,
           mode: RenderMode, depth_mode: DepthMode = DepthMode.PLANAR) -> npt.NDArray:
    frame = render_all(scene, cam_pose, intr, depth_mode)
    mode = RenderMode(mode)
    if mode == RenderMode.RGB:
        return frame.rgb
    if mode == RenderMode.SEG:
        return frame.seg
    return frame.depth


def unproject(u: npt.ArrayLike, v: npt.ArrayLike, z: npt.ArrayLike,
              intr: CameraIntrinsics) -> npt.NDArray[np.float64]:
    """
    camera-frame points for pixel indices (u, v) at planar depth z
    """
    uu = np.asarray(u, dtype=float)
    vv = np.asarray(v, dtype=float)
    zz = np.asarray(z, dtype=float)
    x = (uu + 0.5 - intr.cx) * zz / intr.fx
    y = (vv + 0.5 - intr.cy) * zz / intr.fy
    return np.stack([x, y, zz], axis=-1)


def project(points: npt.ArrayLike, intr: CameraIntrinsics,
            cam_pose: Optional[Transform] = None) -> npt.NDArray[np.float64]:
    """
    continuous pixel coordinates (u, v) of world points (camera frame if
    no pose); a point on the ray of pixel (i, j) lands at (i + 0.5, j + 0.5)
    """
    p = np.asarray(points, dtype=float)
    if cam_pose is not None:
        p = cam_pose.inverse().apply(p)
    u = intr.fx * p[..., 0] / p[..., 2] + intr.cx
    v = intr.fy * p[..., 1] / p[..., 2] + intr.cy
    return np.stack([u, v], axis=-1)


def depth_to_pointcloud(depth: npt.ArrayLike, intr: CameraIntrinsics, cam_pose: Transform,
                        mask: Optional[npt.ArrayLike] = None,
                        stride: int = 1) -> npt.NDArray[np.float64]:
    """
    world-frame points (n, 3) for finite planar depth pixels,
    optionally restricted by a boolean mask and subsampled by stride
    """
    z = np.asarray(depth, dtype=float)
    if z.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {z.shape} does not match {intr.width}x{intr.height}")
    if stride < 1:
        raise ValueError(f"bad stride {stride}")
    keep = np.isfinite(z) & (z > 0)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    if stride > 1:
        sub = np.zeros_like(keep)
        sub[::stride, ::stride] = True
        keep &= sub
    v, u = np.nonzero(keep)
    pts = unproject(u, v, z[v, u], intr)
    return cam_pose.apply(pts).reshape(-1, 3)


def ray_to_planar(depth: npt.ArrayLike, intr: CameraIntrinsics) -> npt.NDArray[np.float32]:
    """
    convert a ray-length depth image to planar depth
    """
    z = np.asarray(depth, dtype=float)
    scale = np.linalg.norm(intr.rays(), axis=1).reshape(intr.height, intr.width)
    return (z / scale).astype(np.float32)
