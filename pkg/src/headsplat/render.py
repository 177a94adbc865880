"""Software splatting: projection, depth sorting, alpha compositing, and the
analytic color/opacity backward pass.

Two forward paths share one alpha kernel:

- ``composite_oracle`` walks every splat for every pixel with no spatial
  structure; it is the reference the optimized path is tested against.
- ``composite_tiled`` bins splats into screen tiles by their 3-sigma bounds
  and composites each tile independently.

Both paths evaluate identical per-pixel arithmetic in identical depth order
(splat support is truncated at 3 sigma in both), so they agree to floating
round-off, far inside the 1e-5 acceptance band.  Tiles are independent work
units; rendering with any thread count produces identical images.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .geom import Camera, covariances_from_rs, project_ewa_batch
from .sampler import PrimitiveBatch

# Gaussian support is truncated where the Mahalanobis distance exceeds
# SUPPORT_SIGMA; the tile binning radius uses the same bound, which is what
# makes the two compositing paths equivalent.
SUPPORT_SIGMA = 3.0


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    lowpass: float = 0.3
    alpha_clamp: float = 0.99
    transmittance_min: float = 1e-4
    opacity_floor: float = 0.005
    threads: int = 1


@dataclass
class SplatList:
    """Depth-sorted projected splats.

    conics stores the upper triangle (a, b, c) of each inverse 2D covariance;
    prim_index maps each row back to the source primitive in the batch.
    """

    means2d: np.ndarray
    conics: np.ndarray
    radii: np.ndarray
    depths: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    prim_index: np.ndarray
    batch_size: int
    culled_near: int = 0
    culled_offscreen: int = 0

    def __len__(self) -> int:
        return self.means2d.shape[0]


@dataclass
class RenderTarget:
    """Composited image in [0, 1] plus the per-pixel final transmittance."""

    image: np.ndarray
    transmittance: np.ndarray
    background: np.ndarray


def project_batch(batch: PrimitiveBatch, cam: Camera, config: RenderConfig = RenderConfig()) -> SplatList:
    """Project a primitive batch and sort it front to back.

    Primitives behind the near plane or with a 3-sigma footprint entirely
    outside the image are culled silently (counts are reported on the list).
    Depth ties keep primitive-index order via a stable sort.
    """
    n = len(batch)
    if n == 0:
        return SplatList(
            means2d=np.zeros((0, 2)),
            conics=np.zeros((0, 3)),
            radii=np.zeros(0),
            depths=np.zeros(0),
            opacities=np.zeros(0),
            colors=np.zeros((0, 3)),
            prim_index=np.zeros(0, dtype=np.int64),
            batch_size=0,
        )
    covs = covariances_from_rs(batch.rotations, batch.scales)
    means2d, cov2d, depths, in_front = project_ewa_batch(
        covs, batch.positions, cam, lowpass=config.lowpass
    )

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    pd = (det > 0) & (a > 0)
    safe_det = np.where(pd, det, 1.0)
    conics = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = SUPPORT_SIGMA * np.sqrt(lam_max)

    on_screen = (
        (means2d[:, 0] + radii >= 0.0)
        & (means2d[:, 0] - radii <= cam.width)
        & (means2d[:, 1] + radii >= 0.0)
        & (means2d[:, 1] - radii <= cam.height)
    )
    keep = in_front & pd & on_screen
    culled_near = int(np.count_nonzero(~in_front))
    culled_offscreen = int(np.count_nonzero(in_front & ~(pd & on_screen)))

    idx = np.flatnonzero(keep)
    order = np.argsort(depths[idx], kind="stable")
    idx = idx[order]
    return SplatList(
        means2d=means2d[idx],
        conics=conics[idx],
        radii=radii[idx],
        depths=depths[idx],
        opacities=np.asarray(batch.opacities, dtype=np.float64)[idx],
        colors=np.asarray(batch.colors, dtype=np.float64)[idx],
        prim_index=idx,
        batch_size=n,
        culled_near=culled_near,
        culled_offscreen=culled_offscreen,
    )


def _alpha_kernel(dx, dy, ca, cb2, cc, opacity, config: RenderConfig):
    """Shared alpha math: m = ca dx^2 + 2 cb dx dy + cc dy^2, truncated at
    SUPPORT_SIGMA, alpha = min(opacity * exp(-m/2), alpha_clamp).

    Both compositing paths and the backward pass evaluate exactly this
    expression tree, which keeps oracle and tiled outputs elementwise equal.
    ``cb2`` carries 2*cb so the caller pays the doubling once.
    """
    m = ca * dx
    m *= dx
    t = cb2 * dx
    t *= dy
    m += t
    np.multiply(cc, dy, out=t)
    t *= dy
    m += t
    inside = m <= SUPPORT_SIGMA * SUPPORT_SIGMA
    m *= -0.5
    g = np.exp(m, out=m)
    g *= inside
    raw = opacity * g
    clamped = raw > config.alpha_clamp
    alpha = np.where(clamped, config.alpha_clamp, raw)
    return alpha, g, clamped


def _splat_alpha(splats: SplatList, i: int, px: np.ndarray, py: np.ndarray, config: RenderConfig):
    """Alpha and falloff of splat ``i`` at pixel centers (px, py)."""
    dx = px - splats.means2d[i, 0]
    dy = py - splats.means2d[i, 1]
    ca, cb, cc = splats.conics[i]
    return _alpha_kernel(dx, dy, ca, 2.0 * cb, cc, splats.opacities[i], config)


def _splat_alpha_rows(splats: SplatList, rows: np.ndarray, px: np.ndarray, py: np.ndarray, config: RenderConfig):
    """Batched ``_splat_alpha`` over splat ``rows``: (K, P) arrays."""
    dx = px[None, :] - splats.means2d[rows, 0][:, None]
    dy = py[None, :] - splats.means2d[rows, 1][:, None]
    ca = splats.conics[rows, 0][:, None]
    cb2 = 2.0 * splats.conics[rows, 1][:, None]
    cc = splats.conics[rows, 2][:, None]
    return _alpha_kernel(dx, dy, ca, cb2, cc, splats.opacities[rows][:, None], config)


def _pixel_centers(width: int, height: int):
    px = np.arange(width, dtype=np.float64) + 0.5
    py = np.arange(height, dtype=np.float64) + 0.5
    return np.meshgrid(px, py)


def composite_oracle(
    splats: SplatList,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = RenderConfig(),
) -> RenderTarget:
    """Reference compositor: every pixel walks every splat front to back.

    C = sum_i c_i a_i T_i with T_i = prod_{j<i} (1 - a_j); the walk stops once
    T drops below ``transmittance_min`` and the remaining transmittance lights
    the background.
    """
    bg = np.asarray(background, dtype=np.float64)
    px, py = _pixel_centers(cam.width, cam.height)
    color = np.zeros((cam.height, cam.width, 3), dtype=np.float64)
    trans = np.ones((cam.height, cam.width), dtype=np.float64)
    for i in range(len(splats)):
        active = trans >= config.transmittance_min
        if not active.any():
            break
        alpha, _, _ = _splat_alpha(splats, i, px, py, config)
        alpha = alpha * active
        weight = alpha * trans
        color += weight[..., None] * splats.colors[i]
        trans *= 1.0 - alpha
    color += trans[..., None] * bg
    return RenderTarget(image=color, transmittance=trans, background=bg)


def _tile_pairs(splats: SplatList, cam: Camera, tile_size: int):
    """(tile id, splat row) pairs sorted by tile, depth order preserved."""
    ntx = (cam.width + tile_size - 1) // tile_size
    nty = (cam.height + tile_size - 1) // tile_size
    x0 = np.clip(np.floor((splats.means2d[:, 0] - splats.radii) / tile_size).astype(np.int64), 0, ntx - 1)
    x1 = np.clip(np.floor((splats.means2d[:, 0] + splats.radii) / tile_size).astype(np.int64), 0, ntx - 1)
    y0 = np.clip(np.floor((splats.means2d[:, 1] - splats.radii) / tile_size).astype(np.int64), 0, nty - 1)
    y1 = np.clip(np.floor((splats.means2d[:, 1] + splats.radii) / tile_size).astype(np.int64), 0, nty - 1)

    spans_x = x1 - x0 + 1
    spans_y = y1 - y0 + 1
    pair_tiles = []
    pair_rows = []
    for dy in range(int(spans_y.max(initial=0))):
        for dx in range(int(spans_x.max(initial=0))):
            mask = (dx < spans_x) & (dy < spans_y)
            if not mask.any():
                continue
            rows = np.flatnonzero(mask)
            pair_tiles.append((y0[rows] + dy) * ntx + (x0[rows] + dx))
            pair_rows.append(rows)
    if not pair_tiles:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), ntx, nty
    tiles = np.concatenate(pair_tiles)
    rows = np.concatenate(pair_rows)
    order = np.lexsort((rows, tiles))
    return tiles[order], rows[order], ntx, nty


def _tile_bounds(tile: int, ntx: int, tile_size: int, width: int, height: int):
    ty, tx = divmod(tile, ntx)
    x_lo = tx * tile_size
    y_lo = ty * tile_size
    return x_lo, min(x_lo + tile_size, width), y_lo, min(y_lo + tile_size, height)


def _composite_tile(splats, rows, px, py, bg, config):
    """Composite the splats ``rows`` over flattened pixel centers."""
    p = px.shape[0]
    alpha, _, _ = _splat_alpha_rows(splats, rows, px, py, config)
    trans_incl = np.cumprod(1.0 - alpha, axis=0)
    trans_excl = np.vstack([np.ones((1, p)), trans_incl[:-1]])
    active = trans_excl >= config.transmittance_min
    weight = alpha * trans_excl * active
    color = weight.T @ splats.colors[rows]
    trans_final = np.where(active, trans_incl, 1.0).min(axis=0)
    return color + trans_final[:, None] * bg, trans_final


def composite_tiled(
    splats: SplatList,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = RenderConfig(),
) -> RenderTarget:
    """Tile-binned compositor; matches ``composite_oracle`` within 1e-5.

    Splats are binned by the axis-aligned box of their 3-sigma footprint;
    each tile composites its bin in global depth order.  Tiles never share
    output pixels, so the optional thread pool cannot change the result.
    """
    bg = np.asarray(background, dtype=np.float64)
    color = np.empty((cam.height, cam.width, 3), dtype=np.float64)
    color[:] = bg
    trans = np.ones((cam.height, cam.width), dtype=np.float64)
    if len(splats) == 0:
        return RenderTarget(image=color, transmittance=trans, background=bg)

    tiles, rows, ntx, _ = _tile_pairs(splats, cam, config.tile_size)
    if tiles.size == 0:
        return RenderTarget(image=color, transmittance=trans, background=bg)
    bounds = np.searchsorted(tiles, np.arange(tiles[-1] + 2))
    nonempty = np.unique(tiles)

    def run_tile(tile: int) -> None:
        lo, hi = bounds[tile], bounds[tile + 1]
        x_lo, x_hi, y_lo, y_hi = _tile_bounds(tile, ntx, config.tile_size, cam.width, cam.height)
        gx, gy = np.meshgrid(
            np.arange(x_lo, x_hi, dtype=np.float64) + 0.5,
            np.arange(y_lo, y_hi, dtype=np.float64) + 0.5,
        )
        tile_color, tile_trans = _composite_tile(
            splats, rows[lo:hi], gx.reshape(-1), gy.reshape(-1), bg, config
        )
        shape = (y_hi - y_lo, x_hi - x_lo)
        color[y_lo:y_hi, x_lo:x_hi] = tile_color.reshape(*shape, 3)
        trans[y_lo:y_hi, x_lo:x_hi] = tile_trans.reshape(shape)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(run_tile, nonempty))
    else:
        for tile in nonempty:
            run_tile(tile)
    return RenderTarget(image=color, transmittance=trans, background=bg)


def backward_color_opacity(
    splats: SplatList,
    cam: Camera,
    grad_image: np.ndarray,
    background=(0.0, 0.0, 0.0),
    config: RenderConfig = RenderConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the composited image w.r.t. color and opacity.

    Recomputes the forward walk per tile and applies the adjoints

        dC/dc_i = a_i T_i
        dC/da_i = c_i T_i - (suffix color after i + bg * T_final) / (1 - a_i)
        da_i/do_i = g_i   (zero where the alpha clamp is engaged)

    Returns (dL/dcolor, dL/dopacity) shaped for the ORIGINAL batch; culled
    primitives receive zero.  Per-tile partials are merged in ascending tile
    order, keeping results independent of any threading in the forward pass.
    """
    if grad_image.shape != (cam.height, cam.width, 3):
        raise ValueError("gradient image shape must match the camera resolution")
    bg = np.asarray(background, dtype=np.float64)
    grad_color = np.zeros((splats.batch_size, 3), dtype=np.float64)
    grad_opacity = np.zeros(splats.batch_size, dtype=np.float64)
    if len(splats) == 0:
        return grad_color, grad_opacity

    tiles, rows, ntx, _ = _tile_pairs(splats, cam, config.tile_size)
    if tiles.size == 0:
        return grad_color, grad_opacity
    bounds = np.searchsorted(tiles, np.arange(tiles[-1] + 2))

    for tile in np.unique(tiles):
        lo, hi = bounds[tile], bounds[tile + 1]
        tile_rows = rows[lo:hi]
        x_lo, x_hi, y_lo, y_hi = _tile_bounds(tile, ntx, config.tile_size, cam.width, cam.height)
        gx, gy = np.meshgrid(
            np.arange(x_lo, x_hi, dtype=np.float64) + 0.5,
            np.arange(y_lo, y_hi, dtype=np.float64) + 0.5,
        )
        px, py = gx.reshape(-1), gy.reshape(-1)
        p = px.shape[0]

        alpha, falloff, clamped = _splat_alpha_rows(splats, tile_rows, px, py, config)
        trans_incl = np.cumprod(1.0 - alpha, axis=0)
        trans_excl = np.vstack([np.ones((1, p)), trans_incl[:-1]])
        active = trans_excl >= config.transmittance_min
        weight = alpha * trans_excl * active

        colors = splats.colors[tile_rows]  # (K, 3)
        contrib = weight[:, :, None] * colors[:, None, :]
        prefix = np.cumsum(contrib, axis=0)
        total = prefix[-1]
        trans_final = np.where(active, trans_incl, 1.0).min(axis=0)

        grad_pix = grad_image[y_lo:y_hi, x_lo:x_hi].reshape(p, 3)

        # dL/dc_k = sum_p w_kp * dL/dC_p
        g_color = weight @ grad_pix

        suffix = total[None, :, :] - prefix  # contributions strictly after k
        residual = suffix + bg[None, None, :] * trans_final[None, :, None]
        dc_da = colors[:, None, :] * trans_excl[:, :, None] - residual / (1.0 - alpha)[:, :, None]
        da = (dc_da * grad_pix[None, :, :]).sum(axis=2)
        g_opacity = (da * falloff * active * ~clamped).sum(axis=1)

        np.add.at(grad_color, splats.prim_index[tile_rows], g_color)
        np.add.at(grad_opacity, splats.prim_index[tile_rows], g_opacity)
    return grad_color, grad_opacity


def backprop_to_atlas(
    grad_color: np.ndarray,
    grad_opacity: np.ndarray,
    batch: PrimitiveBatch,
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of the grid sampler's corner averaging.

    Each of a triangle's three corner texels receives one third of the
    triangle's gradient; texels shared by several triangles accumulate.
    Returns (atlas color gradient (H, W, 3), atlas opacity gradient (H, W)).
    """
    if grad_color.shape != (len(batch), 3) or grad_opacity.shape != (len(batch),):
        raise ValueError("gradient arrays do not match the batch size")
    h, w = batch.source_shape
    atlas_color = np.zeros((h, w, 3), dtype=np.float64)
    atlas_opacity = np.zeros((h, w), dtype=np.float64)
    rows = batch.corner_rows.reshape(-1)
    cols = batch.corner_cols.reshape(-1)
    np.add.at(atlas_color, (rows, cols), np.repeat(grad_color / 3.0, 3, axis=0))
    np.add.at(atlas_opacity, (rows, cols), np.repeat(grad_opacity / 3.0, 3))
    return atlas_color, atlas_opacity


# ---------------------------------------------------------------------------
# Image files: binary PPM (P6, sRGB-encoded) and raw float CIMG dumps.
# ---------------------------------------------------------------------------

_CIMG_MAGIC = b"CIMG"


def encode_srgb_u8(image: np.ndarray) -> np.ndarray:
    """Gamma-encode a linear [0, 1] image to 8-bit (x^(1/2.2) * 255)."""
    clipped = np.clip(image, 0.0, 1.0)
    return np.round(255.0 * clipped ** (1.0 / 2.2)).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(encode_srgb_u8(image).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM back to uint8 (no gamma decode)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ParseError(f"{path}: not a binary PPM (offset 0)")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError as exc:
        raise ParseError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h * 3)
    return data.reshape(h, w, 3).copy()


def write_cimg(path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(_CIMG_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_cimg(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CIMG_MAGIC:
        raise ParseError(f"{path}: bad magic {blob[:4]!r} (offset 0)")
    w, h = struct.unpack_from("<II", blob, 4)
    expected = 12 + w * h * 3 * 4
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, found {len(blob)} (offset 12)")
    return np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w, 3).copy()
