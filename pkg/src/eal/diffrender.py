"""Software rasterizer with exact gradients of pixel losses w.r.t. texels.

`render` is the differentiable path: bilinear texture sampling recorded on a
tape so any d(loss)/d(rgb) can be scattered back to texel gradients exactly.
`reference_render` is the deliberately different stand-in for a black-box
renderer: nearest sampling, top-left sample offset, lower-id depth
tie-breaking, and textures quantized to 8 bits first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenegraph import CameraPose, Scene, wall_panels

FLOOR_ID = -2
WALL_ID = -3
_ZNEAR = 0.05


class InvalidPoseError(ValueError):
    """Raised for degenerate cameras (fov outside (0, pi))."""


@dataclass
class Framebuffer:
    rgb: np.ndarray        # (H, W, 3) float64 in [0, 1]
    object_id: np.ndarray  # (H, W) int32; -1 background, -2 floor, -3 wall
    depth: np.ndarray      # (H, W) float64, inf where background
    pose: CameraPose
    sampling: str          # "bilinear" | "nearest"


@dataclass
class RenderTape:
    """Per-pixel bilinear sampling record for textured-object pixels."""

    shape: tuple                 # (H, W)
    pix: np.ndarray              # (n,) flat pixel index y*W + x
    obj: np.ndarray              # (n,) object id per entry
    tri: np.ndarray              # (n,) triangle id within the object
    uv: np.ndarray               # (n, 2)
    texel_idx: np.ndarray        # (n, 4) flat texel index into (TH*TW)
    weights: np.ndarray          # (n, 4) bilinear weights, sum to 1
    tex_shapes: dict             # object id -> (TH, TW)
    static_rgb: np.ndarray       # (H, W, 3) colors of non-object pixels

    def replay(self, textures: dict) -> np.ndarray:
        """Recompute rgb from current textures; geometry is frozen."""
        rgb = self.static_rgb.copy().reshape(-1, 3)
        for oid in self.tex_shapes:
            sel = self.obj == oid
            if not sel.any():
                continue
            tex = textures[oid].reshape(-1, 3).astype(np.float64)
            colors = np.einsum("nk,nkc->nc", self.weights[sel],
                               tex[self.texel_idx[sel]])
            rgb[self.pix[sel]] = colors
        return rgb.reshape(self.shape + (3,))


def _camera_basis(pose: CameraPose):
    if not 0.0 < pose.fov < np.pi:
        raise InvalidPoseError(f"fov {pose.fov} outside (0, pi)")
    cy, sy = np.cos(pose.yaw), np.sin(pose.yaw)
    cp, sp = np.cos(pose.pitch), np.sin(pose.pitch)
    fwd = np.array([sy * cp, sp, cy * cp])
    right = np.array([cy, 0.0, -sy])
    up = np.cross(fwd, right)
    return right, up, fwd


def _structural_triangles(scene: Scene):
    """Flat-colored floor and wall triangles: (verts(3,3), color, owner id)."""
    tris = []
    for room in scene.rooms:
        x0, z0, x1, z1 = room.rect
        c = room.floor_color
        a, b, cc, d = ((x0, 0, z0), (x1, 0, z0), (x1, 0, z1), (x0, 0, z1))
        tris.append((np.array([a, b, cc], dtype=np.float64), c, FLOOR_ID))
        tris.append((np.array([a, cc, d], dtype=np.float64), c, FLOOR_ID))
    for w in scene.walls:
        for x0, z0, x1, z1, y0, y1, wc in wall_panels(scene, w):
            a = (x0, y0, z0)
            b = (x1, y0, z1)
            c2 = (x1, y1, z1)
            d = (x0, y1, z0)
            tris.append((np.array([a, b, c2], dtype=np.float64), wc, WALL_ID))
            tris.append((np.array([a, c2, d], dtype=np.float64), wc, WALL_ID))
    return tris


def _clip_near(pts_cam, attrs):
    """Sutherland-Hodgman clip of a polygon against z >= _ZNEAR.

    attrs rows are interpolated linearly alongside the positions.
    """
    out_p, out_a = [], []
    n = len(pts_cam)
    for i in range(n):
        p0, p1 = pts_cam[i], pts_cam[(i + 1) % n]
        a0, a1 = attrs[i], attrs[(i + 1) % n]
        in0, in1 = p0[2] >= _ZNEAR, p1[2] >= _ZNEAR
        if in0:
            out_p.append(p0)
            out_a.append(a0)
        if in0 != in1:
            t = (_ZNEAR - p0[2]) / (p1[2] - p0[2])
            out_p.append(p0 + t * (p1 - p0))
            out_a.append(a0 + t * (a1 - a0))
    return out_p, out_a


def _sample_bilinear(tex, uv):
    th, tw, _ = tex.shape
    fx = np.clip(uv[:, 0], 0.0, 1.0) * (tw - 1)
    fy = np.clip(uv[:, 1], 0.0, 1.0) * (th - 1)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    ax = fx - x0
    ay = fy - y0
    w00 = (1 - ax) * (1 - ay)
    w10 = ax * (1 - ay)
    w01 = (1 - ax) * ay
    w11 = ax * ay
    idx = np.stack([y0 * tw + x0, y0 * tw + x1, y1 * tw + x0, y1 * tw + x1], axis=1)
    wts = np.stack([w00, w10, w01, w11], axis=1)
    flat = tex.reshape(-1, 3).astype(np.float64)
    colors = np.einsum("nk,nkc->nc", wts, flat[idx])
    return colors, idx, wts


def _sample_nearest(tex, uv):
    th, tw, _ = tex.shape
    x = np.clip(np.rint(np.clip(uv[:, 0], 0, 1) * (tw - 1)).astype(np.int64), 0, tw - 1)
    y = np.clip(np.rint(np.clip(uv[:, 1], 0, 1) * (th - 1)).astype(np.int64), 0, th - 1)
    return tex.reshape(-1, 3).astype(np.float64)[y * tw + x]


def _rasterize(scene: Scene, pose: CameraPose, resolution, sampling,
               center_offset, tie_lower_id, quantize, want_tape):
    h, w = resolution
    if h < 8 or w < 8:
        raise ValueError(f"resolution must be at least 8x8, got {resolution}")
    right, up, fwd = _camera_basis(pose)
    focal = 0.5 * w / np.tan(pose.fov / 2)
    cx, cy = w / 2.0, h / 2.0

    rgb = np.empty((h, w, 3), dtype=np.float64)
    rgb[:] = np.asarray(scene.background_color, dtype=np.float64)
    oid_buf = np.full((h, w), -1, dtype=np.int32)
    tri_buf = np.full((h, w), -1, dtype=np.int32)
    depth = np.full((h, w), np.inf, dtype=np.float64)
    uv_buf = np.zeros((h, w, 2), dtype=np.float64)

    def to_cam(pts):
        rel = pts - pose.position
        return np.stack([rel @ right, rel @ up, rel @ fwd], axis=1)

    # pixel sample positions in screen space
    xs = np.arange(w) + center_offset
    ys = np.arange(h) + center_offset

    def draw_triangle(p_cam, attr, owner, tri_id, textured):
        pts, ats = _clip_near(list(p_cam), list(attr))
        if len(pts) < 3:
            return
        pts = np.asarray(pts)
        ats = np.asarray(ats)
        sx = cx + focal * pts[:, 0] / pts[:, 2]
        sy = cy - focal * pts[:, 1] / pts[:, 2]
        inv_z = 1.0 / pts[:, 2]
        for k in range(1, len(pts) - 1):
            _fill(sx[[0, k, k + 1]], sy[[0, k, k + 1]], inv_z[[0, k, k + 1]],
                  ats[[0, k, k + 1]], owner, tri_id, textured)

    def _fill(tx, ty, inv_z, ats, owner, tri_id, textured):
        x0 = max(0, int(np.floor(tx.min() - center_offset)))
        x1 = min(w - 1, int(np.ceil(tx.max() - center_offset)))
        y0 = max(0, int(np.floor(ty.min() - center_offset)))
        y1 = min(h - 1, int(np.ceil(ty.max() - center_offset)))
        if x1 < x0 or y1 < y0:
            return
        px = xs[x0:x1 + 1][None, :]
        py = ys[y0:y1 + 1][:, None]
        # edge functions (signed areas)
        e0 = (tx[2] - tx[1]) * (py - ty[1]) - (ty[2] - ty[1]) * (px - tx[1])
        e1 = (tx[0] - tx[2]) * (py - ty[2]) - (ty[0] - ty[2]) * (px - tx[2])
        e2 = (tx[1] - tx[0]) * (py - ty[0]) - (ty[1] - ty[0]) * (px - tx[0])
        area = (tx[1] - tx[0]) * (ty[2] - ty[0]) - (ty[1] - ty[0]) * (tx[2] - tx[0])
        if abs(area) < 1e-12:
            return
        if area > 0:
            inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        else:
            inside = (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
        if not inside.any():
            return
        b0 = e0 / area
        b1 = e1 / area
        b2 = e2 / area
        zi = b0 * inv_z[0] + b1 * inv_z[1] + b2 * inv_z[2]
        zval = 1.0 / np.where(zi > 1e-12, zi, 1e-12)
        sub_d = depth[y0:y1 + 1, x0:x1 + 1]
        sub_o = oid_buf[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (zval < sub_d - 1e-12)
        if tie_lower_id:
            tie = inside & (np.abs(zval - sub_d) <= 1e-12) & (owner < sub_o)
            closer |= tie
        if not closer.any():
            return
        sub_t = tri_buf[y0:y1 + 1, x0:x1 + 1]
        sub_d[closer] = zval[closer]
        sub_o[closer] = owner
        sub_t[closer] = tri_id
        if textured:
            # perspective-correct uv
            u_over_z = (b0 * ats[0, 0] * inv_z[0] + b1 * ats[1, 0] * inv_z[1]
                        + b2 * ats[2, 0] * inv_z[2])
            v_over_z = (b0 * ats[0, 1] * inv_z[0] + b1 * ats[1, 1] * inv_z[1]
                        + b2 * ats[2, 1] * inv_z[2])
            sub_uv = uv_buf[y0:y1 + 1, x0:x1 + 1]
            sub_uv[closer, 0] = (u_over_z * zval)[closer]
            sub_uv[closer, 1] = (v_over_z * zval)[closer]
        else:
            rgb[y0:y1 + 1, x0:x1 + 1][closer] = ats[0]

    # structural geometry first (flat colors)
    for verts, color, owner in _structural_triangles(scene):
        attr = np.tile(np.asarray(color, dtype=np.float64), (3, 1))
        draw_triangle(to_cam(verts), attr, owner, -1, textured=False)

    textures = {}
    for obj in scene.objects:
        tex = obj.mesh.texture.astype(np.float64)
        if quantize:
            tex = np.round(tex * 255.0) / 255.0
        textures[obj.id] = tex
        verts_world = obj.mesh.vertices + obj.base_position
        cam = to_cam(verts_world)
        for ti, tri in enumerate(obj.mesh.triangles):
            draw_triangle(cam[tri], obj.mesh.uvs[tri], obj.id, ti, textured=True)

    # resolve textured pixels
    tape = None
    entries_pix, entries_obj, entries_tri = [], [], []
    entries_uv, entries_idx, entries_w = [], [], []
    for obj in scene.objects:
        mask = oid_buf == obj.id
        if not mask.any():
            continue
        uv = uv_buf[mask]
        if sampling == "bilinear":
            colors, idx, wts = _sample_bilinear(textures[obj.id], uv)
            if want_tape:
                ypix, xpix = np.nonzero(mask)
                entries_pix.append(ypix * w + xpix)
                entries_obj.append(np.full(len(uv), obj.id, dtype=np.int32))
                entries_tri.append(tri_buf[mask])
                entries_uv.append(uv)
                entries_idx.append(idx)
                entries_w.append(wts)
        else:
            colors = _sample_nearest(textures[obj.id], uv)
        rgb[mask] = colors

    if want_tape:
        tape = RenderTape(
            shape=(h, w),
            pix=(np.concatenate(entries_pix) if entries_pix
                 else np.empty(0, dtype=np.int64)),
            obj=(np.concatenate(entries_obj) if entries_obj
                 else np.empty(0, dtype=np.int32)),
            tri=(np.concatenate(entries_tri) if entries_tri
                 else np.empty(0, dtype=np.int32)),
            uv=(np.concatenate(entries_uv) if entries_uv
                else np.empty((0, 2))),
            texel_idx=(np.concatenate(entries_idx) if entries_idx
                       else np.empty((0, 4), dtype=np.int64)),
            weights=(np.concatenate(entries_w) if entries_w
                     else np.empty((0, 4))),
            tex_shapes={o.id: o.mesh.texture.shape[:2] for o in scene.objects
                        if (oid_buf == o.id).any()},
            static_rgb=rgb.copy(),
        )

    fb = Framebuffer(rgb=rgb, object_id=oid_buf, depth=depth, pose=pose,
                     sampling=sampling)
    return fb, tape


def render(scene: Scene, pose: CameraPose, resolution, sampling="bilinear"):
    """Differentiable render: (Framebuffer, RenderTape). Tape only in bilinear."""
    fb, tape = _rasterize(scene, pose, resolution, sampling,
                          center_offset=0.5, tie_lower_id=False,
                          quantize=False, want_tape=(sampling == "bilinear"))
    return fb, tape


def reference_render(scene: Scene, pose: CameraPose, resolution) -> Framebuffer:
    """Emulated black-box renderer; no gradient tape."""
    fb, _ = _rasterize(scene, pose, resolution, "nearest",
                       center_offset=0.0, tie_lower_id=True,
                       quantize=True, want_tape=False)
    return fb


def backward_texture(tape: RenderTape, d_rgb: np.ndarray) -> dict:
    """Scatter d(loss)/d(rgb) back through bilinear sampling to texel grads."""
    if tape is None:
        raise ValueError("backward_texture requires a bilinear-mode tape")
    h, w = tape.shape
    if d_rgb.shape != (h, w, 3):
        raise ValueError(f"d_rgb shape {d_rgb.shape} does not match frame {(h, w, 3)}")
    d_flat = d_rgb.reshape(-1, 3)
    grads = {}
    for oid, (th, tw) in tape.tex_shapes.items():
        sel = tape.obj == oid
        g = np.zeros((th * tw, 3), dtype=np.float64)
        if sel.any():
            contrib = tape.weights[sel][:, :, None] * d_flat[tape.pix[sel]][:, None, :]
            np.add.at(g, tape.texel_idx[sel].reshape(-1),
                      contrib.reshape(-1, 3))
        grads[oid] = g.reshape(th, tw, 3)
    return grads


def extract_objects(fb: Framebuffer) -> set:
    """Object ids visible in the frame; background and structure excluded."""
    ids = np.unique(fb.object_id)
    return {int(i) for i in ids if i >= 0}


def visible_pixel_counts(fb: Framebuffer) -> dict:
    ids, counts = np.unique(fb.object_id, return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts) if i >= 0}


# ---------------------------------------------------------------- frame dump

def save_ppm(path, rgb: np.ndarray):
    """Binary PPM (P6) dump of an rgb float image."""
    h, w, _ = rgb.shape
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def save_id_buffer(path, object_id: np.ndarray):
    """Sidecar text file for the object-id buffer, one row per line."""
    with open(path, "w") as f:
        for row in object_id:
            f.write(" ".join(str(int(v)) for v in row) + "\n")
