"""Synthetic multi-annotator boundary datasets, augmentation, and raster I/O.

The generator draws filled shapes with known outlines, so ground truth is
exact by construction. Annotator disagreement is modeled as a smooth
displacement of the outline along its normal, bounded by ``jitter_px``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from .errors import ContractError, ParseError, ShapeError, ValidationError
from .evalbench import thin_binary
from .losses import AnnotationSet
from .tensorcore import Tensor

_ARC_STEP = 0.3  # outline sampling step in pixels; dense enough to leave no holes


@dataclass
class Sample:
    id: str
    image: Tensor
    annotations: AnnotationSet
    # unperturbed boundary when the sample came from the generator; kept out
    # of the annotation set so consensus weights reflect annotators only
    true_boundary: np.ndarray | None = None

    def __post_init__(self):
        shape = self.image.data.shape
        if shape[0] != 1 or shape[1] not in (1, 3):
            raise ShapeError(f"sample image must be (1, 1|3, h, w), got {shape}")
        if shape[2:] != self.annotations.spatial_shape:
            raise ShapeError(
                f"image spatial dims {shape[2:]} do not match "
                f"annotations {self.annotations.spatial_shape}")


@dataclass(frozen=True)
class AugmentSpec:
    scale_range: tuple = (1.0, 1.0)
    rotation_angles: tuple = (0.0,)
    flips: bool = False
    crop: tuple | None = None

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ContractError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if len(self.rotation_angles) == 0:
            raise ContractError("rotation_angles must list at least one angle")
        if not all(np.isfinite(a) for a in self.rotation_angles):
            raise ContractError("rotation angles must be finite")
        if self.crop is not None:
            ch, cw = self.crop
            if ch < 1 or cw < 1:
                raise ContractError(f"crop dims must be positive, got {self.crop}")

    def output_count(self):
        return len(self.rotation_angles) * (2 if self.flips else 1)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    ann_paths: tuple
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        for e in self.entries:
            if len(e.ann_paths) < 1:
                raise ValidationError(f"manifest entry '{e.id}' lists no annotations")


# ---------------------------------------------------------------------------
# shape outlines


def _disk_outline(rng, center, radius):
    n = max(int(np.ceil(2 * np.pi * radius / _ARC_STEP)), 16)
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    pts = np.stack([center[0] + radius * np.sin(theta),
                    center[1] + radius * np.cos(theta)], axis=1)
    normals = np.stack([np.sin(theta), np.cos(theta)], axis=1)
    return pts, normals


def _polygon_outline(vertices):
    verts = np.asarray(vertices, dtype=float)
    pts_parts, nrm_parts = [], []
    k = len(verts)
    for i in range(k):
        a, b = verts[i], verts[(i + 1) % k]
        seg = b - a
        length = float(np.hypot(*seg))
        n = max(int(np.ceil(length / _ARC_STEP)), 2)
        t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
        pts_parts.append(a + t * seg)
        normal = np.array([seg[1], -seg[0]]) / length
        nrm_parts.append(np.tile(normal, (n, 1)))
    return np.concatenate(pts_parts), np.concatenate(nrm_parts)


def _disk_fill(size, center, radius):
    yy, xx = np.mgrid[:size[0], :size[1]]
    return np.hypot(yy - center[0], xx - center[1]) <= radius


def _polygon_fill(size, vertices):
    # even winding via half-plane signs; vertices are convex and CCW-or-CW
    yy, xx = np.mgrid[:size[0], :size[1]]
    verts = np.asarray(vertices, dtype=float)
    k = len(verts)
    signs = []
    for i in range(k):
        a, b = verts[i], verts[(i + 1) % k]
        cross = (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])
        signs.append(cross)
    stacked = np.stack(signs)
    return np.all(stacked >= 0, axis=0) | np.all(stacked <= 0, axis=0)


def _rasterize(points, size):
    canvas = np.zeros(size, dtype=bool)
    ints = np.round(points).astype(int)
    keep = ((ints[:, 0] >= 0) & (ints[:, 0] < size[0])
            & (ints[:, 1] >= 0) & (ints[:, 1] < size[1]))
    ints = ints[keep]
    canvas[ints[:, 0], ints[:, 1]] = True
    return canvas


def _sample_shape(rng, size, margin):
    h, w = size
    lim = min(h, w)
    kind = ["disk", "rect", "triangle"][int(rng.integers(0, 3))]
    if kind == "disk":
        r = float(rng.uniform(5.0, max(lim / 4.0, 5.5)))
        cy = float(rng.uniform(margin + r, h - 1 - margin - r))
        cx = float(rng.uniform(margin + r, w - 1 - margin - r))
        pts, normals = _disk_outline(rng, (cy, cx), r)
        fill = _disk_fill(size, (cy, cx), r)
        box = (cy - r, cy + r, cx - r, cx + r)
    elif kind == "rect":
        ry = float(rng.uniform(4.0, max(lim / 4.0, 4.5)))
        rx = float(rng.uniform(4.0, max(lim / 4.0, 4.5)))
        cy = float(rng.uniform(margin + ry, h - 1 - margin - ry))
        cx = float(rng.uniform(margin + rx, w - 1 - margin - rx))
        verts = [(cy - ry, cx - rx), (cy - ry, cx + rx), (cy + ry, cx + rx), (cy + ry, cx - rx)]
        pts, normals = _polygon_outline(verts)
        fill = _polygon_fill(size, verts)
        box = (cy - ry, cy + ry, cx - rx, cx + rx)
    else:
        r = float(rng.uniform(6.0, max(lim / 4.0, 6.5)))
        cy = float(rng.uniform(margin + r, h - 1 - margin - r))
        cx = float(rng.uniform(margin + r, w - 1 - margin - r))
        while True:
            ang = np.sort(rng.uniform(0, 2 * np.pi, size=3))
            verts = [(cy + r * np.sin(a), cx + r * np.cos(a)) for a in ang]
            area = abs((verts[1][0] - verts[0][0]) * (verts[2][1] - verts[0][1])
                       - (verts[2][0] - verts[0][0]) * (verts[1][1] - verts[0][1])) / 2
            if area >= 0.35 * r * r:
                break
        pts, normals = _polygon_outline(verts)
        fill = _polygon_fill(size, verts)
        box = (cy - r, cy + r, cx - r, cx + r)
    return pts, normals, fill, box


def _boxes_clash(box, others, gap):
    y0, y1, x0, x1 = box
    for oy0, oy1, ox0, ox1 in others:
        if y0 - gap < oy1 and oy0 < y1 + gap and x0 - gap < ox1 and ox0 < x1 + gap:
            return True
    return False


def _smooth_displacement(rng, n, jitter_px):
    s = np.arange(n) / n
    d = np.zeros(n)
    for k in (1, 2, 3):
        d += rng.uniform(0.25, 1.0) * np.sin(2 * np.pi * k * s + rng.uniform(0, 2 * np.pi))
    amp = jitter_px * rng.uniform(0.45, 0.85)
    peak = np.max(np.abs(d))
    if peak > 0:
        d *= amp / peak
    else:
        d[:] = 0.0
    return d


def gen_synthetic(count, size, annotators, jitter_px, seed):
    """Deterministic synthetic dataset: shapes on a smooth background.

    Each annotator sees the true outline displaced along its normal by a
    smooth field bounded by jitter_px, re-rasterized at unit width.
    """
    h, w = int(size[0]), int(size[1])
    if min(h, w) < 24:
        raise ContractError(f"image size must be at least 24x24, got {size}")
    if annotators < 1:
        raise ContractError(f"annotators must be >= 1, got {annotators}")
    if jitter_px < 0:
        raise ContractError(f"jitter_px must be >= 0, got {jitter_px}")
    if count < 0:
        raise ContractError(f"count must be >= 0, got {count}")

    margin = 4.0 + float(np.ceil(jitter_px))
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        n_shapes = int(rng.integers(1, 5))
        shapes, boxes = [], []
        for _ in range(n_shapes):
            for _attempt in range(40):
                pts, normals, fill, box = _sample_shape(rng, (h, w), margin)
                if not _boxes_clash(box, boxes, gap=3.0):
                    shapes.append((pts, normals, fill))
                    boxes.append(box)
                    break

        true_canvas = np.zeros((h, w), dtype=bool)
        for pts, _, _ in shapes:
            true_canvas |= _rasterize(pts, (h, w))
        true_map = thin_binary(true_canvas)

        ann_maps = []
        for _a in range(annotators):
            canvas = np.zeros((h, w), dtype=bool)
            for pts, normals, _ in shapes:
                d = _smooth_displacement(rng, len(pts), jitter_px)
                canvas |= _rasterize(pts + d[:, None] * normals, (h, w))
            ann_maps.append(thin_binary(canvas).astype(float))
        if jitter_px == 0:
            ann_maps = [true_map.astype(float) for _ in range(annotators)]

        background = gaussian_filter(rng.random((h, w)), sigma=max(h, w) / 10.0)
        lo, hi = background.min(), background.max()
        img = 0.35 + 0.25 * (background - lo) / max(hi - lo, 1e-12)
        for _, _, fill in shapes:
            if rng.random() < 0.5:
                tone = float(rng.uniform(0.02, 0.20))
            else:
                tone = float(rng.uniform(0.78, 0.98))
            img[fill] = tone
        img = gaussian_filter(img, sigma=0.6)
        img = np.clip(img + rng.normal(0.0, 0.02, (h, w)), 0.0, 1.0)

        samples.append(Sample(
            id=f"syn-{seed}-{i:04d}",
            image=Tensor(img[None, None]),
            annotations=AnnotationSet(ann_maps),
            true_boundary=true_map.astype(float),
        ))
    return samples


def true_outline(sample):
    """Unperturbed boundary of a generated sample; falls back to annotator 0."""
    if sample.true_boundary is not None:
        return sample.true_boundary.copy()
    return sample.annotations.maps[0].copy()


# ---------------------------------------------------------------------------
# augmentation


def _forward_affine(angle_deg, sy, sx, flip):
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    scale = np.array([[sy, 0.0], [0.0, sx]])
    mirror = np.array([[1.0, 0.0], [0.0, -1.0 if flip else 1.0]])
    return rot @ scale @ mirror


_SUBGRID = np.array([(dy, dx) for dy in (-1 / 3, 0.0, 1 / 3) for dx in (-1 / 3, 0.0, 1 / 3)])


def _transform_annotation(mask, matrix, c_src, c_dst, out_shape):
    pts = np.argwhere(mask > 0).astype(float)
    if len(pts) == 0:
        return np.zeros(out_shape)
    # supersample each positive pixel so the forward map leaves no holes
    dense = (pts[:, None, :] + _SUBGRID[None, :, :]).reshape(-1, 2)
    moved = (dense - c_src) @ matrix.T + c_dst
    return thin_binary(_rasterize(moved, out_shape)).astype(float)


def augment(sample, spec, seed):
    """Expand one sample into len(angles) x (2 if flips) geometric variants."""
    img = sample.image.data[0, 0]
    h, w = img.shape
    variants = [(angle, flipped)
                for angle in spec.rotation_angles
                for flipped in ((False, True) if spec.flips else (False,))]
    out = []
    for j, (angle, flipped) in enumerate(variants):
        rng = np.random.default_rng([seed, j])
        s = float(rng.uniform(spec.scale_range[0], spec.scale_range[1]))
        out_h, out_w = max(int(round(h * s)), 1), max(int(round(w * s)), 1)
        sy, sx = out_h / h, out_w / w

        truth = sample.true_boundary
        pure_flip = (angle % 360 == 0) and out_h == h and out_w == w and sy == 1.0 and sx == 1.0
        if pure_flip:
            new_img = np.flip(img, axis=1).copy() if flipped else img.copy()
            new_maps = [np.flip(m, axis=1).copy() if flipped else m.copy()
                        for m in sample.annotations.maps]
            if truth is not None:
                truth = np.flip(truth, axis=1).copy() if flipped else truth.copy()
        else:
            mat = _forward_affine(angle, sy, sx, flipped)
            c_src = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
            c_dst = np.array([(out_h - 1) / 2.0, (out_w - 1) / 2.0])
            inv = np.linalg.inv(mat)
            offset = c_src - inv @ c_dst
            new_img = affine_transform(img, inv, offset=offset,
                                       output_shape=(out_h, out_w),
                                       order=1, mode="nearest")
            new_maps = [_transform_annotation(m, mat, c_src, c_dst, (out_h, out_w))
                        for m in sample.annotations.maps]
            if truth is not None:
                truth = _transform_annotation(truth, mat, c_src, c_dst, (out_h, out_w))

        if spec.crop is not None:
            ch, cw = spec.crop
            if ch > out_h or cw > out_w:
                raise ContractError(
                    f"crop {spec.crop} exceeds transformed size ({out_h}, {out_w})")
            y0 = int(rng.integers(0, out_h - ch + 1))
            x0 = int(rng.integers(0, out_w - cw + 1))
            new_img = new_img[y0:y0 + ch, x0:x0 + cw].copy()
            new_maps = [m[y0:y0 + ch, x0:x0 + cw].copy() for m in new_maps]
            if truth is not None:
                truth = truth[y0:y0 + ch, x0:x0 + cw].copy()

        out.append(Sample(
            id=f"{sample.id}-a{j:02d}",
            image=Tensor(np.clip(new_img, 0.0, 1.0)[None, None]),
            annotations=AnnotationSet(new_maps),
            true_boundary=truth,
        ))
    return out


# ---------------------------------------------------------------------------
# PGM (P5) raster I/O


def _pgm_tokens(raw, path):
    """Yield (token, offset) triples for the three header ints after the magic."""
    pos = 2  # caller verified the magic
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        tok = raw[start:pos]
        if not tok:
            raise ParseError(f"{path}: truncated header at byte {start}")
        if not tok.isdigit():
            raise ParseError(f"{path}: expected integer at byte {start}, got {tok!r}")
        tokens.append((int(tok), start))
    if pos >= len(raw):
        raise ParseError(f"{path}: missing pixel data at byte {pos}")
    pos += 1  # single whitespace byte separates maxval from pixels
    return tokens, pos


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != b"P5":
        raise ParseError(f"{path}: bad magic at byte 0, expected b'P5'")
    tokens, pos = _pgm_tokens(raw, path)
    (width, _), (height, _), (maxval, off) = tokens
    if width < 1 or height < 1:
        raise ParseError(f"{path}: degenerate dimensions {width}x{height}")
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval} at byte {off}, need 255")
    need = width * height
    have = len(raw) - pos
    if have < need:
        raise ParseError(f"{path}: truncated pixels at byte {pos}: "
                         f"expected {need} bytes, {have} available")
    return np.frombuffer(raw[pos:pos + need], dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, array):
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise ShapeError(f"PGM wants a 2-D array, got shape {arr.shape}")
    data = arr.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_annotation(path):
    arr = read_pgm(path)
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValidationError(
            f"{path}: annotation value {arr[y, x]} at ({y}, {x}) is not in {{0, 255}}")
    return (arr == 255).astype(float)


def write_annotation(path, boundary_map):
    arr = np.asarray(boundary_map, dtype=float)
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValidationError("annotation map must be binary over {0, 1}")
    write_pgm(path, (arr * 255).astype(np.uint8))


def read_image(path):
    return read_pgm(path).astype(float) / 255.0


def write_image(path, gray_map):
    arr = np.clip(np.asarray(gray_map, dtype=float), 0.0, 1.0)
    write_pgm(path, np.round(arr * 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# CRB1 container: magic, u32 ndim, u32 dims, float64 little-endian row-major


def write_crb(path, array):
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(b"CRB1")
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_crb(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != b"CRB1":
        raise ParseError(f"{path}: bad magic at byte 0, expected b'CRB1'")
    if len(raw) < 8:
        raise ParseError(f"{path}: truncated header at byte 4: "
                         f"expected 4 bytes for ndim, {len(raw) - 4} available")
    ndim = struct.unpack("<I", raw[4:8])[0]
    if ndim == 0 or ndim > 8:
        raise ParseError(f"{path}: implausible ndim {ndim} at byte 4")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end:
        raise ParseError(f"{path}: truncated dims at byte 8: "
                         f"expected {4 * ndim} bytes, {len(raw) - 8} available")
    dims = struct.unpack(f"<{ndim}I", raw[8:dims_end])
    need = 8 * int(np.prod(dims))
    have = len(raw) - dims_end
    if have < need:
        raise ParseError(f"{path}: truncated payload at byte {dims_end}: "
                         f"expected {need} bytes, {have} available")
    if have > need:
        raise ParseError(f"{path}: trailing data at byte {dims_end + need}: "
                         f"expected {need} payload bytes, {have} available")
    return np.frombuffer(raw[dims_end:dims_end + need], dtype="<f8").reshape(dims).copy()


def write_raster(tensor, path):
    arr = tensor.data[0, 0] if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=float)
    if path.endswith(".pgm"):
        write_image(path, arr)
    elif path.endswith(".crb"):
        write_crb(path, arr)
    else:
        raise ValidationError(f"unsupported raster extension on '{path}' (want .pgm or .crb)")


def read_raster(path):
    if path.endswith(".pgm"):
        return Tensor(read_image(path))
    if path.endswith(".crb"):
        return Tensor(read_crb(path))
    raise ValidationError(f"unsupported raster extension on '{path}' (want .pgm or .crb)")


# ---------------------------------------------------------------------------
# manifests


def save_manifest(manifest, path):
    with open(path, "w", encoding="ascii") as fh:
        for e in manifest.entries:
            fh.write(f"{e.id}\t{e.image_path}\t{','.join(e.ann_paths)}\t{e.split}\n")


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 tab-separated fields, "
                                 f"got {len(parts)}")
            sid, image_path, ann_field, split = parts
            ann_paths = tuple(p for p in ann_field.split(",") if p)
            resolved_img = os.path.join(base, image_path)
            resolved_anns = tuple(os.path.join(base, p) for p in ann_paths)
            for p in (resolved_img, *resolved_anns):
                if not os.path.exists(p):
                    raise ValidationError(f"{path}:{lineno}: missing file '{p}'")
            entries.append(ManifestEntry(sid, resolved_img, resolved_anns, split))
    return DatasetManifest(entries)


def save_dataset(samples, out_dir, splits=None):
    """Write images, annotations, and a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for s in samples:
        img_name = f"{s.id}.pgm"
        write_image(os.path.join(out_dir, img_name), s.image.data[0, 0])
        ann_names = []
        for j in range(s.annotations.n):
            name = f"{s.id}-ann{j}.pgm"
            write_annotation(os.path.join(out_dir, name), s.annotations.maps[j])
            ann_names.append(name)
        split = splits.get(s.id, "train") if splits else "train"
        entries.append(ManifestEntry(s.id, img_name, tuple(ann_names), split))
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    save_manifest(DatasetManifest(entries), manifest_path)
    return manifest_path


def load_dataset(manifest_path):
    manifest = load_manifest(manifest_path)
    samples = []
    for e in manifest.entries:
        img = read_image(e.image_path)
        maps = [read_annotation(p) for p in e.ann_paths]
        samples.append(Sample(id=e.id, image=Tensor(img[None, None]),
                              annotations=AnnotationSet(maps)))
    return samples
