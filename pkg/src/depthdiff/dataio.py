"""Dataset containers, file formats, and a synthetic RGB-D scene generator.

On disk a dataset lives under one root directory:

    <root>/manifest.tsv         sample registry (id, subject, split) plus
                                ``# key value`` header comments recording the
                                global near/far depth planes and the render
                                resolution
    <root>/<split>/<id>.png     8-bit RGB
    <root>/<split>/<id>.pfm     32-bit float depth raster

Depth is stored as a grayscale portable-float-map so the round trip is
bit-exact.  The layout is three newline-terminated header lines -- the magic
``Pf``, the dimensions ``<width> <height>``, and a scale whose sign encodes
endianness (we write ``-1.0``, little endian) -- followed by ``H * W`` raw
32-bit floats, row-major with the *bottom* row first.

Rasters use the training-side value conventions throughout: RGB channels in
[-1, 1] normalized from 8 bits (so a zeroed background byte maps to exactly
-1), and depth in [-1, 1] with background exactly -1 and *larger* values
nearer to the camera.

The synthetic generator replaces a scanned-human corpus with parametric
subjects (an ellipsoid torso and head, capsule limbs) rendered by an analytic
raycaster under a perspective camera whose viewpoint, field of view, and
distance vary per sample.  The camera distance is solved so the subject spans
roughly 80% of the image height.  Subjects -- not samples -- are the unit of
the train/test split, and all draws come from one seeded generator, so a
(count, resolution, seed) triple always reproduces the same files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .metrics import BACKGROUND_THRESHOLD

DEPTH_BACKGROUND = -1.0
# RGB pixels at or below this (all channels) count as background when judging
# cross-modality agreement; -1 is the mapped zero byte, and generated part
# colors are kept well above it.
RGB_BACKGROUND_THRESHOLD = -0.98

MANIFEST_NAME = "manifest.tsv"
SPLITS = ("train", "test")


# ------------------------------------------------------------ domain types


def _check_raster(values: np.ndarray, channels: int, what: str) -> None:
    if not isinstance(values, np.ndarray) or values.dtype != np.float32:
        raise ValueError(f"{what} must be a float32 array")
    if values.ndim != 3 or values.shape[2] != channels:
        raise ValueError(f"{what} must be [H, W, {channels}], got {values.shape}")
    if not np.isfinite(values).all():
        raise ValueError(f"{what} contains non-finite values")
    if values.min() < -1.0 or values.max() > 1.0:
        raise ValueError(f"{what} values outside [-1, 1]")


@dataclass(frozen=True)
class DepthMap:
    """A [H, W, 1] float32 raster in [-1, 1]; background encoded as -1."""

    values: np.ndarray

    def __post_init__(self) -> None:
        _check_raster(self.values, 1, "depth")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]


@dataclass(frozen=True)
class RgbImage:
    """A [H, W, 3] float32 raster in [-1, 1], normalized from 8-bit."""

    values: np.ndarray

    def __post_init__(self) -> None:
        _check_raster(self.values, 3, "rgb")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]


@dataclass(frozen=True)
class RgbdImage:
    """Spatially aligned RGB and depth rasters of one sample."""

    rgb: RgbImage
    depth: DepthMap

    def __post_init__(self) -> None:
        if self.rgb.resolution != self.depth.resolution:
            raise ValueError(
                f"rgb {self.rgb.resolution} and depth {self.depth.resolution} "
                "resolutions differ"
            )

    @property
    def resolution(self) -> tuple[int, int]:
        return self.rgb.resolution

    def to_array(self) -> np.ndarray:
        """The [H, W, 4] RGB-D raster used as a conditioning input."""
        return np.concatenate([self.rgb.values, self.depth.values], axis=2)


def background_mismatch(image: RgbdImage) -> float:
    """Fraction of pixels where the RGB and depth background masks disagree."""
    depth_fg = image.depth.values[:, :, 0] > BACKGROUND_THRESHOLD
    rgb_fg = image.rgb.values.max(axis=2) > RGB_BACKGROUND_THRESHOLD
    return float(np.mean(depth_fg != rgb_fg))


def validate_background_agreement(image: RgbdImage, tol: float = 0.01) -> None:
    """Enforce the dataset invariant that both modalities agree on what is
    background for all but ``tol`` of the pixels.

    This is checked on dataset samples (where it is a constructive guarantee
    of the generator) rather than in the ``RgbdImage`` constructor: the same
    container also carries model outputs, whose silhouettes may legitimately
    disagree with the conditioning image by more than this while still being
    acceptable samples.
    """
    mismatch = background_mismatch(image)
    if mismatch > tol:
        raise ValueError(
            f"modality background masks disagree on {mismatch:.4f} of pixels "
            f"(tolerance {tol})"
        )


@dataclass(frozen=True)
class DatasetManifest:
    """One split's view of a dataset: parallel sample-id / subject-id lists
    plus the global depth-normalization planes recorded at generation time."""

    root: Path
    split: str
    sample_ids: tuple[str, ...]
    subjects: tuple[str, ...]
    near: float
    far: float
    resolution: int

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if len(self.sample_ids) != len(self.subjects):
            raise ValueError("sample_ids and subjects must be parallel lists")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample ids")
        if not 0.0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.resolution < 1:
            raise ValueError("resolution must be positive")

    def __len__(self) -> int:
        return len(self.sample_ids)


# ------------------------------------------------------- portable float map


def write_pfm(path: Path | str, values: np.ndarray) -> None:
    """Write a [H, W] float32 array as a little-endian grayscale PFM."""
    if values.ndim != 2:
        raise ValueError(f"expected a [H, W] array, got shape {values.shape}")
    height, width = values.shape
    header = f"Pf\n{width} {height}\n-1.0\n".encode("ascii")
    body = np.flipud(values).astype("<f4", copy=False).tobytes()
    Path(path).write_bytes(header + body)


def _take_line(data: bytes, offset: int, path: Path | str) -> tuple[bytes, int]:
    end = data.find(b"\n", offset)
    if end < 0:
        raise ValueError(f"{path}: truncated header at byte {offset}")
    return data[offset:end], end + 1


def read_pfm(path: Path | str) -> np.ndarray:
    """Read a grayscale PFM back into a [H, W] float32 array.

    Both endiannesses are accepted on read (positive scale means big endian);
    malformed headers raise with the byte offset of the offending field.
    """
    data = Path(path).read_bytes()
    magic, dims_offset = _take_line(data, 0, path)
    if magic != b"Pf":
        raise ValueError(f"{path}: bad magic {magic!r} at byte 0")
    dims, scale_offset = _take_line(data, dims_offset, path)
    try:
        width, height = (int(tok) for tok in dims.split())
        if width < 1 or height < 1:
            raise ValueError
    except ValueError:
        raise ValueError(
            f"{path}: bad dimensions line {dims!r} at byte {dims_offset}"
        ) from None
    scale_line, body_offset = _take_line(data, scale_offset, path)
    try:
        scale = float(scale_line)
        if scale == 0.0:
            raise ValueError
    except ValueError:
        raise ValueError(
            f"{path}: bad scale line {scale_line!r} at byte {scale_offset}"
        ) from None
    expected = width * height * 4
    if len(data) - body_offset != expected:
        raise ValueError(
            f"{path}: expected {expected} payload bytes at byte {body_offset}, "
            f"found {len(data) - body_offset}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    flat = np.frombuffer(data, dtype=dtype, count=width * height, offset=body_offset)
    return np.flipud(flat.reshape(height, width)).astype(np.float32)


# ----------------------------------------------------------- sample files


def sample_paths(root: Path | str, split: str, sample_id: str) -> tuple[Path, Path]:
    base = Path(root) / split / sample_id
    return base.with_suffix(".png"), base.with_suffix(".pfm")


def write_rgb_png(path: Path | str, rgb: RgbImage) -> None:
    rgb8 = np.clip(np.round((rgb.values + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(Path(path))


def read_rgb_png(path: Path | str) -> RgbImage:
    with Image.open(path) as img:
        rgb8 = np.asarray(img.convert("RGB"), dtype=np.float32)
    return RgbImage(rgb8 / 127.5 - 1.0)


def write_rgbd_files(png_path: Path | str, pfm_path: Path | str, image: RgbdImage) -> None:
    write_rgb_png(png_path, image.rgb)
    write_pfm(pfm_path, image.depth.values[:, :, 0])


def read_rgbd_files(png_path: Path | str, pfm_path: Path | str) -> RgbdImage:
    depth = read_pfm(pfm_path)
    return RgbdImage(read_rgb_png(png_path), DepthMap(depth[:, :, None]))


def write_sample(root: Path | str, split: str, sample_id: str, image: RgbdImage) -> None:
    png_path, pfm_path = sample_paths(root, split, sample_id)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    write_rgbd_files(png_path, pfm_path, image)


def read_sample(
    root: Path | str,
    split: str,
    sample_id: str,
    expected_resolution: int | None = None,
) -> RgbdImage:
    image = read_rgbd_files(*sample_paths(root, split, sample_id))
    if expected_resolution is not None and image.resolution != (
        expected_resolution,
        expected_resolution,
    ):
        raise ValueError(
            f"{sample_id}: stored resolution {image.resolution} does not match "
            f"the manifest resolution {expected_resolution}"
        )
    return image


# --------------------------------------------------------------- manifest


def _write_manifest(
    root: Path,
    rows: list[tuple[str, str, str]],
    near: float,
    far: float,
    resolution: int,
) -> None:
    lines = [
        f"# near {near!r}",
        f"# far {far!r}",
        f"# resolution {resolution}",
        "id\tsubject\tsplit",
    ]
    lines += [f"{sid}\t{subject}\t{split}" for sid, subject, split in rows]
    (root / MANIFEST_NAME).write_text("\n".join(lines) + "\n")


def read_manifest(root: Path | str, split: str) -> DatasetManifest:
    """Load one split's manifest, validating the subject-level split hygiene
    of the whole file (no subject may appear in both train and test)."""
    root = Path(root)
    meta: dict[str, str] = {}
    rows: list[tuple[str, str, str]] = []
    for line in (root / MANIFEST_NAME).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(" ")
            meta[key] = value
        elif line and line != "id\tsubject\tsplit":
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(f"malformed manifest row: {line!r}")
            rows.append((fields[0], fields[1], fields[2]))
    subjects_of = {s: {r[1] for r in rows if r[2] == s} for s in SPLITS}
    overlap = subjects_of["train"] & subjects_of["test"]
    if overlap:
        raise ValueError(f"subjects in both train and test: {sorted(overlap)}")
    picked = [r for r in rows if r[2] == split]
    return DatasetManifest(
        root=root,
        split=split,
        sample_ids=tuple(r[0] for r in picked),
        subjects=tuple(r[1] for r in picked),
        near=float(meta["near"]),
        far=float(meta["far"]),
        resolution=int(meta["resolution"]),
    )


def read_split(root: Path | str, split: str) -> tuple[DatasetManifest, list[RgbdImage]]:
    manifest = read_manifest(root, split)
    images = [
        read_sample(root, split, sid, manifest.resolution)
        for sid in manifest.sample_ids
    ]
    return manifest, images


# ------------------------------------------------------ synthetic subjects

# Global depth-normalization planes.  Camera distances below stay inside
# (see the framing math in _viewpoint) so every subject pixel maps to a
# normalized depth comfortably above the -0.95 background threshold.
NEAR_PLANE = 1.0
FAR_PLANE = 4.5

_SAMPLES_PER_SUBJECT = 4


@dataclass(frozen=True)
class _Part:
    """One body primitive: an ellipsoid, or a capsule when ``p1`` is set."""

    center: np.ndarray  # ellipsoid center, or capsule endpoint p0
    semi_axes: np.ndarray  # ellipsoid semi-axes, or (r, r, r) for a capsule
    color: np.ndarray  # [-1, 1] RGB
    p1: np.ndarray | None = None


def _draw_color(rng: np.random.Generator) -> np.ndarray:
    # keep part colors far from the zeroed background byte
    return (rng.uniform(0.15, 0.95, size=3) * 2.0 - 1.0).astype(np.float64)


def _subject_parts(rng: np.random.Generator) -> tuple[list[_Part], float]:
    """Draw one subject's primitives in body coordinates: y up, feet soles
    at y=0, top of head at y=height."""
    height = rng.uniform(1.5, 1.9)
    sx = height * rng.uniform(0.11, 0.15)
    sy = height * rng.uniform(0.17, 0.21)
    sz = height * rng.uniform(0.06, 0.09)
    torso_y = 0.62 * height
    parts = [
        _Part(
            center=np.array([0.0, torso_y, 0.0]),
            semi_axes=np.array([sx, sy, sz]),
            color=_draw_color(rng),
        )
    ]
    head_r = height * rng.uniform(0.07, 0.09)
    head_sy = head_r * rng.uniform(1.0, 1.25)
    parts.append(
        _Part(
            center=np.array([0.0, height - head_sy, 0.0]),
            semi_axes=np.array([head_r, head_sy, head_r]),
            color=_draw_color(rng),
        )
    )
    leg_r = height * rng.uniform(0.030, 0.042)
    hip_y = torso_y - 0.8 * sy
    leg_color = _draw_color(rng)
    for side in (-1.0, 1.0):
        foot_x = side * sx * rng.uniform(0.4, 0.7)
        parts.append(
            _Part(
                center=np.array([side * sx * 0.45, hip_y, 0.0]),
                semi_axes=np.full(3, leg_r),
                color=leg_color,
                p1=np.array([foot_x, leg_r, 0.0]),  # bottom cap touches y=0
            )
        )
    arm_r = height * rng.uniform(0.022, 0.032)
    arm_color = _draw_color(rng)
    for side in (-1.0, 1.0):
        shoulder = np.array([side * sx * 0.85, torso_y + 0.6 * sy, 0.0])
        hand = np.array(
            [
                side * (sx + height * rng.uniform(0.06, 0.12)),
                torso_y - sy * rng.uniform(0.6, 1.0),
                height * rng.uniform(-0.04, 0.04),
            ]
        )
        parts.append(
            _Part(
                center=shoulder,
                semi_axes=np.full(3, arm_r),
                color=arm_color,
                p1=hand,
            )
        )
    return parts, height


def _viewpoint(rng: np.random.Generator, height: float) -> tuple[np.ndarray, float, float]:
    """Draw one camera pose: a rotation (yaw then a small pitch), the field
    of view, and the distance that makes the subject span the target fraction
    of the image height under the pinhole model."""
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    pitch = rng.uniform(-0.06, 0.06)
    fov = np.deg2rad(rng.uniform(40.0, 55.0))
    # extremities on the near side project slightly larger than the pinhole
    # mid-plane estimate, so aim a little under the ~0.8 height-coverage
    # target; rendered spans land in [0.77, 0.84]
    coverage = rng.uniform(0.765, 0.795)
    cy, sy_ = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    rot_yaw = np.array([[cy, 0.0, sy_], [0.0, 1.0, 0.0], [-sy_, 0.0, cy]])
    rot_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    distance = height / (2.0 * coverage * np.tan(fov / 2.0))
    return rot_pitch @ rot_yaw, fov, distance


def _ray_ellipsoid(origin, dirs, center, semi):
    oc = (origin - center) / semi
    d = dirs / semi
    a = np.sum(d * d, axis=1)
    b = 2.0 * np.sum(oc * d, axis=1)
    c = float(np.sum(oc * oc)) - 1.0
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    t = np.full(len(dirs), np.inf)
    root = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
    t[hit] = np.where(root > 0.0, root, np.inf)
    return t


def _ray_sphere(origin, dirs, center, radius):
    oc = origin - center
    b = dirs @ oc
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    t = np.full(len(dirs), np.inf)
    root = -b[hit] - np.sqrt(disc[hit])
    t[hit] = np.where(root > 0.0, root, np.inf)
    return t


def _ray_capsule(origin, dirs, p0, p1, radius):
    """First positive hit with a capsule, for unit direction vectors: the
    cylindrical body test plus both cap spheres, combined by taking the
    earliest valid candidate (robust when rays run parallel to the axis)."""
    ba = p1 - p0
    oa = origin - p0
    baba = float(ba @ ba)
    bard = dirs @ ba
    baoa = float(oa @ ba)
    rdoa = dirs @ oa
    oaoa = float(oa @ oa)
    a = baba - bard * bard
    b = baba * rdoa - baoa * bard
    c = baba * oaoa - baoa * baoa - radius * radius * baba
    t_body = np.full(len(dirs), np.inf)
    solvable = a > 1e-12
    disc = b * b - a * c
    ok = solvable & (disc >= 0.0)
    root = (-b[ok] - np.sqrt(disc[ok])) / a[ok]
    along = baoa + root * bard[ok]  # axial position of the hit, in [0, baba]
    t_body[ok] = np.where((root > 0.0) & (along > 0.0) & (along < baba), root, np.inf)
    return np.minimum(
        t_body,
        np.minimum(
            _ray_sphere(origin, dirs, p0, radius),
            _ray_sphere(origin, dirs, p1, radius),
        ),
    )


def _render(parts, height, rotation, fov, distance, resolution) -> RgbdImage:
    res = resolution
    focal = (res / 2.0) / np.tan(fov / 2.0)
    cols, rows = np.meshgrid(np.arange(res), np.arange(res))
    dirs = np.stack(
        [
            (cols.ravel() + 0.5 - res / 2.0) / focal,
            -(rows.ravel() + 0.5 - res / 2.0) / focal,  # image rows grow downward
            np.ones(res * res),
        ],
        axis=1,
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # work in body coordinates: rotate rays and the camera origin instead of
    # every primitive (the camera sits at (0,0,-distance) from the subject's
    # mid-height point)
    dirs_body = dirs @ rotation
    origin_body = rotation.T @ np.array([0.0, 0.0, -distance])
    origin_body[1] += height / 2.0  # camera aims at mid-height, not the feet

    best_t = np.full(res * res, np.inf)
    best_part = np.full(res * res, -1)
    for index, part in enumerate(parts):
        if part.p1 is None:
            t = _ray_ellipsoid(origin_body, dirs_body, part.center, part.semi_axes)
        else:
            t = _ray_capsule(
                origin_body, dirs_body, part.center, part.p1, float(part.semi_axes[0])
            )
        closer = t < best_t
        best_t[closer] = t[closer]
        best_part[closer] = index

    hit = np.isfinite(best_t)
    z = best_t * dirs[:, 2]  # planar depth along the camera axis
    depth = np.full(res * res, DEPTH_BACKGROUND)
    span = FAR_PLANE - NEAR_PLANE
    depth[hit] = 1.0 - 2.0 * (z[hit] - NEAR_PLANE) / span
    rgb = np.full((res * res, 3), -1.0)
    colors = np.stack([p.color for p in parts])
    rgb[hit] = colors[best_part[hit]]
    return RgbdImage(
        RgbImage(rgb.reshape(res, res, 3).astype(np.float32)),
        DepthMap(depth.reshape(res, res, 1).astype(np.float32)),
    )


def generate_synthetic(
    root: Path | str, count: int, resolution: int, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Render ``count`` samples into ``root`` and return the (train, test)
    manifests.

    Samples come in groups of four views of one subject; every fourth subject
    goes to the test split, so the subject-level split is disjoint by
    construction.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows: list[tuple[str, str, str]] = []
    produced = 0
    subject_index = 0
    while produced < count:
        parts, height = _subject_parts(rng)
        subject = f"subj{subject_index:04d}"
        split = "test" if subject_index % 4 == 3 else "train"
        for view in range(_SAMPLES_PER_SUBJECT):
            rotation, fov, distance = _viewpoint(rng, height)
            if produced >= count:
                continue  # keep consuming draws so the stream layout is fixed
            image = _render(parts, height, rotation, fov, distance, resolution)
            validate_background_agreement(image)
            sample_id = f"{subject}_v{view:02d}"
            write_sample(root, split, sample_id, image)
            rows.append((sample_id, subject, split))
            produced += 1
        subject_index += 1
    _write_manifest(root, rows, NEAR_PLANE, FAR_PLANE, resolution)
    return read_manifest(root, "train"), read_manifest(root, "test")


# ------------------------------------------------------------ point clouds


def to_point_cloud(
    x: DepthMap | RgbdImage, drop_background: bool = True
) -> np.ndarray:
    """Rows of (u, v, depth) or (u, v, depth, r, g, b), u being the column.

    With ``drop_background`` only pixels strictly above the -0.95 threshold
    survive, matching the foreground mask the IoU metric binarizes with.
    """
    depth = x.values if isinstance(x, DepthMap) else x.depth.values
    height, width = depth.shape[:2]
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    columns = [cols.ravel(), rows.ravel(), depth[:, :, 0].ravel()]
    if isinstance(x, RgbdImage):
        columns += [x.rgb.values[:, :, c].ravel() for c in range(3)]
    cloud = np.stack(columns, axis=1).astype(np.float32)
    if drop_background:
        cloud = cloud[cloud[:, 2] > BACKGROUND_THRESHOLD]
    return cloud


# -------------------------------------------------------------- resampling


def resample(x: RgbImage | DepthMap, target: tuple[int, int]):
    """Resize to (height, width): RGB bilinearly, depth nearest-neighbor."""
    height, width = target
    if height < 1 or width < 1:
        raise ValueError(f"target dims must be positive, got {target}")
    if (height, width) == x.resolution:
        return type(x)(x.values.copy())
    if isinstance(x, RgbImage):
        resized = cv2.resize(x.values, (width, height), interpolation=cv2.INTER_LINEAR)
        return RgbImage(np.clip(resized, -1.0, 1.0))
    resized = cv2.resize(
        x.values[:, :, 0], (width, height), interpolation=cv2.INTER_NEAREST
    )
    return DepthMap(resized[:, :, None])


def resample_rgbd(image: RgbdImage, target: tuple[int, int]) -> RgbdImage:
    return RgbdImage(resample(image.rgb, target), resample(image.depth, target))
