"""Synthetic triplet generation, on-disk triplet datasets, and PPM/PGM io.

A triplet is (frame0, frame_gt, frame1): the middle frame sits at t = 0.5 of
each shape's linear trajectory. Synthetic scenes are a smoothed value-noise
background plus anti-aliased moving rectangles and disks; the motion mask is
the union of every moving shape's support across the three frames, which is a
superset of the pixels whose values differ between frames.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError


@dataclass
class Triplet:
    frame0: np.ndarray            # (3, H, W) float32 in [0, 1]
    frame_gt: np.ndarray
    frame1: np.ndarray
    sample_id: int
    motion_mask: np.ndarray | None = None   # (H, W) bool, synthetic only
    shapes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

_BLUR5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0], dtype=np.float64) / 16.0


def _blur_np(img: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur with edge padding (plain numpy)."""
    out = np.pad(img, ((0, 0), (2, 2), (2, 2)), mode="edge")
    h = img.shape[1]
    out = sum(t * out[:, i:i + h, :] for i, t in enumerate(_BLUR5))
    w = img.shape[2]
    out = sum(t * out[:, :, j:j + w] for j, t in enumerate(_BLUR5))
    return out


def _upsample_np(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Bilinear resize of a (C, h, w) array to (C, oh, ow)."""
    c, h, w = img.shape
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def _coverage(shape: dict, t: float, h: int, w: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one shape at time t."""
    cy = shape["center"][0] + t * shape["velocity"][0]
    cx = shape["center"][1] + t * shape["velocity"][1]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if shape["kind"] == "disk":
        dist = np.hypot(yy - cy, xx - cx)
        cov = np.clip(shape["radius"] + 0.5 - dist, 0.0, 1.0)
    else:
        covy = np.clip(shape["radius"] + 0.5 - np.abs(yy - cy), 0.0, 1.0)
        covx = np.clip(shape["rx"] + 0.5 - np.abs(xx - cx), 0.0, 1.0)
        cov = covy * covx
    return cov


def synth_triplet(seed: int, h: int = 64, w: int = 64, n_shapes: int = 3,
                  max_disp: float | None = None,
                  sample_id: int | None = None) -> Triplet:
    """Deterministic textured scene with n_shapes moving primitives.

    max_disp bounds the displacement magnitude between frame0 and frame1
    (default H/10); the middle frame is rendered at t = 0.5 of each linear
    trajectory.
    """
    if max_disp is None:
        max_disp = h / 10.0
    if not (1 <= n_shapes <= 8):
        raise ContractError(f"n_shapes must be in [1, 8], got {n_shapes}")
    if not (0 <= max_disp <= h / 8 + 1e-9):
        raise ContractError(f"max_disp must be in [0, H/8], got {max_disp}")
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.25, 0.75, size=(3, max(2, h // 16), max(2, w // 16)))
    background = _blur_np(_blur_np(_upsample_np(coarse, h, w)))

    shapes = []
    for _ in range(n_shapes):
        kind = "disk" if rng.random() < 0.5 else "rect"
        radius = rng.uniform(h / 16, h / 9)
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.3, 1.0) * max_disp
        grad_angle = rng.uniform(0, 2 * np.pi)
        shapes.append({
            "kind": kind,
            "center": (rng.uniform(radius, h - radius), rng.uniform(radius, w - radius)),
            "velocity": (speed * np.sin(angle), speed * np.cos(angle)),
            "radius": radius,
            "rx": rng.uniform(h / 16, h / 9),
            "color": rng.uniform(0.0, 1.0, size=3),
            "color2": rng.uniform(0.0, 1.0, size=3),
            # gradient-filled shapes make motion hard across the whole
            # support, not only at silhouette edges
            "grad_dir": (np.sin(grad_angle), np.cos(grad_angle)),
        })

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    def render(t: float) -> np.ndarray:
        img = background.copy()
        for s in shapes:
            cov = _coverage(s, t, h, w)[None]
            cy = s["center"][0] + t * s["velocity"][0]
            cx = s["center"][1] + t * s["velocity"][1]
            span = max(s["radius"], s["rx"])
            ramp = np.clip(((yy - cy) * s["grad_dir"][0]
                            + (xx - cx) * s["grad_dir"][1]) / (2 * span) + 0.5,
                           0.0, 1.0)[None]
            fill = (s["color"][:, None, None] * (1 - ramp)
                    + s["color2"][:, None, None] * ramp)
            img = img * (1 - cov) + fill * cov
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    motion = np.zeros((h, w), dtype=bool)
    for s in shapes:
        if s["velocity"][0] == 0 and s["velocity"][1] == 0:
            continue
        for t in (0.0, 0.5, 1.0):
            motion |= _coverage(s, t, h, w) > 0

    return Triplet(frame0=render(0.0), frame_gt=render(0.5), frame1=render(1.0),
                   sample_id=seed if sample_id is None else sample_id,
                   motion_mask=motion, shapes=shapes)


class SyntheticTripletSet:
    """Lazy, purely functional dataset: sample i is a function of (seed, i)."""

    def __init__(self, seed: int, count: int, h: int = 64, w: int = 64,
                 n_shapes: int = 3, max_disp: float | None = None,
                 static_fraction: float = 0.1):
        self.seed, self.count = seed, count
        self.h, self.w = h, w
        self.n_shapes = n_shapes
        self.max_disp = h / 10.0 if max_disp is None else max_disp
        self.static_fraction = static_fraction

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Triplet:
        if not (0 <= i < self.count):
            raise IndexError(i)
        child = np.random.SeedSequence(entropy=self.seed, spawn_key=(i,))
        sub_seed = int(child.generate_state(1)[0])
        disp = self.max_disp
        if self.static_fraction > 0:
            gate = np.random.default_rng(sub_seed ^ 0x5eed).random()
            if gate < self.static_fraction:
                disp = 0.0
        return synth_triplet(sub_seed, self.h, self.w, self.n_shapes, disp,
                             sample_id=i)


# ---------------------------------------------------------------------------
# PPM / PGM io
# ---------------------------------------------------------------------------

def _read_header_tokens(blob: bytes, count: int):
    """Read `count` whitespace-separated tokens, honoring '#' comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        if pos >= len(blob):
            raise FormatError("image header ended prematurely")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            nl = blob.find(b"\n", pos)
            if nl < 0:
                raise FormatError("unterminated comment in image header")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    return tokens, pos + 1  # consume the single whitespace after maxval


def read_ppm(path) -> np.ndarray:
    """Read binary P6 (returns (3, H, W)) or P5 (returns (H, W)), floats in [0,1]."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:2] not in (b"P6", b"P5"):
        raise FormatError(f"{path}: not a binary PPM/PGM (magic {blob[:2]!r})")
    color = blob[:2] == b"P6"
    tokens, payload_off = _read_header_tokens(blob, 4)
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (expected 255)")
    channels = 3 if color else 1
    need = w * h * channels
    payload = blob[payload_off:payload_off + need]
    if len(payload) != need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    if color:
        return arr.reshape(h, w, 3).transpose(2, 0, 1)
    return arr.reshape(h, w)


def write_ppm(path, img: np.ndarray) -> None:
    """Write (3, H, W) as binary P6 or (H, W) / (1, H, W) as P5 (maxval 255)."""
    path = Path(path)
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[0] == 3:
        h, w = img.shape[1], img.shape[2]
        header = f"P6\n{w} {h}\n255\n".encode()
        payload = data.transpose(1, 2, 0).tobytes()
    elif img.ndim == 2:
        h, w = img.shape
        header = f"P5\n{w} {h}\n255\n".encode()
        payload = data.tobytes()
    else:
        raise ContractError(f"write_ppm expects (3,H,W) or (H,W), got {img.shape}")
    path.write_bytes(header + payload)


# ---------------------------------------------------------------------------
# directory datasets
# ---------------------------------------------------------------------------

_FRAME_NAMES = ("frame0", "frame1", "frame2")
_EXTENSIONS = (".ppm", ".pgm")


def _find_frame(folder: Path, stem: str) -> Path:
    for ext in _EXTENSIONS:
        p = folder / (stem + ext)
        if p.exists():
            return p
    raise FormatError(f"missing frame file {folder / stem}[.ppm|.pgm]")


def _center_crop_16(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2], img.shape[-1]
    ch, cw = (h // 16) * 16, (w // 16) * 16
    if ch == 0 or cw == 0:
        raise FormatError(f"image {h}x{w} smaller than 16x16")
    top, left = (h - ch) // 2, (w - cw) // 2
    return img[..., top:top + ch, left:left + cw]


class DirectoryTripletSet:
    """Folders of frame0/frame1/frame2 images; frame1 is the middle frame.

    Images load lazily, normalize to [0, 1], and center-crop to the largest
    16-divisible extent. Iteration order is the sorted folder name order.
    """

    def __init__(self, root, lenient: bool = False):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FormatError(f"{self.root} is not a directory")
        self.folders = sorted(p for p in self.root.iterdir() if p.is_dir())
        if lenient:
            kept = []
            for f in self.folders:
                try:
                    self._load_folder(f, probe=True)
                    kept.append(f)
                except FormatError as err:
                    warnings.warn(f"skipping {f.name}: {err}")
            self.folders = kept
        if not self.folders:
            raise FormatError(f"{self.root} contains no triplet folders")

    def _load_folder(self, folder: Path, probe: bool = False):
        paths = [_find_frame(folder, n) for n in _FRAME_NAMES]
        if probe:
            for p in paths:
                read_ppm(p)
            return None
        frames = []
        for p in paths:
            img = read_ppm(p)
            if img.ndim == 2:
                img = np.repeat(img[None], 3, axis=0)
            frames.append(_center_crop_16(img.astype(np.float32)))
        if not (frames[0].shape == frames[1].shape == frames[2].shape):
            raise FormatError(f"{folder}: frames disagree in size after cropping")
        return frames

    def __len__(self) -> int:
        return len(self.folders)

    def __getitem__(self, i: int) -> Triplet:
        frames = self._load_folder(self.folders[i])
        return Triplet(frame0=frames[0], frame_gt=frames[1], frame1=frames[2],
                       sample_id=i)


def load_triplet_dir(path, lenient: bool = False) -> DirectoryTripletSet:
    return DirectoryTripletSet(path, lenient=lenient)
