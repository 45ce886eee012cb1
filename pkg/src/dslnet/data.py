"""Paired SDR/HDR sequence storage, temporal windows, patch sampling and synthetic data.

On-disk layout, one directory per scene::

    <root>/<scene>/sdr/0000.png ...   8-bit gamma/BT.709 frames
    <root>/<scene>/hdr/0000.png ...   16-bit PQ/BT.2020 frames
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import cv2
import numpy as np

from . import color

FRAME_RE = re.compile(r"^(\d{4})\.png$")


class DataError(Exception):
    pass


# -- PNG frames -----------------------------------------------------------------------

def read_png(path: str | Path) -> tuple[np.ndarray, int]:
    """Read an 8/16-bit grayscale or RGB PNG as a (3, H, W) float array in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"cannot read image {path}")
    if img.dtype == np.uint8:
        bits = 8
    elif img.dtype == np.uint16:
        bits = 16
    else:
        raise DataError(f"{path}: unsupported sample type {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    rgb = img[:, :, ::-1].transpose(2, 0, 1)
    return rgb.astype(np.float64) / (2 ** bits - 1), bits


def quantize(frame: np.ndarray, bits: int) -> np.ndarray:
    peak = 2 ** bits - 1
    q = np.rint(np.clip(frame, 0.0, 1.0) * peak)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def write_png(path: str | Path, frame: np.ndarray, bits: int) -> None:
    """Write a (3, H, W) [0, 1] frame as an 8- or 16-bit RGB PNG."""
    if bits not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bits}")
    q = quantize(np.asarray(frame), bits)
    bgr = np.ascontiguousarray(q.transpose(1, 2, 0)[:, :, ::-1])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), bgr):
        raise DataError(f"failed to write {path}")


# -- scenes -------------------------------------------------------------------------------

@dataclass
class SequencePair:
    scene_id: str
    sdr_frames: list[np.ndarray]
    hdr_frames: list[np.ndarray]

    def __post_init__(self):
        if len(self.sdr_frames) != len(self.hdr_frames):
            raise DataError(f"scene {self.scene_id}: {len(self.sdr_frames)} SDR vs {len(self.hdr_frames)} HDR frames")
        shapes = {f.shape for f in self.sdr_frames + self.hdr_frames}
        if len(shapes) > 1:
            raise DataError(f"scene {self.scene_id}: mixed frame extents {sorted(shapes)}")

    @property
    def length(self) -> int:
        return len(self.sdr_frames)

    @property
    def extents(self) -> tuple[int, int]:
        return self.sdr_frames[0].shape[1:]


def _frame_indices(folder: Path) -> dict[int, Path]:
    if not folder.is_dir():
        return {}
    found = {}
    for p in folder.iterdir():
        m = FRAME_RE.match(p.name)
        if m:
            found[int(m.group(1))] = p
    return found


def load_scene(path: str | Path) -> SequencePair:
    path = Path(path)
    sdr, hdr = _frame_indices(path / "sdr"), _frame_indices(path / "hdr")
    if not sdr and not hdr:
        raise DataError(f"scene {path.name}: no frames under {path}/sdr or {path}/hdr")
    for idx in sorted(set(sdr) | set(hdr)):
        if idx not in hdr:
            raise DataError(f"scene {path.name} frame {idx}: missing hdr/{idx:04d}.png")
        if idx not in sdr:
            raise DataError(f"scene {path.name} frame {idx}: missing sdr/{idx:04d}.png")
    order = sorted(sdr)
    sdr_frames, hdr_frames = [], []
    for idx in order:
        s, _ = read_png(sdr[idx])
        h, _ = read_png(hdr[idx])
        if s.shape != h.shape:
            raise DataError(f"scene {path.name} frame {idx}: SDR extents {s.shape[1:]} != HDR {h.shape[1:]}")
        sdr_frames.append(s)
        hdr_frames.append(h)
    return SequencePair(path.name, sdr_frames, hdr_frames)


def scene_dirs(root: str | Path) -> list[Path]:
    """Scene directories under ``root``, or those listed in a manifest file."""
    root = Path(root)
    if root.is_file():
        base = root.parent
        lines = [ln.strip() for ln in root.read_text().splitlines()]
        return [(base / ln) if not Path(ln).is_absolute() else Path(ln) for ln in lines if ln and not ln.startswith("#")]
    if not root.is_dir():
        raise DataError(f"dataset path {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and ((p / "sdr").is_dir() or (p / "hdr").is_dir()))
    if not dirs:
        raise DataError(f"no scene directories found under {root}")
    return dirs


def load_dataset(root: str | Path) -> list[SequencePair]:
    return [load_scene(d) for d in scene_dirs(root)]


def write_manifest(path: str | Path, scenes: Iterable[str | Path]) -> None:
    Path(path).write_text("".join(f"{s}\n" for s in scenes))


# -- windows and patches ---------------------------------------------------------------------

def window_indices(i: int, T: int, length: int) -> list[int]:
    if T < 0:
        raise ValueError(f"T must be >= 0, got {T}")
    if not 0 <= i < length:
        raise IndexError(f"frame index {i} out of range for a {length}-frame sequence")
    return [min(max(j, 0), length - 1) for j in range(i - T, i + T + 1)]


def window(seq: SequencePair, i: int, T: int) -> list[np.ndarray]:
    """SDR frames i-T..i+T, replicating the first/last frame at the sequence ends."""
    return [seq.sdr_frames[j] for j in window_indices(i, T, seq.length)]


@dataclass
class TrainingSample:
    x: list[np.ndarray]
    y: np.ndarray
    crop_origin: tuple[int, int]
    scene_id: str
    center_index: int

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.x, axis=0)


def sample_patches(seq: SequencePair, i: int, T: int, patch: int, rng: np.random.Generator) -> TrainingSample:
    h, w = seq.extents
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than frame {h}x{w}")
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    crop = (slice(None), slice(top, top + patch), slice(left, left + patch))
    xs = [f[crop] for f in window(seq, i, T)]
    return TrainingSample(xs, seq.hdr_frames[i][crop], (top, left), seq.scene_id, i)


def collate(samples: list[TrainingSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.stacked() for s in samples]).astype(np.float32)
    y = np.stack([s.y for s in samples]).astype(np.float32)
    return x, y


# -- synthetic pairs -----------------------------------------------------------------------------

REINHARD_WHITE = 4.0  # in units of the 100 cd/m^2 SDR peak, i.e. 400 cd/m^2 maps to SDR white


def reinhard_tone_curve(linear: np.ndarray) -> np.ndarray:
    """Extended Reinhard per channel: cd/m^2 -> SDR linear cd/m^2, clipping above 400 cd/m^2."""
    x = linear / color.SDR_PEAK
    y = x * (1 + x / REINHARD_WHITE ** 2) / (1 + x)
    return np.clip(y, 0.0, 1.0) * color.SDR_PEAK


def degrade(hdr_encoded: np.ndarray, tone_curve: Callable[[np.ndarray], np.ndarray] = reinhard_tone_curve,
            gamut: bool = True) -> np.ndarray:
    """HDR (PQ, BT.2020) -> SDR (gamma 2.4, BT.709) before quantization.

    linearize -> tone map -> BT.2020 to BT.709 -> gamma encode.
    """
    linear = color.pq_eotf(hdr_encoded)
    mapped = tone_curve(linear)
    if gamut:
        mapped = np.clip(color.bt2020_to_bt709(mapped), 0.0, color.SDR_PEAK)
    return color.sdr_gamma_encode(mapped)


@dataclass
class SceneRecipe:
    base: np.ndarray  # (3,) linear cd/m^2 at the top-left corner
    ramp: np.ndarray  # (3,) linear cd/m^2 added across the frame
    ramp_angle: float
    shapes: list[dict] = field(default_factory=list)
    velocity: tuple[float, float] = (0.0, 0.0)


def _random_recipe(rng: np.random.Generator) -> SceneRecipe:
    shapes = []
    for _ in range(int(rng.integers(2, 4))):
        shapes.append(dict(center=rng.uniform(0.2, 0.8, size=2), radius=rng.uniform(0.12, 0.25),
                           color=rng.uniform(20, 350, size=3), kind="disk"))
    # one small specular highlight that the SDR grade clips
    shapes.append(dict(center=rng.uniform(0.3, 0.7, size=2), radius=rng.uniform(0.05, 0.08),
                       color=np.full(3, rng.uniform(1500, 4000)), kind="highlight"))
    return SceneRecipe(base=rng.uniform(2, 40, size=3), ramp=rng.uniform(10, 150, size=3),
                       ramp_angle=float(rng.uniform(0, 2 * np.pi)), shapes=shapes,
                       velocity=tuple(rng.uniform(-1.5, 1.5, size=2)))


def render_hdr_linear(recipe: SceneRecipe, t: int, h: int, w: int) -> np.ndarray:
    """Linear BT.2020 frame (3, H, W) in cd/m^2 at time step ``t``."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = recipe.velocity[0] * t, recipe.velocity[1] * t
    ca, sa = np.cos(recipe.ramp_angle), np.sin(recipe.ramp_angle)
    u = ((xx - dx) * ca + (yy - dy) * sa) / max(h, w)
    img = recipe.base[:, None, None] + recipe.ramp[:, None, None] * (0.5 + 0.5 * np.sin(np.pi * u))[None]
    scale = max(h, w)
    for s in recipe.shapes:
        cy, cx = s["center"][0] * h + dy, s["center"][1] * w + dx
        r = np.hypot(yy - cy, xx - cx) / (s["radius"] * scale)
        if s["kind"] == "highlight":
            mask = np.exp(-2.0 * r * r)
        else:
            mask = 1.0 / (1.0 + np.exp((r - 1.0) * 8.0))
        img = img * (1 - mask)[None] + s["color"][:, None, None] * mask[None]
    return np.clip(img, 0.0, color.PQ_PEAK)


def make_scene(recipe: SceneRecipe, frames: int, h: int, w: int,
               tone_curve: Callable = reinhard_tone_curve) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Quantized (sdr, hdr) frame lists, values in [0, 1]."""
    sdr, hdr = [], []
    for t in range(frames):
        hdr_q = quantize(color.pq_oetf(render_hdr_linear(recipe, t, h, w)), 16) / 65535.0
        sdr_q = quantize(degrade(hdr_q, tone_curve), 8) / 255.0
        hdr.append(hdr_q)
        sdr.append(sdr_q)
    return sdr, hdr


def make_synthetic(out: str | Path, n_scenes: int, frames: int = 10, extents: tuple[int, int] = (32, 32),
                   seed: int = 0) -> list[Path]:
    """Generate ``n_scenes`` paired scenes on disk and a ``manifest.txt``; returns scene dirs."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w = extents
    dirs = []
    for s in range(n_scenes):
        recipe = _random_recipe(rng)
        sdr, hdr = make_scene(recipe, frames, h, w)
        scene = out / f"scene{s:04d}"
        for t, (sf, hf) in enumerate(zip(sdr, hdr)):
            write_png(scene / "sdr" / f"{t:04d}.png", sf, 8)
            write_png(scene / "hdr" / f"{t:04d}.png", hf, 16)
        dirs.append(scene)
    write_manifest(out / "manifest.txt", [d.name for d in dirs])
    return dirs
