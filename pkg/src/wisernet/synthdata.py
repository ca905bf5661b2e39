"""Seeded fundus-like images with concentric disc/cup anatomy and style domains.

Anatomy (disc and cup geometry, vessels, background texture) and style
(tint, contrast, brightness, gamma, vignette, blur, noise) are drawn from
separate random streams of the sample seed, so two domains rendered from
the same seed list have identical masks and differ only in appearance.

On disk a domain is a directory::

    <domain>/images/<id>.png    8-bit RGB
    <domain>/masks/<id>.png     8-bit gray: 0 background, 128 disc only, 255 cup
    <domain>/manifest.txt       header comments + one tab-separated record per sample
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial.distance import cdist

from wisernet.exceptions import LoadError, UsageError

Range = Tuple[float, float]

MANIFEST_NAME = "manifest.txt"
MANIFEST_TAG = "# wisernet-manifest v1"
MASK_OD, MASK_OC = 128, 255


def _check_range(name: str, rng: Range, positive: bool = False) -> None:
    lo, hi = rng
    if lo > hi:
        raise UsageError(f"{name}: range ({lo}, {hi}) is not ordered")
    if positive and lo <= 0:
        raise UsageError(f"{name}: values must be positive, got lower bound {lo}")


@dataclass(frozen=True)
class StyleSpec:
    name: str = "identity"
    brightness_shift: Range = (0.0, 0.0)
    contrast_gain: Range = (1.0, 1.0)
    color_tint: Tuple[Range, Range, Range] = ((1.0, 1.0), (1.0, 1.0), (1.0, 1.0))
    gamma: Range = (1.0, 1.0)
    vignette_strength: Range = (0.0, 0.0)
    noise_sigma: Range = (0.0, 0.0)
    blur_sigma: Range = (0.0, 0.0)

    def __post_init__(self):
        _check_range("brightness_shift", self.brightness_shift)
        _check_range("contrast_gain", self.contrast_gain, positive=True)
        for c, r in enumerate(self.color_tint):
            _check_range(f"color_tint[{c}]", r, positive=True)
        _check_range("gamma", self.gamma, positive=True)
        for name in ("vignette_strength", "noise_sigma", "blur_sigma"):
            r = getattr(self, name)
            _check_range(name, r)
            if r[0] < 0:
                raise UsageError(f"{name}: values must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StyleSpec":
        raw = json.loads(text)
        raw["color_tint"] = tuple(tuple(r) for r in raw["color_tint"])
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


@dataclass(frozen=True)
class AnatomySpec:
    """Geometry ranges, as fractions of the image side unless noted."""

    disc_radius: Range = (0.11, 0.16)
    cup_to_disc_ratio: Range = (0.35, 0.7)
    center_jitter: Range = (-0.12, 0.12)
    eccentricity: Range = (0.0, 0.3)
    vessel_count: Tuple[int, int] = (4, 7)
    vessel_width: Range = (0.008, 0.018)
    texture_scale: float = 0.12
    fov_radius: float = 0.47

    def __post_init__(self):
        for name in ("disc_radius", "cup_to_disc_ratio", "center_jitter", "eccentricity", "vessel_width"):
            _check_range(name, getattr(self, name))
        lo, hi = self.cup_to_disc_ratio
        if not (0.0 < lo and hi < 1.0):
            raise UsageError("cup_to_disc_ratio must lie strictly inside (0, 1)")
        if not (0.0 <= self.eccentricity[0] and self.eccentricity[1] < 1.0):
            raise UsageError("eccentricity must lie in [0, 1)")
        reach = self.disc_radius[1] + max(abs(v) for v in self.center_jitter)
        if reach * np.sqrt(2.0) >= self.fov_radius:
            raise UsageError("disc radius plus jitter may leave the field of view")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AnatomySpec":
        raw = json.loads(text)
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


# Frozen presets. ``source`` is the training appearance; the others are
# acquisition shifts: a mild over-exposed, softer camera; a strong colour
# cast; and a dark, low-contrast, noisy handheld capture.
PRESETS: Dict[str, StyleSpec] = {
    "source": StyleSpec(
        name="source",
        brightness_shift=(-0.04, 0.04),
        contrast_gain=(0.9, 1.1),
        color_tint=((0.95, 1.05), (0.95, 1.05), (0.95, 1.05)),
        gamma=(0.9, 1.1),
        vignette_strength=(0.0, 0.1),
        noise_sigma=(0.0, 0.01),
        blur_sigma=(0.0, 0.3),
    ),
    "shift_mild": StyleSpec(
        name="shift_mild",
        brightness_shift=(0.06, 0.14),
        contrast_gain=(0.7, 0.85),
        color_tint=((0.9, 1.0), (1.0, 1.1), (1.0, 1.15)),
        gamma=(0.75, 0.9),
        vignette_strength=(0.1, 0.25),
        noise_sigma=(0.02, 0.04),
        blur_sigma=(0.4, 0.8),
    ),
    "shift_color": StyleSpec(
        name="shift_color",
        brightness_shift=(-0.04, 0.04),
        contrast_gain=(0.9, 1.2),
        color_tint=((0.6, 0.75), (1.1, 1.3), (1.2, 1.5)),
        gamma=(0.9, 1.1),
        vignette_strength=(0.0, 0.15),
        noise_sigma=(0.0, 0.02),
        blur_sigma=(0.0, 0.5),
    ),
    "shift_lowlight": StyleSpec(
        name="shift_lowlight",
        brightness_shift=(-0.22, -0.12),
        contrast_gain=(0.5, 0.7),
        color_tint=((0.9, 1.05), (0.9, 1.05), (0.9, 1.1)),
        gamma=(1.3, 1.7),
        vignette_strength=(0.3, 0.5),
        noise_sigma=(0.03, 0.06),
        blur_sigma=(0.5, 1.0),
    ),
}


def style_presets(name: str) -> StyleSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise UsageError(f"unknown style preset {name!r}; known: {', '.join(PRESETS)}") from None


def spec_hash(anat: AnatomySpec, style: StyleSpec, size: int) -> str:
    text = f"{anat.to_json()}|{style.to_json()}|{size}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- rendering ----------------------------------------------------------------


def _uniform(rng: np.random.Generator, r: Range) -> float:
    lo, hi = r
    return float(lo) if hi == lo else float(rng.uniform(lo, hi))


def _ellipse_q(xx, yy, cx, cy, a, b, phi):
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2


def render_anatomy(anat: AnatomySpec, rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pre-style RGB render ``(3, H, W)`` in [0, 1] and masks ``(2, H, W)``."""
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    rho2 = (xx - 0.5) ** 2 + (yy - 0.5) ** 2
    fov = rho2 <= anat.fov_radius**2

    cells = 6
    coarse = rng.standard_normal((cells, cells))
    texture = ndimage.zoom(coarse, size / cells, order=3, mode="nearest")[:size, :size]
    texture = anat.texture_scale * texture / (np.abs(texture).max() + 1e-12)
    shade = 1.0 - 0.3 * rho2 / anat.fov_radius**2
    base = np.array([0.78, 0.36, 0.16])[:, None, None]
    img = base * (1.0 + texture)[None] * shade[None]

    cx = 0.5 + _uniform(rng, anat.center_jitter)
    cy = 0.5 + _uniform(rng, anat.center_jitter)
    radius = _uniform(rng, anat.disc_radius)
    ecc = _uniform(rng, anat.eccentricity)
    phi = float(rng.uniform(0.0, np.pi))
    a, b = radius, radius * (1.0 - ecc)
    cdr = _uniform(rng, anat.cup_to_disc_ratio)
    slack = (1.0 - cdr) * 0.3
    ccx = cx + float(rng.uniform(-slack, slack)) * a * 0.5
    ccy = cy + float(rng.uniform(-slack, slack)) * b * 0.5

    q_disc = _ellipse_q(xx, yy, cx, cy, a, b, phi)
    q_cup = _ellipse_q(xx, yy, ccx, ccy, a * cdr, b * cdr, phi)
    glow = 1.0 / (1.0 + np.exp((np.sqrt(q_disc) - 1.0) * 10.0))
    disc_color = np.array([0.96, 0.72, 0.42])[:, None, None]
    img = img * (1.0 - glow) + disc_color * glow
    cup_glow = 1.0 / (1.0 + np.exp((np.sqrt(q_cup) - 1.0) * 14.0))
    cup_color = np.array([1.0, 0.92, 0.7])[:, None, None]
    img = img * (1.0 - cup_glow) + cup_color * cup_glow

    n_vessels = int(rng.integers(anat.vessel_count[0], anat.vessel_count[1] + 1))
    t = np.linspace(0.0, 1.0, 64)
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1)
    for _ in range(n_vessels):
        theta = float(rng.uniform(0.0, 2.0 * np.pi))
        bend = float(rng.uniform(-1.2, 1.2))
        length = float(rng.uniform(0.3, 0.5))
        width = _uniform(rng, anat.vessel_width)
        ang = theta + bend * t
        pts = np.stack([cx + length * t * np.cos(ang), cy + length * t * np.sin(ang)], axis=1)
        d2 = cdist(pix, pts, "sqeuclidean").min(axis=1)
        vessel = np.clip(1.0 - np.sqrt(d2) / width, 0.0, 1.0).reshape(size, size)
        vessel *= 1.0 - 0.6 * cup_glow
        img = img * (1.0 - vessel[None] * np.array([0.35, 0.55, 0.5])[:, None, None])

    img = np.clip(img * fov[None], 0.0, 1.0)
    od = (q_disc <= 1.0) & fov
    oc = (q_cup <= 1.0) & od
    return img, np.stack([od, oc]).astype(np.float32)


@dataclass
class StyleParams:
    tint: Tuple[float, float, float]
    contrast: float
    brightness: float
    gamma: float
    vignette: float
    blur: float
    noise: float


def sample_style(style: StyleSpec, rng: np.random.Generator) -> StyleParams:
    return StyleParams(
        tint=tuple(_uniform(rng, r) for r in style.color_tint),
        contrast=_uniform(rng, style.contrast_gain),
        brightness=_uniform(rng, style.brightness_shift),
        gamma=_uniform(rng, style.gamma),
        vignette=_uniform(rng, style.vignette_strength),
        blur=_uniform(rng, style.blur_sigma),
        noise=_uniform(rng, style.noise_sigma),
    )


def apply_style(img: np.ndarray, p: StyleParams, rng: np.random.Generator) -> np.ndarray:
    """tint -> contrast -> brightness -> gamma -> vignette -> blur -> noise -> clamp.

    Steps at their neutral value are skipped, so a neutral style returns the
    input unchanged bit for bit.
    """
    out = img
    if any(t != 1.0 for t in p.tint):
        out = out * np.asarray(p.tint)[:, None, None]
    if p.contrast != 1.0:
        mean = out.mean(axis=(1, 2), keepdims=True)
        out = (out - mean) * p.contrast + mean
    if p.brightness != 0.0:
        out = out + p.brightness
    if p.gamma != 1.0:
        out = np.clip(out, 0.0, None) ** p.gamma
    if p.vignette != 0.0:
        size = out.shape[1]
        coords = (np.arange(size) + 0.5) / size - 0.5
        rho2 = coords[:, None] ** 2 + coords[None, :] ** 2
        out = out * (1.0 - p.vignette * np.clip(rho2 / 0.25, 0.0, 1.0))[None]
    if p.blur > 0.0:
        out = np.stack([ndimage.gaussian_filter(ch, p.blur, mode="nearest") for ch in out])
    if p.noise > 0.0:
        out = out + rng.normal(0.0, p.noise, size=out.shape)
    if out is not img:
        out = np.clip(out, 0.0, 1.0)
    return out


def _style_key(style: StyleSpec) -> int:
    return zlib.crc32(style.to_json().encode())


def generate_sample(
    anat: AnatomySpec, style: StyleSpec, rng_seed: int, size: int = 64
) -> Tuple[np.ndarray, np.ndarray]:
    """Render one sample: image ``(1, 3, H, W)`` in [0, 1] and mask ``(1, 2, H, W)``.

    Mask channel 0 is the disc, channel 1 the cup (always inside the disc).
    """
    anatomy_rng = np.random.default_rng([int(rng_seed), 0])
    style_rng = np.random.default_rng([int(rng_seed), 1, _style_key(style)])
    img, mask = render_anatomy(anat, anatomy_rng, size)
    img = apply_style(img, sample_style(style, style_rng), style_rng)
    return img[None].astype(np.float32), mask[None]


# -- disk IO -------------------------------------------------------------------


def encode_mask(mask: np.ndarray) -> np.ndarray:
    """``(2, H, W)`` binary mask to the 0/128/255 label image."""
    label = np.zeros(mask.shape[1:], dtype=np.uint8)
    label[mask[0] > 0.5] = MASK_OD
    label[mask[1] > 0.5] = MASK_OC
    return label


def decode_mask(label: np.ndarray, where: str = "") -> np.ndarray:
    bad = ~np.isin(label, (0, MASK_OD, MASK_OC))
    if bad.any():
        values = sorted(set(np.unique(label[bad]).tolist()))[:5]
        raise LoadError(f"{where}: mask has non-label values {values}")
    return np.stack([label >= MASK_OD, label == MASK_OC]).astype(np.float32)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class ManifestRecord:
    id: str
    image_path: str
    mask_path: str
    seed: int
    spec_hash: str


@dataclass
class Manifest:
    domain: str
    size: int
    anatomy: AnatomySpec
    style: StyleSpec
    records: List[ManifestRecord] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            MANIFEST_TAG,
            f"# domain={self.domain}",
            f"# size={self.size}",
            f"# anatomy={self.anatomy.to_json()}",
            f"# style={self.style.to_json()}",
            "id\timage_path\tmask_path\tseed\tspec_hash",
        ]
        for r in self.records:
            lines.append(f"{r.id}\t{r.image_path}\t{r.mask_path}\t{r.seed}\t{r.spec_hash}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str, where: str = "") -> "Manifest":
        header: Dict[str, str] = {}
        records = []
        lines = text.splitlines()
        if not lines or lines[0] != MANIFEST_TAG:
            raise LoadError(f"{where}: not a wisernet manifest")
        for line in lines[1:]:
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                header[key] = value
            elif line.startswith("id\t") or not line.strip():
                continue
            else:
                parts = line.split("\t")
                if len(parts) != 5:
                    raise LoadError(f"{where}: malformed record {line!r}")
                records.append(ManifestRecord(parts[0], parts[1], parts[2], int(parts[3]), parts[4]))
        try:
            return cls(
                domain=header["domain"],
                size=int(header["size"]),
                anatomy=AnatomySpec.from_json(header["anatomy"]),
                style=StyleSpec.from_json(header["style"]),
                records=records,
            )
        except KeyError as exc:
            raise LoadError(f"{where}: manifest header lacks {exc}") from None


def write_sample(domain_dir: Path, sample_id: str, image: np.ndarray, mask: np.ndarray) -> Tuple[str, str]:
    image_rel = f"images/{sample_id}.png"
    mask_rel = f"masks/{sample_id}.png"
    try:
        Image.fromarray(_to_uint8(image.transpose(1, 2, 0)), mode="RGB").save(domain_dir / image_rel)
        Image.fromarray(encode_mask(mask), mode="L").save(domain_dir / mask_rel)
    except OSError as exc:
        raise OSError(f"cannot write sample {sample_id} under {domain_dir}: {exc}") from exc
    return image_rel, mask_rel


def generate_domain(
    anat: AnatomySpec,
    style: StyleSpec,
    n: int,
    seed: int,
    out_dir,
    domain: Optional[str] = None,
    size: int = 64,
    splits: Sequence[Tuple[str, int]] = (),
) -> Manifest:
    """Render ``n`` samples into ``out_dir`` and write its manifest.

    Sample ``i`` uses seed ``seed * 1_000_000 + i``. ``splits`` optionally
    names consecutive id blocks, e.g. ``[("train", 200), ("val", 40)]``;
    without it ids are ``sample_0000`` and up.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create domain directory {out}: {exc}") from exc
    blocks = list(splits) or [("sample", n)]
    if sum(count for _, count in blocks) != n:
        raise UsageError(f"split sizes {blocks} do not add up to n={n}")
    manifest = Manifest(domain or style.name, size, anat, style)
    digest = spec_hash(anat, style, size)
    index = 0
    for prefix, count in blocks:
        for k in range(count):
            sample_seed = seed * 1_000_000 + index
            image, mask = generate_sample(anat, style, sample_seed, size)
            sample_id = f"{prefix}_{k:04d}"
            image_rel, mask_rel = write_sample(out, sample_id, image[0], mask[0])
            manifest.records.append(ManifestRecord(sample_id, image_rel, mask_rel, sample_seed, digest))
            index += 1
    (out / MANIFEST_NAME).write_text(manifest.to_text())
    return manifest


def regenerate_from_manifest(manifest_path, out_dir) -> Manifest:
    """Re-render every record of an existing manifest into ``out_dir``."""
    path = Path(manifest_path)
    manifest = Manifest.parse(path.read_text(), str(path))
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for r in manifest.records:
        image, mask = generate_sample(manifest.anatomy, manifest.style, r.seed, manifest.size)
        write_sample(out, r.id, image[0], mask[0])
    (out / MANIFEST_NAME).write_text(manifest.to_text())
    return manifest


@dataclass
class Dataset:
    domain: str
    ids: List[str]
    images: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        for i, sample_id in enumerate(self.ids):
            yield self.images[i], self.masks[i], sample_id

    def subset(self, prefix: str) -> "Dataset":
        keep = [i for i, s in enumerate(self.ids) if s.startswith(prefix + "_")]
        return Dataset(self.domain, [self.ids[i] for i in keep], self.images[keep], self.masks[keep])


def load_dataset(directory, input_size: Optional[int] = None, split: Optional[str] = None) -> Dataset:
    """Load a domain directory in manifest order.

    Images are scaled to [0, 1] and, when ``input_size`` differs from the
    stored size, resized bilinearly (masks with nearest neighbour).

    Raises:
        LoadError: naming the entry for missing files, image/mask size
            mismatches and masks with values outside {0, 128, 255}.
    """
    root = Path(directory)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise LoadError(f"{root}: no {MANIFEST_NAME}")
    manifest = Manifest.parse(path.read_text(), str(path))
    records = [r for r in manifest.records if split is None or r.id.startswith(split + "_")]
    if not records:
        raise LoadError(f"{root}: no records" + (f" for split {split!r}" if split else ""))
    images, masks, ids = [], [], []
    for r in records:
        where = f"{root}:{r.id}"
        try:
            with Image.open(root / r.image_path) as im:
                img = im.convert("RGB")
                img.load()
            with Image.open(root / r.mask_path) as mk:
                label_img = mk.convert("L") if mk.mode != "L" else mk.copy()
        except (OSError, FileNotFoundError) as exc:
            raise LoadError(f"{where}: cannot read sample files ({exc})") from exc
        if img.size != label_img.size:
            raise LoadError(f"{where}: image size {img.size} differs from mask size {label_img.size}")
        mask = decode_mask(np.asarray(label_img), where)
        if input_size is not None and img.size != (input_size, input_size):
            img = img.resize((input_size, input_size), Image.BILINEAR)
            label_img = label_img.resize((input_size, input_size), Image.NEAREST)
            mask = decode_mask(np.asarray(label_img), where)
        images.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
        masks.append(mask)
        ids.append(r.id)
    return Dataset(manifest.domain, ids, np.stack(images), np.stack(masks))
