"""Multi-spectral sample records, manifest I/O, synthetic corpus, augmentation and PK sampling.

Manifest format: UTF-8 JSON lines, one record per line::

    {"id": 5, "camera": 0, "time": 2, "split": "train",
     "rgb": "images/train/0005_000_rgb.png", "nir": "...", "tir": "..."}

Image paths are relative to the manifest's directory. Images are 8-bit RGB PNG.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ManifestError

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class SpectraSet:
    names: tuple = ("rgb", "nir", "tir")

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 1:
            raise ConfigError("spectra set must contain at least one name", field="spectra")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate spectra names in {names}", field="spectra")

    @property
    def count(self):
        return len(self.names)

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown spectra '{name}', expected one of {self.names}", field="spectra") from None

    def __iter__(self):
        return iter(self.names)

    def __len__(self):
        return len(self.names)


@dataclass(frozen=True)
class SampleRecord:
    """One object instance with one image per spectra.

    ``identity`` is the dense label within the record's label space; ``raw_id``
    keeps whatever id the manifest carried.
    """

    identity: int
    camera: int
    time_label: int
    images: dict
    split: str
    raw_id: int = -1
    uid: str = ""


@dataclass
class MultiSpectralDataset:
    records: list
    spectra: SpectraSet = field(default_factory=SpectraSet)
    root: Path | None = None

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return MultiSpectralDataset([r for r in self.records if r.split == name], self.spectra, self.root)

    @property
    def labels(self):
        return np.array([r.identity for r in self.records], dtype=np.int64)

    @property
    def num_identities(self):
        return len({r.identity for r in self.records})

    def index_by_identity(self):
        groups = {}
        for i, r in enumerate(self.records):
            groups.setdefault(r.identity, []).append(i)
        return groups

    def load_images(self, size):
        """Decode every image into a float32 array of shape [N, M, 3, H, W] in [0, 1]."""
        h, w = size
        out = np.empty((len(self.records), self.spectra.count, 3, h, w), dtype=np.float32)
        for i, rec in enumerate(self.records):
            for m, name in enumerate(self.spectra):
                out[i, m] = read_image(self._resolve(rec.images[name]), size)
        return out

    def _resolve(self, ref):
        p = Path(ref)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def read_image(path, size):
    """Read a PNG as CHW float32 in [0, 1], resized to ``size`` = (H, W)."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def _record_to_json(rec, spectra):
    row = {"id": rec.raw_id if rec.raw_id >= 0 else rec.identity, "camera": rec.camera,
           "time": rec.time_label, "split": rec.split}
    for name in spectra:
        row[name] = str(rec.images[name])
    return row


def write_manifest(records, path, spectra=None):
    spectra = spectra or SpectraSet()
    path = Path(path)
    lines = [json.dumps(_record_to_json(r, spectra), sort_keys=True) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def manifest_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dense_relabel(raw_ids):
    mapping = {raw: i for i, raw in enumerate(sorted(set(raw_ids)))}
    return [mapping[r] for r in raw_ids]


def load_manifest(path, spectra=None, check_files=True):
    """Parse a JSON-lines manifest into a dataset.

    Identities are densely re-indexed per label space: the train split gets its
    own space, query and gallery share one (they must match each other).
    """
    spectra = spectra or SpectraSet()
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON: {exc.msg}", line=lineno) from None
        if not isinstance(obj, dict):
            raise ManifestError("record must be a JSON object", line=lineno)
        for key in ("id", "split"):
            if key not in obj:
                raise ManifestError(f"missing field '{key}'", line=lineno)
        missing = [name for name in spectra if name not in obj]
        if missing:
            raise ManifestError(f"record lacks spectra {missing}", line=lineno)
        if obj["split"] not in SPLITS:
            raise ManifestError(f"unknown split '{obj['split']}'", line=lineno)
        try:
            raw_id, camera, time = int(obj["id"]), int(obj.get("camera", 0)), int(obj.get("time", 0))
        except (TypeError, ValueError):
            raise ManifestError("id/camera/time must be integers", line=lineno) from None
        images = {name: obj[name] for name in spectra}
        if check_files:
            for ref in images.values():
                p = Path(ref) if Path(ref).is_absolute() else path.parent / ref
                if not p.is_file():
                    raise FileNotFoundError(f"image file not found: {p}")
        rows.append((raw_id, camera, time, obj["split"], images, lineno))

    if not rows:
        warnings.warn(f"manifest {path} contains no records", stacklevel=2)

    train_rows = [r for r in rows if r[3] == "train"]
    test_rows = [r for r in rows if r[3] != "train"]
    relabeled = {}
    for group in (train_rows, test_rows):
        for r, label in zip(group, _dense_relabel([r[0] for r in group])):
            relabeled[r[5]] = label

    records = [
        SampleRecord(identity=relabeled[lineno], camera=cam, time_label=t, images=imgs, split=split,
                     raw_id=raw, uid=f"{split}:{lineno}")
        for raw, cam, t, split, imgs, lineno in rows
    ]
    return MultiSpectralDataset(records, spectra, path.parent)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_identities: int = 20
    n_test_identities: int = 0
    n_samples_per_identity: int = 8
    n_cameras: int = 4
    n_time_labels: int = 3
    image_size: tuple = (64, 32)
    object_class: str = "person"
    noise: float = 0.05
    query_fraction: float = 0.5
    seed: int | None = None

    def validate(self):
        for name in ("n_identities", "n_samples_per_identity", "n_cameras", "n_time_labels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", field=f"data.{name}")
        if self.n_test_identities < 0:
            raise ConfigError("n_test_identities must be >= 0", field="data.n_test_identities")
        if len(self.image_size) != 2 or min(self.image_size) < 1:
            raise ConfigError(f"bad image_size {self.image_size}", field="data.image_size")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0", field="data.noise")
        if self.object_class not in ("person", "vehicle"):
            raise ConfigError(f"object_class must be person|vehicle, got {self.object_class!r}",
                              field="data.object_class")
        if not 0.0 < self.query_fraction <= 1.0:
            raise ConfigError("query_fraction must be in (0, 1]", field="data.query_fraction")
        if self.seed is None:
            raise ConfigError("a seed is required for data generation", field="seed")

    @property
    def resolved_size(self):
        """(H, W); vehicles use the transposed aspect."""
        h, w = self.image_size
        return (w, h) if self.object_class == "vehicle" else (h, w)


_STRIDE = 1_000_003


def _rng(seed, *keys):
    return np.random.default_rng([seed, *keys])


def _identity_genome(rng):
    """Random appearance parameters for one identity."""
    n_bands = int(rng.integers(2, 5))
    cuts = np.sort(rng.uniform(0.15, 0.9, size=n_bands - 1))
    return {
        "band_edges": np.concatenate([[0.0], cuts, [1.0]]),
        "band_colors": rng.uniform(0.05, 0.95, size=(n_bands, 3)),
        "blob_pos": rng.uniform(0.15, 0.85, size=(3, 2)),
        "blob_sigma": rng.uniform(0.06, 0.16, size=3),
        "blob_colors": rng.uniform(0.0, 1.0, size=(3, 3)),
        "stripe_freq": rng.uniform(4.0, 14.0),
        "stripe_angle": rng.uniform(0, math.pi),
        "stripe_band": int(rng.integers(0, n_bands)),
        "width": rng.uniform(0.55, 0.85),
        "heat": rng.uniform(0.2, 1.0, size=n_bands),
    }


def _camera_warp(camera):
    crng = np.random.default_rng([camera, 17])
    return {"shift": crng.uniform(-0.08, 0.08, size=2), "scale": crng.uniform(0.88, 1.12),
            "mirror": bool(camera % 2)}


def _render_base(genome, v, u):
    """Evaluate the identity pattern at normalized coordinates (v vertical, u horizontal).

    Returns (color [H,W,3], heat [H,W], foreground mask [H,W]).
    """
    edges = genome["band_edges"]
    band = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2)
    color = genome["band_colors"][band]
    heat = genome["heat"][band]
    for (py, px), sig, col in zip(genome["blob_pos"], genome["blob_sigma"], genome["blob_colors"]):
        g = np.exp(-((v - py) ** 2 + (u - px) ** 2) / (2 * sig ** 2))[..., None]
        color = color * (1 - 0.7 * g) + col * 0.7 * g
    a = genome["stripe_angle"]
    stripe = 0.5 + 0.5 * np.sin(2 * math.pi * genome["stripe_freq"] * (u * math.cos(a) + v * math.sin(a)))
    on_band = (band == genome["stripe_band"])[..., None]
    color = np.where(on_band, color * (0.75 + 0.25 * stripe[..., None]), color)
    half = genome["width"] / 2
    mask = ((np.abs(u - 0.5) <= half) & (v >= 0.02) & (v <= 0.98)).astype(np.float64)
    return color, heat, mask


def _box_blur(x, k=1):
    if k <= 0:
        return x
    pad = np.pad(x, ((k, k), (k, k)), mode="edge")
    out = np.zeros_like(x)
    for dy in range(2 * k + 1):
        for dx in range(2 * k + 1):
            out += pad[dy:dy + x.shape[0], dx:dx + x.shape[1]]
    return out / (2 * k + 1) ** 2


def render_sample(genome, camera, time_label, size, noise, rng):
    """Render one multi-spectral sample; returns {spectra: HxWx3 float array in [0,1]}."""
    h, w = size
    warp = _camera_warp(camera)
    jitter = rng.uniform(-0.03, 0.03, size=2)
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    v, u = np.meshgrid(ys, xs, indexing="ij")
    v = (v - 0.5 - warp["shift"][0] - jitter[0]) / warp["scale"] + 0.5
    u = (u - 0.5 - warp["shift"][1] - jitter[1]) / warp["scale"] + 0.5
    if warp["mirror"]:
        u = 1.0 - u
    color, heat, mask = _render_base(genome, v, u)

    background = rng.uniform(0.2, 0.8, size=3) * (0.8 + 0.2 * rng.random((h, w, 1)))
    bg_heat = rng.uniform(0.0, 0.3)
    tint = _rng(time_label, 29).uniform(0.75, 1.25, size=3)
    gain = 0.6 + 0.4 * (time_label % 3) / 2

    m = mask[..., None]
    rgb = np.clip((color * m + background * (1 - m)) * tint * gain, 0, 1)
    gray = rgb @ np.array([0.25, 0.35, 0.40])
    nir_map = np.clip((gray - gray.mean()) * 1.6 + 0.5, 0, 1)
    nir = np.repeat(nir_map[..., None], 3, axis=2) * np.array([1.0, 0.97, 0.93])
    thermal = _box_blur(heat * mask + bg_heat * (1 - mask), 1)
    thermal = np.clip(thermal ** 0.7, 0, 1)
    tir = np.stack([thermal, thermal ** 2, 1.0 - thermal], axis=2)

    out = {}
    for name, img, scale in (("rgb", rgb, 1.0), ("nir", nir, 1.3), ("tir", tir, 1.6)):
        out[name] = np.clip(img + rng.normal(0.0, noise * scale, size=img.shape), 0, 1)
    return out


def _to_png(arr, path):
    Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="RGB").save(path, format="PNG", optimize=False)


def generate_synthetic(config, out_dir, spectra=None):
    """Write a deterministic synthetic corpus under ``out_dir`` and return its records.

    Identities ``[0, n_identities)`` form the train split; the next
    ``n_test_identities`` are test identities, split into query and gallery per
    ``query_fraction``. Output bytes depend only on (config, seed).
    """
    config.validate()
    spectra = spectra or SpectraSet()
    unknown = [s for s in spectra if s not in ("rgb", "nir", "tir")]
    if unknown:
        raise ConfigError(f"synthetic generator only renders rgb/nir/tir, got {unknown}", field="spectra")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc

    size = config.resolved_size
    total = config.n_identities + config.n_test_identities
    n_query = max(1, int(round(config.query_fraction * config.n_samples_per_identity)))
    records = []
    for pid in range(total):
        is_train = pid < config.n_identities
        genome = _identity_genome(_rng(config.seed, pid))
        for j in range(config.n_samples_per_identity):
            srng = _rng(config.seed, pid, j, _STRIDE)
            camera = int(srng.integers(0, config.n_cameras))
            time_label = int(srng.integers(0, config.n_time_labels))
            split = "train" if is_train else ("query" if j < n_query else "gallery")
            imgs = render_sample(genome, camera, time_label, size, config.noise, srng)
            sub = out_dir / "images" / split
            sub.mkdir(parents=True, exist_ok=True)
            refs = {}
            for name in spectra:
                rel = Path("images") / split / f"{pid:04d}_{j:03d}_{name}.png"
                _to_png(imgs[name], out_dir / rel)
                refs[name] = rel.as_posix()
            records.append(SampleRecord(identity=pid, camera=camera, time_label=time_label, images=refs,
                                        split=split, raw_id=pid, uid=f"{pid}:{j}"))
    write_manifest(records, out_dir / MANIFEST_NAME, spectra)
    logger.info("wrote %d records (%d images) to %s", len(records), len(records) * spectra.count, out_dir)
    return records


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    pad: int = 10
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: float = 0.3

    def validate(self):
        for name in ("flip_prob", "erase_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {p}", field=f"augment.{name}")
        if self.pad < 0:
            raise ConfigError("pad must be >= 0", field="augment.pad")


def _resize_chw(img, size):
    if img.shape[1:] == tuple(size):
        return img
    hwc = np.clip(img.transpose(1, 2, 0) * 255, 0, 255).astype(np.uint8)
    pil = Image.fromarray(hwc).resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32).transpose(2, 0, 1) / 255.0


def augment(img, rng, cfg=None, size=None):
    """Resize, random flip, pad + random crop, random erasing on a CHW image.

    Deterministic given ``rng``; with every probability and ``pad`` at zero this
    returns the (resized) input unchanged.
    """
    cfg = cfg or AugmentConfig()
    if size is not None:
        img = _resize_chw(img, size)
    out = img
    c, h, w = out.shape
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    if cfg.pad > 0:
        p = cfg.pad
        padded = np.pad(out, ((0, 0), (p, p), (p, p)))
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        out = padded[:, top:top + h, left:left + w]
    if cfg.erase_prob > 0 and rng.random() < cfg.erase_prob:
        out = _random_erase(np.array(out), rng, cfg)
    return np.ascontiguousarray(out, dtype=img.dtype)


def _random_erase(img, rng, cfg):
    _, h, w = img.shape
    lo, hi = cfg.erase_area
    r1 = cfg.erase_aspect
    for _ in range(100):
        area = rng.uniform(lo, hi) * h * w
        aspect = rng.uniform(r1, 1.0 / r1)
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            img[:, y:y + eh, x:x + ew] = rng.random((img.shape[0], eh, ew))
            return img
    return img


# ---------------------------------------------------------------------------
# PK sampling
# ---------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    P: int = 16
    N: int = 4
    seed: int = 0

    def validate(self):
        if self.P < 2:
            raise ConfigError(f"P must be >= 2 (triplet loss needs negatives), got {self.P}", field="train.P")
        if self.N < 2:
            raise ConfigError(f"N must be >= 2 (triplet loss needs positives), got {self.N}", field="train.N")

    @property
    def batch_size(self):
        return self.P * self.N


@dataclass
class Batch:
    indices: np.ndarray
    labels: np.ndarray
    num_spectra: int

    @property
    def num_images(self):
        return len(self.indices) * self.num_spectra


def pk_sample_batch(dataset, cfg, rng):
    """Draw P identities and N instances of each; short identities are sampled with replacement.

    Indices are identity-major: the first N belong to the first drawn identity.
    """
    cfg.validate()
    groups = dataset.index_by_identity()
    if len(groups) < cfg.P:
        raise ConfigError(f"dataset has {len(groups)} identities, fewer than P={cfg.P}", field="train.P")
    ids = np.array(sorted(groups))
    chosen = rng.choice(ids, size=cfg.P, replace=False)
    indices, labels = [], []
    for pid in chosen:
        pool = groups[int(pid)]
        picks = rng.choice(pool, size=cfg.N, replace=len(pool) < cfg.N)
        indices.extend(int(i) for i in picks)
        labels.extend([int(pid)] * cfg.N)
    return Batch(np.array(indices, dtype=np.int64), np.array(labels, dtype=np.int64), dataset.spectra.count)
