"""Two-domain datasets: synthetic generation, directory ingestion,
preprocessing, augmentation and mixed-domain batch composition."""

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
import yaml
from PIL import Image
from scipy import ndimage

from src.config import AugmentConfig, DataConfig
from src.errors import ConfigurationError, InputError, ParameterError
from src.models import (
    BatchLayout,
    DomainDatasets,
    DomainId,
    LabeledSample,
    SampleBatch,
    StructureKind,
    SyntheticStyle,
    UnlabeledSample,
)

logger = logging.getLogger(__name__)

Size = Union[int, Tuple[int, int]]

SPLIT_NAMES = ("source_labeled", "target_labeled", "target_unlabeled", "validation", "test")
N_CLASSES = {StructureKind.TUBULAR: 2, StructureKind.CIRCULAR: 3}


def _pair(size: Size) -> Tuple[int, int]:
    if isinstance(size, int):
        return size, size
    h, w = size
    return int(h), int(w)


# --------------------------------------------------------------------------
# Preprocessing and augmentation
# --------------------------------------------------------------------------

def preprocess(
    raw_image: np.ndarray,
    enable_clahe: bool = False,
    gamma: float = 1.0,
    out_size: Optional[Size] = None,
    clahe_clip: float = 2.0,
    clahe_tiles: int = 8,
) -> np.ndarray:
    """Min-max normalize to [0, 1], optionally equalize with CLAHE, apply
    gamma correction and resize.

    A constant image has no range to stretch; it keeps its value, divided by
    the dtype maximum for integer inputs and clipped to [0, 1].
    """
    image = np.asarray(raw_image)
    if image.size == 0:
        raise InputError("cannot preprocess an empty image")
    if image.ndim != 2:
        raise InputError(f"expected a 2D grid, got shape {image.shape}")
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")

    values = image.astype(np.float64)
    if not np.isfinite(values).all():
        raise InputError("image contains non-finite values")

    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        x = (values - lo) / (hi - lo)
        if enable_clahe:
            clahe = cv2.createCLAHE(clipLimit=clahe_clip, tileGridSize=(clahe_tiles, clahe_tiles))
            x = clahe.apply(np.round(x * 255.0).astype(np.uint8)).astype(np.float64) / 255.0
    else:
        scale = float(np.iinfo(image.dtype).max) if np.issubdtype(image.dtype, np.integer) else 1.0
        x = np.full(values.shape, np.clip(lo / scale, 0.0, 1.0))

    x = np.power(x, gamma)

    if out_size is not None:
        oh, ow = _pair(out_size)
        if (oh, ow) != x.shape:
            x = cv2.resize(x, (ow, oh), interpolation=cv2.INTER_LINEAR)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def augment(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    rng: np.random.Generator,
    crop_out: Size,
    resize_to: Optional[Size] = None,
    p_hflip: float = 0.5,
    p_vflip: float = 0.5,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Random flips, random crop and optional resize, applied identically to
    image and mask (nearest-neighbor for the mask).

    Random numbers are always drawn in the same order so that a seeded
    generator yields the same geometry regardless of the probabilities.
    """
    h, w = image.shape
    ch, cw = _pair(crop_out)
    if ch > h or cw > w:
        raise ParameterError(f"crop {ch}x{cw} larger than input {h}x{w}")
    if mask is not None and mask.shape != image.shape:
        raise InputError(f"mask shape {mask.shape} differs from image shape {image.shape}")

    hflip = rng.random() < p_hflip
    vflip = rng.random() < p_vflip
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))

    if hflip:
        image = image[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    if vflip:
        image = image[::-1, :]
        mask = mask[::-1, :] if mask is not None else None

    image = image[top:top + ch, left:left + cw]
    mask = mask[top:top + ch, left:left + cw] if mask is not None else None

    if resize_to is not None:
        rh, rw = _pair(resize_to)
        if (rh, rw) != (ch, cw):
            image = cv2.resize(np.ascontiguousarray(image), (rw, rh), interpolation=cv2.INTER_LINEAR)
            if mask is not None:
                mask = cv2.resize(np.ascontiguousarray(mask).astype(np.uint8), (rw, rh),
                                  interpolation=cv2.INTER_NEAREST).astype(mask.dtype)

    image = np.ascontiguousarray(image)
    mask = np.ascontiguousarray(mask) if mask is not None else None
    return image, mask


# --------------------------------------------------------------------------
# Synthetic cross-anatomy generator
# --------------------------------------------------------------------------

def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8.0)
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def _tubular_mask(rng: np.random.Generator, size: int, domain: DomainId) -> np.ndarray:
    """Random branching curves; the target family is thicker with fewer branches."""
    mask = np.zeros((size, size), dtype=np.uint8)
    if domain == DomainId.SOURCE:
        thickness, n_branches, n_trunks = 1, int(rng.integers(3, 6)), 2
    else:
        thickness, n_branches, n_trunks = 2, int(rng.integers(1, 4)), 1
    step = max(size / 14.0, 2.0)

    def walk(start: np.ndarray, angle: float, n_steps: int) -> np.ndarray:
        points = [start]
        for _ in range(n_steps):
            angle += rng.normal(0.0, 0.3)
            nxt = points[-1] + step * np.array([math.cos(angle), math.sin(angle)])
            points.append(np.clip(nxt, 0, size - 1))
        return np.array(points)

    trunks = []
    for _ in range(n_trunks):
        start = np.array([rng.uniform(0, size - 1), 0.0])
        if rng.random() < 0.5:
            start = start[::-1].copy()
        centre = np.array([size / 2.0, size / 2.0])
        heading = math.atan2(*(centre - start)[::-1]) + rng.normal(0.0, 0.3)
        trunk = walk(start, heading, 16)
        trunks.append(trunk)
        cv2.polylines(mask, [np.round(trunk).astype(np.int32)], False, 1, thickness=thickness + 1)

    for _ in range(n_branches):
        trunk = trunks[int(rng.integers(0, len(trunks)))]
        origin = trunk[int(rng.integers(2, len(trunk) - 2))]
        heading = rng.uniform(-math.pi, math.pi)
        branch = walk(origin, heading, int(rng.integers(4, 9)))
        cv2.polylines(mask, [np.round(branch).astype(np.int32)], False, 1, thickness=thickness)
    return mask


def _circular_mask(rng: np.random.Generator, size: int, domain: DomainId) -> np.ndarray:
    """Concentric disc (class 1) inside an annulus (class 2)."""
    cy, cx = size / 2.0 + rng.uniform(-size / 8.0, size / 8.0, size=2)
    outer = rng.uniform(0.2, 0.3) * size
    if domain == DomainId.SOURCE:
        inner = outer * rng.uniform(0.4, 0.6)
    else:
        inner = outer * rng.uniform(0.6, 0.75)
    inner = min(inner, outer - 2.0)

    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(yy - cy, xx - cx)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[dist <= outer] = 2
    mask[dist <= inner] = 1
    return mask


_CLASS_LEVELS = {
    (StructureKind.TUBULAR, DomainId.SOURCE): np.array([0.0, 1.0]),
    (StructureKind.TUBULAR, DomainId.TARGET): np.array([0.0, 1.0]),
    (StructureKind.CIRCULAR, DomainId.SOURCE): np.array([0.0, 1.0, 0.55]),
    (StructureKind.CIRCULAR, DomainId.TARGET): np.array([0.0, 1.0, 0.4]),
}


def _render(
    mask: np.ndarray,
    kind: StructureKind,
    domain: DomainId,
    style: SyntheticStyle,
    rng: np.random.Generator,
    texture_rng: np.random.Generator,
) -> np.ndarray:
    levels = _CLASS_LEVELS[(kind, domain)]
    image = style.background_level + style.foreground_contrast * levels[mask]
    image = image + 0.08 * _texture(texture_rng, mask.shape[0])
    if style.blur_radius > 0:
        image = ndimage.gaussian_filter(image, sigma=style.blur_radius)
    if style.noise_sigma > 0:
        image = image + rng.normal(0.0, style.noise_sigma, size=mask.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def generate_synthetic_domains(
    kind: Union[StructureKind, str],
    style_source: SyntheticStyle,
    style_target: SyntheticStyle,
    counts: Sequence[int],
    seed: int,
    size: int = 64,
) -> DomainDatasets:
    """Generate S_L, T_L, T_U, validation and test splits sharing one
    structure family rendered in two styles.

    ``counts`` is (N_s, N_t1, N_t2, N_val, N_test).
    """
    try:
        kind = StructureKind(kind)
    except ValueError as e:
        raise ParameterError(f"unknown synthetic kind {kind!r}") from e
    counts = tuple(int(c) for c in counts)
    if len(counts) != 5 or any(c <= 0 for c in counts):
        raise ParameterError(f"counts must be five positive integers, got {counts}")
    if style_source == style_target:
        logger.warning("Source and target styles are identical; the domain gap is morphology only")

    n_s, n_t1, n_t2, n_val, n_test = counts
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]
    plan = [
        (DomainId.SOURCE, style_source, n_s, "src", rngs[0]),
        (DomainId.TARGET, style_target, n_t1, "tl", rngs[1]),
        (DomainId.TARGET, style_target, n_t2, "tu", rngs[2]),
        (DomainId.TARGET, style_target, n_val, "val", rngs[3]),
        (DomainId.TARGET, style_target, n_test, "test", rngs[4]),
    ]
    splits = []
    for split_index, (domain, style, count, prefix, rng) in enumerate(plan):
        draw = _tubular_mask if kind == StructureKind.TUBULAR else _circular_mask
        samples = []
        for i in range(count):
            mask = draw(rng, size, domain)
            texture_rng = np.random.default_rng([seed, style.texture_seed, split_index, i])
            image = _render(mask, kind, domain, style, rng, texture_rng)
            samples.append(LabeledSample(image=image, mask=mask.astype(np.int64), domain=domain,
                                         id=f"{prefix}_{i:04d}"))
        splits.append(samples)

    source_labeled, target_labeled, target_pool, validation, test = splits
    target_unlabeled = [UnlabeledSample(image=s.image, id=s.id) for s in target_pool]
    return DomainDatasets(
        source_labeled=source_labeled,
        target_labeled=target_labeled,
        target_unlabeled=target_unlabeled,
        validation=validation,
        test=test,
        target_unlabeled_reference=target_pool,
        n_classes=N_CLASSES[kind],
    )


# --------------------------------------------------------------------------
# Batch composition
# --------------------------------------------------------------------------

class SamplePool(Sequence):
    """Read-counting view over a list of samples."""

    def __init__(self, samples: Sequence, name: str):
        self._samples = list(samples)
        self.name = name
        self.reads = 0

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, index):
        self.reads += 1
        return self._samples[index]


def compose_batch(
    source_labeled: Sequence[LabeledSample],
    target_labeled: Sequence[LabeledSample],
    target_unlabeled: Sequence[UnlabeledSample],
    layout: BatchLayout,
    rng: np.random.Generator,
) -> SampleBatch:
    """Draw the layout quotas from the three pools.

    Pools smaller than their quota are sampled with replacement; a pool with
    a zero quota is never touched.
    """
    picks = []
    for pool, quota, name in (
        (source_labeled, layout.n_source_labeled, "source_labeled"),
        (target_labeled, layout.n_target_labeled, "target_labeled"),
        (target_unlabeled, layout.n_target_unlabeled, "target_unlabeled"),
    ):
        if quota == 0:
            picks.append([])
            continue
        if len(pool) == 0:
            raise ConfigurationError(f"{name} pool is empty but the layout asks for {quota}")
        replace = len(pool) < quota
        indices = rng.choice(len(pool), size=quota, replace=replace)
        picks.append([pool[int(i)] for i in indices])
    return SampleBatch(source_labeled=picks[0], target_labeled=picks[1], target_unlabeled=picks[2])


@dataclass
class TensorBatch:
    """Stacked tensors of a composed batch; absent roles are None."""
    source_images: Optional[torch.Tensor] = None
    source_masks: Optional[torch.Tensor] = None
    target_images: Optional[torch.Tensor] = None
    target_masks: Optional[torch.Tensor] = None
    unlabeled_images: Optional[torch.Tensor] = None


def _stack(
    samples: Sequence,
    rng: Optional[np.random.Generator],
    augment_config: Optional[AugmentConfig],
    with_masks: bool,
) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
    if not samples:
        return None, None
    images, masks = [], []
    for sample in samples:
        image = sample.image
        mask = sample.mask if with_masks else None
        if augment_config is not None and augment_config.enabled and rng is not None:
            crop = min(augment_config.crop, *image.shape)
            image, mask = augment(image, mask, rng, crop, augment_config.resize_to,
                                  augment_config.p_hflip, augment_config.p_vflip)
        images.append(image)
        masks.append(mask)
    x = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack(masks).astype(np.int64)) if with_masks else None
    return x, y


def batch_to_tensors(
    batch: SampleBatch,
    rng: Optional[np.random.Generator] = None,
    augment_config: Optional[AugmentConfig] = None,
) -> TensorBatch:
    """Augment (when configured) and stack a batch into N×1×H×W tensors."""
    xs, ys = _stack(batch.source_labeled, rng, augment_config, with_masks=True)
    xt, yt = _stack(batch.target_labeled, rng, augment_config, with_masks=True)
    xu, _ = _stack(batch.target_unlabeled, rng, augment_config, with_masks=False)
    return TensorBatch(source_images=xs, source_masks=ys, target_images=xt, target_masks=yt,
                       unlabeled_images=xu)


def samples_to_tensors(samples: Sequence[LabeledSample]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack labeled samples without augmentation."""
    x, y = _stack(samples, None, None, with_masks=True)
    if x is None:
        raise InputError("no samples to stack")
    return x, y


# --------------------------------------------------------------------------
# Ratio re-partitioning
# --------------------------------------------------------------------------

def repartition_target(datasets: DomainDatasets, ratio: float, seed: int) -> DomainDatasets:
    """Re-split target training images into T_L/T_U with ``ratio`` labeled.

    When nothing is left unlabeled, the labeled images (without masks) serve
    as the unlabeled pool.
    """
    if not 0.0 < ratio <= 1.0:
        raise ConfigurationError(f"ratio must be in (0, 1], got {ratio}")
    if len(datasets.target_unlabeled_reference) != len(datasets.target_unlabeled):
        raise ConfigurationError("re-partitioning needs masks for every target training image")

    pool = list(datasets.target_labeled) + list(datasets.target_unlabeled_reference)
    n_labeled = int(math.floor(ratio * len(pool) + 0.5))
    if n_labeled == 0:
        raise ConfigurationError(
            f"ratio {ratio} of {len(pool)} target images gives no labeled image")

    order = np.random.default_rng(seed).permutation(len(pool))
    labeled = [pool[int(i)] for i in order[:n_labeled]]
    reference = [pool[int(i)] for i in order[n_labeled:]]
    unlabeled_source = reference or labeled
    unlabeled = [UnlabeledSample(image=s.image, id=s.id) for s in unlabeled_source]
    return datasets.model_copy(update={
        "target_labeled": labeled,
        "target_unlabeled": unlabeled,
        "target_unlabeled_reference": list(unlabeled_source),
    })


# --------------------------------------------------------------------------
# Directory export / ingestion
# --------------------------------------------------------------------------

def _to_png(image: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(image, 0, 1) * 255.0).astype(np.uint8))


def export_datasets(datasets: DomainDatasets, root: str) -> Dict[str, int]:
    """Write ``<root>/<domain>/{images,masks}/<id>.png`` plus ``splits.yaml``.

    Masks of unlabeled target images go to ``target/withheld_masks``.
    """
    root_path = Path(root)
    split_ids: Dict[str, List[str]] = {}
    for split in SPLIT_NAMES:
        samples = getattr(datasets, split)
        domain_dir = root_path / ("source" if split == "source_labeled" else "target")
        (domain_dir / "images").mkdir(parents=True, exist_ok=True)
        split_ids[split] = [s.id for s in samples]
        for sample in samples:
            _to_png(sample.image).save(domain_dir / "images" / f"{sample.id}.png")
            if isinstance(sample, LabeledSample):
                (domain_dir / "masks").mkdir(parents=True, exist_ok=True)
                Image.fromarray(sample.mask.astype(np.uint8)).save(
                    domain_dir / "masks" / f"{sample.id}.png")

    if datasets.target_unlabeled_reference:
        withheld = root_path / "target" / "withheld_masks"
        withheld.mkdir(parents=True, exist_ok=True)
        for sample in datasets.target_unlabeled_reference:
            Image.fromarray(sample.mask.astype(np.uint8)).save(withheld / f"{sample.id}.png")

    meta = {"splits": split_ids, "n_classes": datasets.n_classes, "spacing": datasets.spacing}
    with open(root_path / "splits.yaml", "w") as f:
        yaml.safe_dump(meta, f, sort_keys=True)
    return datasets.counts()


def _read_image(path: Path, green_channel: bool) -> np.ndarray:
    with Image.open(path) as img:
        array = np.asarray(img)
        if array.ndim == 3:
            if green_channel:
                array = array[..., 1]
            else:
                array = np.asarray(img.convert("L"))
    return array


def _read_mask(path: Path, size: Tuple[int, int]) -> np.ndarray:
    with Image.open(path) as img:
        mask = np.asarray(img.convert("L"))
    if mask.shape != size:
        mask = cv2.resize(mask, (size[1], size[0]), interpolation=cv2.INTER_NEAREST)
    return mask.astype(np.int64)


def ingest_directory(root: str, config: DataConfig, n_classes: int) -> DomainDatasets:
    """Load a dataset laid out as written by :func:`export_datasets`.

    Without ``splits.yaml``, masked source images form S_L, masked target
    images are split into T_L/validation/test by ``config.split_fractions``
    and unmasked target images form T_U.
    """
    root_path = Path(root)
    if not root_path.is_dir():
        raise ConfigurationError(f"dataset directory {root} does not exist")
    size = _pair(config.image_size)
    pp = config.preprocess

    def load(domain_name: str, sample_id: str, domain: DomainId, labeled: bool):
        domain_dir = root_path / domain_name
        raw = _read_image(domain_dir / "images" / f"{sample_id}.png", config.green_channel)
        image = preprocess(raw, pp.clahe, pp.gamma, size, pp.clahe_clip, pp.clahe_tiles)
        if not labeled:
            return UnlabeledSample(image=image, id=sample_id)
        mask = _read_mask(domain_dir / "masks" / f"{sample_id}.png", size)
        if mask.max() >= n_classes:
            raise InputError(f"mask {sample_id} has class {mask.max()} >= {n_classes}")
        return LabeledSample(image=image, mask=mask, domain=domain, id=sample_id)

    def ids_in(directory: Path) -> List[str]:
        return sorted(p.stem for p in directory.glob("*.png")) if directory.is_dir() else []

    splits_file = root_path / "splits.yaml"
    if splits_file.exists():
        with open(splits_file, "r") as f:
            meta = yaml.safe_load(f) or {}
        split_ids = meta.get("splits", {})
    else:
        source_ids = ids_in(root_path / "source" / "masks")
        target_images = ids_in(root_path / "target" / "images")
        target_masked = set(ids_in(root_path / "target" / "masks"))
        masked = [i for i in target_images if i in target_masked]
        order = np.random.default_rng(config.seed).permutation(len(masked))
        shuffled = [masked[int(i)] for i in order]
        n_val = int(round(config.split_fractions.get("validation", 0.1) * len(shuffled)))
        n_test = int(round(config.split_fractions.get("test", 0.2) * len(shuffled)))
        split_ids = {
            "source_labeled": source_ids,
            "validation": shuffled[:n_val],
            "test": shuffled[n_val:n_val + n_test],
            "target_labeled": shuffled[n_val + n_test:],
            "target_unlabeled": [i for i in target_images if i not in target_masked],
        }

    source_labeled = [load("source", i, DomainId.SOURCE, True)
                      for i in split_ids.get("source_labeled", [])]
    target_labeled = [load("target", i, DomainId.TARGET, True)
                      for i in split_ids.get("target_labeled", [])]
    target_unlabeled = [load("target", i, DomainId.TARGET, False)
                        for i in split_ids.get("target_unlabeled", [])]
    validation = [load("target", i, DomainId.TARGET, True) for i in split_ids.get("validation", [])]
    test = [load("target", i, DomainId.TARGET, True) for i in split_ids.get("test", [])]

    reference = []
    withheld = root_path / "target" / "withheld_masks"
    if withheld.is_dir():
        for sample in target_unlabeled:
            path = withheld / f"{sample.id}.png"
            if path.exists():
                reference.append(LabeledSample(image=sample.image, mask=_read_mask(path, size),
                                               domain=DomainId.TARGET, id=sample.id))

    logger.info("Ingested %s: %d S_L, %d T_L, %d T_U, %d validation, %d test", root,
                len(source_labeled), len(target_labeled), len(target_unlabeled),
                len(validation), len(test))
    return DomainDatasets(
        source_labeled=source_labeled,
        target_labeled=target_labeled,
        target_unlabeled=target_unlabeled,
        validation=validation,
        test=test,
        target_unlabeled_reference=reference if len(reference) == len(target_unlabeled) else [],
        n_classes=n_classes,
        spacing=config.spacing,
    )


def load_datasets(config: DataConfig, n_classes: Optional[int] = None) -> DomainDatasets:
    """Ingest ``config.root`` when set, otherwise generate synthetic data;
    every image then goes through :func:`preprocess`."""
    if config.root:
        return ingest_directory(config.root, config, n_classes or N_CLASSES[config.kind])

    datasets = generate_synthetic_domains(config.kind, config.style.source, config.style.target,
                                          config.counts, config.seed, config.image_size)
    pp = config.preprocess

    def prep(image: np.ndarray) -> np.ndarray:
        return preprocess(image, pp.clahe, pp.gamma, None, pp.clahe_clip, pp.clahe_tiles)

    def relabel(samples: List[LabeledSample]) -> List[LabeledSample]:
        return [s.model_copy(update={"image": prep(s.image)}) for s in samples]

    reference = relabel(datasets.target_unlabeled_reference)
    return datasets.model_copy(update={
        "source_labeled": relabel(datasets.source_labeled),
        "target_labeled": relabel(datasets.target_labeled),
        "target_unlabeled": [UnlabeledSample(image=s.image, id=s.id) for s in reference],
        "validation": relabel(datasets.validation),
        "test": relabel(datasets.test),
        "target_unlabeled_reference": reference,
        "spacing": config.spacing,
    })


# --------------------------------------------------------------------------
# Fingerprints
# --------------------------------------------------------------------------

def datasets_fingerprint(samples: Sequence[Union[LabeledSample, UnlabeledSample]]) -> str:
    """SHA-256 over ids, images and masks of in-memory samples."""
    digest = hashlib.sha256()
    for sample in samples:
        digest.update(sample.id.encode())
        digest.update(np.ascontiguousarray(sample.image, dtype=np.float32).tobytes())
        mask = getattr(sample, "mask", None)
        if mask is not None:
            digest.update(np.ascontiguousarray(mask, dtype=np.int64).tobytes())
    return digest.hexdigest()


def dataset_hash(root: str) -> str:
    """SHA-256 over relative paths and bytes of every file under ``root``."""
    root_path = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root_path.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root_path)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
