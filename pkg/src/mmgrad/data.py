"""Synthetic shapes corpus with ground-truth saliency, and dataset files.

Each record pairs a reference image of 2-4 colored shapes with a target
image in which exactly one shape changed (color, kind, removed, or added),
a templated modifier text describing the change, a full-resolution binary
mask of the changed region, and a six-image subset of related candidates
(the target, the reference, and four images sharing a shape with the
target).

On disk a dataset is a directory with a line-delimited manifest plus
``images/`` (binary PPM) and ``saliency/`` (binary PGM) subdirectories.
Saliency is stored at image resolution and reduced to the model grid at use
time, so masks stay reusable across grid configurations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .keyphrases import extract_key_phrases
from .pnm import image_to_u8, read_pnm, u8_to_image, write_pgm, write_ppm

COLORS = {
    "red": (200, 40, 40),
    "green": (40, 170, 60),
    "blue": (50, 80, 200),
    "yellow": (220, 200, 40),
    "purple": (150, 60, 180),
}
KINDS = ("circle", "square", "triangle")
BACKGROUND = (160, 160, 160)

SUBSET_SIZE = 6


@dataclass
class DatasetRecord:
    record_id: str
    reference_image: str
    modifier_text: str
    target_id: str
    target_image: str
    subset: list[str]
    saliency: str

    @property
    def reference_id(self) -> str:
        return Path(self.reference_image).stem

    def validate(self):
        if len(self.subset) != SUBSET_SIZE:
            raise ValueError(
                f"record {self.record_id}: subset has {len(self.subset)} members, "
                f"expected {SUBSET_SIZE}"
            )
        if self.target_id not in self.subset:
            raise ValueError(f"record {self.record_id}: target not in subset")


@dataclass
class Dataset:
    records: list[DatasetRecord]
    images: dict[str, np.ndarray]     # id -> (H, W, 3) floats in [0, 1]
    saliency: dict[str, np.ndarray]   # record id -> (H, W) uint8 in {0, 1}

    def __len__(self):
        return len(self.records)

    def gallery_ids(self, records=None) -> list[str]:
        """Sorted ids of every image referenced by the given records."""
        records = self.records if records is None else records
        ids = set()
        for r in records:
            ids.add(r.target_id)
            ids.add(r.reference_id)
            ids.update(r.subset)
        return sorted(ids)

    def texts(self) -> list[str]:
        return [r.modifier_text for r in self.records]


# ---------------------------------------------------------------------------
# saliency aggregation


def downsample_area(mask: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Area-average a (H, W) raster onto an (m, n) grid."""
    mask = np.asarray(mask, dtype=np.float64)
    m, n = grid_shape
    h, w = mask.shape
    if h % m or w % n:
        raise ValueError(
            f"downsample_area: raster {mask.shape} not divisible by grid {grid_shape}"
        )
    return mask.reshape(m, h // m, n, w // n).mean(axis=(1, 3))


def aggregate_saliency(masks, threshold: float,
                       grid_shape: tuple[int, int]) -> np.ndarray:
    """Union the masks, area-average to the grid, binarize at the threshold.

    Aggregation is the pixel-wise maximum, so adding a mask never removes a
    cell.  Returns an (m, n) array with values in {0, 1}.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"aggregate_saliency: threshold {threshold} not in (0, 1)")
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    if not masks:
        raise ValueError("aggregate_saliency: no masks given")
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ValueError(
                f"aggregate_saliency: mask shapes {shape} and {m.shape} differ"
            )
    union = masks[0]
    for m in masks[1:]:
        union = np.maximum(union, m)
    cells = downsample_area(union, grid_shape)
    return (cells >= threshold).astype(np.float64)


def record_saliency(dataset: Dataset, record: DatasetRecord,
                    grid_shape: tuple[int, int],
                    threshold: float = 0.5) -> np.ndarray:
    """Grid-resolution ground-truth saliency for one record."""
    return aggregate_saliency(
        [dataset.saliency[record.record_id]], threshold, grid_shape
    )


def saliency_from_phrase_masks(text: str, phrase_masks: dict[str, np.ndarray],
                               threshold: float, grid_shape: tuple[int, int],
                               stopwords=None) -> np.ndarray:
    """Ground truth from externally precomputed per-phrase masks.

    Key phrases extracted from the modifier text select masks from the
    manifest; matched masks are aggregated.  With no match the result is the
    all-zero map, which downstream losses treat as the degenerate case.
    """
    phrases = [p for p, _ in extract_key_phrases(text, stopwords)]
    selected = [phrase_masks[p] for p in phrases if p in phrase_masks]
    if not selected:
        some = next(iter(phrase_masks.values()), None)
        if some is None:
            raise ValueError("saliency_from_phrase_masks: empty mask manifest")
        return np.zeros(grid_shape)
    return aggregate_saliency(selected, threshold, grid_shape)


def load_phrase_masks(manifest: dict[str, str], base_dir) -> dict[str, np.ndarray]:
    """Read a {phrase: raster path} manifest into binary masks."""
    base = Path(base_dir)
    out = {}
    for phrase, rel in manifest.items():
        raw = read_pnm(base / rel)
        if raw.ndim != 2:
            raise ValueError(f"phrase mask {rel!r} is not a graymap")
        out[phrase] = (raw > 127).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(kind: str, cx: int, cy: int, half: int,
                size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    if kind == "triangle":
        return (
            (yy >= cy - half)
            & (yy <= cy + half)
            & (np.abs(xx - cx) <= (yy - (cy - half)) / 2.0)
        )
    raise ValueError(f"unknown shape kind {kind!r}")


def _render(shapes, size: int) -> np.ndarray:
    img = np.empty((size, size, 3))
    img[:] = np.array(BACKGROUND) / 255.0
    for kind, color, cx, cy, half in shapes:
        mask = _shape_mask(kind, cx, cy, half, size)
        img[mask] = np.array(COLORS[color]) / 255.0
    return img


def _place_cells(rng, count: int, grid: int) -> list[tuple[int, int]] | None:
    """Pick grid cells pairwise at least two apart (Chebyshev) so shapes
    never overlap; None when the random order dead-ends."""
    order = rng.permutation(grid * grid)
    picked: list[tuple[int, int]] = []
    for flat in order:
        r, c = divmod(int(flat), grid)
        if all(max(abs(r - pr), abs(c - pc)) >= 2 for pr, pc in picked):
            picked.append((r, c))
        if len(picked) == count:
            return picked
    return None


def _modifier_text(change: str, old, new) -> str:
    kind, color = old
    if change == "color":
        return f"change {color} {kind} to {new[1]} {kind}"
    if change == "shape":
        return f"change {color} {kind} to {color} {new[0]}"
    if change == "remove":
        return f"remove the {color} {kind}"
    return f"add a {color} {kind}"


def generate_synthetic(seed: int, count: int, image_size: int = 32,
                       grid_shape: tuple[int, int] = (4, 4)) -> Dataset:
    """Deterministic corpus of shape-change records (see module docstring).

    Every record's grid-level saliency is nonempty and covers at most half
    the cells; the changed shape sits near a cell center to guarantee it.
    """
    if count < 12:
        raise ValueError(f"generate_synthetic: need count >= 12, got {count}")
    if grid_shape[0] != grid_shape[1]:
        raise ValueError("generate_synthetic: grid must be square")
    if image_size % grid_shape[0]:
        raise ValueError("generate_synthetic: image size not divisible by grid")
    lattice = grid_shape[0]
    cell = image_size // lattice
    if cell < 8:
        raise ValueError(
            f"generate_synthetic: grid cells of {cell}px are too small for the "
            f"shape sizes; need at least 8px"
        )
    rng = np.random.default_rng(seed)

    color_names = sorted(COLORS)
    records: list[DatasetRecord] = []
    images: dict[str, np.ndarray] = {}
    saliency: dict[str, np.ndarray] = {}
    target_shapes: dict[str, set] = {}

    for i in range(count):
        rid = f"r{i:05d}"
        for _attempt in range(64):
            n_ref = int(rng.integers(2, 5))
            changes = ["color", "shape", "remove"]
            if n_ref <= 3:
                changes.append("add")
            change = changes[int(rng.integers(len(changes)))]
            n_total = n_ref + 1 if change == "add" else n_ref

            cells = _place_cells(rng, n_total, lattice)
            if cells is None:
                continue
            combos = rng.permutation(
                [(k, c) for k in KINDS for c in color_names]
            )[:n_total]
            shapes = []
            for (kind, color), (r, c) in zip(combos, cells):
                jitter = rng.integers(-1, 2, size=2)
                cx = c * cell + cell // 2 + int(jitter[0])
                cy = r * cell + cell // 2 + int(jitter[1])
                half = int(rng.integers(5, 7))
                shapes.append((str(kind), str(color), cx, cy, half))

            changed = shapes[0]
            kind, color, cx, cy, half = changed
            others = {(k, c) for k, c, *_ in shapes[1:]}
            if change == "color":
                choices = [c for c in color_names
                           if c != color and (kind, c) not in others]
                if not choices:
                    continue
                new = (kind, choices[int(rng.integers(len(choices)))])
                new_shape = (new[0], new[1], cx, cy, half)
                ref_shapes, tgt_shapes = shapes, [new_shape] + shapes[1:]
            elif change == "shape":
                choices = [k for k in KINDS
                           if k != kind and (k, color) not in others]
                if not choices:
                    continue
                new = (choices[int(rng.integers(len(choices)))], color)
                new_shape = (new[0], new[1], cx, cy, half)
                ref_shapes, tgt_shapes = shapes, [new_shape] + shapes[1:]
            elif change == "remove":
                new = (kind, color)
                new_shape = None
                ref_shapes, tgt_shapes = shapes, shapes[1:]
            else:  # add
                new = (kind, color)
                new_shape = changed
                ref_shapes, tgt_shapes = shapes[1:], shapes

            region = _shape_mask(kind, cx, cy, half, image_size)
            if new_shape is not None and new_shape != changed:
                region = region | _shape_mask(
                    new_shape[0], new_shape[2], new_shape[3], new_shape[4],
                    image_size,
                )
            grid_mask = aggregate_saliency([region.astype(float)], 0.5, grid_shape)
            covered = grid_mask.sum()
            if covered < 1 or covered > grid_mask.size / 2:
                continue

            ref_id, tgt_id = f"{rid}_ref", f"{rid}_tgt"
            images[ref_id] = _render(ref_shapes, image_size)
            images[tgt_id] = _render(tgt_shapes, image_size)
            saliency[rid] = region.astype(np.uint8)
            target_shapes[tgt_id] = {(k, c) for k, c, *_ in tgt_shapes}
            records.append(
                DatasetRecord(
                    record_id=rid,
                    reference_image=f"images/{ref_id}.ppm",
                    modifier_text=_modifier_text(change, (kind, color), new),
                    target_id=tgt_id,
                    target_image=f"images/{tgt_id}.ppm",
                    subset=[],  # filled below once all targets exist
                    saliency=f"saliency/{rid}.pgm",
                )
            )
            break
        else:
            raise RuntimeError(f"generate_synthetic: could not place record {rid}")

    # subsets: target + reference + four other targets sharing a shape
    all_targets = [r.target_id for r in records]
    for r in records:
        own = target_shapes[r.target_id]
        sharing = [
            t for t in all_targets
            if t != r.target_id and target_shapes[t] & own
        ]
        rest = [t for t in all_targets if t != r.target_id and t not in sharing]
        pool = sharing if len(sharing) >= 4 else sharing + rest
        pick = [pool[j] for j in rng.choice(len(pool), size=4, replace=False)]
        r.subset = [r.target_id, r.reference_id] + pick
        r.validate()

    return Dataset(records, images, saliency)


# ---------------------------------------------------------------------------
# files


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest + rasters; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "saliency").mkdir(parents=True, exist_ok=True)
    for image_id, img in dataset.images.items():
        write_ppm(out / "images" / f"{image_id}.ppm", image_to_u8(img))
    for record_id, mask in dataset.saliency.items():
        write_pgm(out / "saliency" / f"{record_id}.pgm",
                  (mask * 255).astype(np.uint8))
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for r in dataset.records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return manifest


_REQUIRED_FIELDS = (
    "record_id", "reference_image", "modifier_text", "target_id",
    "target_image", "subset", "saliency",
)


def load_dataset(manifest_path) -> Dataset:
    """Read a dataset directory back into memory; the round-trip with
    :func:`write_dataset` is lossless."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.jsonl"
    root = manifest_path.parent
    records: list[DatasetRecord] = []
    images: dict[str, np.ndarray] = {}
    saliency: dict[str, np.ndarray] = {}
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(
                    f"{manifest_path}:{lineno}: malformed record: {exc}"
                ) from None
            missing = [f for f in _REQUIRED_FIELDS if f not in raw]
            if missing:
                raise ValueError(
                    f"{manifest_path}:{lineno}: missing fields {missing}"
                )
            record = DatasetRecord(**{f: raw[f] for f in _REQUIRED_FIELDS})
            try:
                record.validate()
            except ValueError as exc:
                raise ValueError(f"{manifest_path}:{lineno}: {exc}") from None
            for image_field in (record.reference_image, record.target_image):
                image_id = Path(image_field).stem
                if image_id not in images:
                    path = root / image_field
                    if not path.exists():
                        raise ValueError(
                            f"{manifest_path}:{lineno}: record "
                            f"{record.record_id}: missing image {image_field}"
                        )
                    images[image_id] = u8_to_image(read_pnm(path))
            sal_path = root / record.saliency
            if not sal_path.exists():
                raise ValueError(
                    f"{manifest_path}:{lineno}: record {record.record_id}: "
                    f"missing saliency file {record.saliency}"
                )
            saliency[record.record_id] = (read_pnm(sal_path) > 127).astype(np.uint8)
            records.append(record)
    dataset = Dataset(records, images, saliency)
    for r in records:
        for member in r.subset:
            if member not in dataset.images:
                raise ValueError(
                    f"record {r.record_id}: subset member {member} has no image"
                )
    return dataset
