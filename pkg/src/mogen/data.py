"""MoCA-mini: procedural multi-object scenes with text, structure, object and box
annotations, the training augmentations, and on-disk persistence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import NormBox, iou

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
GRAY = 128 / 255
PLURAL = {"circle": "circles", "square": "squares", "triangle": "triangles"}


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class MocaConfig:
    image_size: int = 32
    min_objects: int = 1
    max_objects: int = 6
    min_size: int = 6
    max_size: int = 10
    gap: int = 1
    max_attempts: int = 200

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 3 <= self.min_size <= self.max_size < self.image_size:
            raise ValueError("object sizes must satisfy 3 <= min_size <= max_size < image_size")


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    box: NormBox


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    canvas: int = 32
    seed: int | None = None

    @property
    def count(self) -> int:
        return len(self.objects)

    def to_dict(self):
        return {"canvas": self.canvas, "seed": self.seed,
                "objects": [{"shape": o.shape, "color": o.color, "box": list(o.box)}
                            for o in self.objects]}

    @classmethod
    def from_dict(cls, d):
        objs = tuple(SceneObject(o["shape"], o["color"], NormBox(*o["box"])) for o in d["objects"])
        return cls(objs, d["canvas"], d.get("seed"))


@dataclass
class AnnotationBundle:
    text: str
    structure_ref: np.ndarray
    object_refs: list = field(default_factory=list)
    boxes: list = field(default_factory=list)


@dataclass
class MocaItem:
    spec: SceneSpec
    image: np.ndarray
    annotation: AnnotationBundle


# -- rasterization -----------------------------------------------------------------

def shape_mask(shape: str, side: int) -> np.ndarray:
    """Boolean side x side footprint; every row is one contiguous centered run,
    so the footprint is 4-connected."""
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    if shape == "circle":
        r = side / 2
        return (yy - r) ** 2 + (xx - r) ** 2 <= r * r
    if shape == "triangle":
        m = np.zeros((side, side), dtype=bool)
        for row in range(side):
            half = (row + 1) / side * side / 2
            lo = max(0, int(math.floor(side / 2 - half + 0.5)))
            hi = min(side, int(math.ceil(side / 2 + half - 0.5)))
            m[row, lo:max(hi, lo + 1)] = True
        return m
    raise ValueError(f"unknown shape {shape!r}")


def _tight(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _canonical_key(obj: SceneObject):
    return (COLORS.index(obj.color), SHAPES.index(obj.shape), obj.box.y0, obj.box.x0)


def gen_scene(rng, config: MocaConfig = MocaConfig(), seed=None) -> SceneSpec:
    """Random non-touching objects, sorted into canonical (color, shape, position) order.

    Placement is rejection-sampled; an object that cannot be placed within
    ``max_attempts`` tries ends placement early, lowering the count.
    """
    size = config.image_size
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    placed = []  # pixel boxes (c0, r0, c1, r1) of footprints
    objs = []
    for _ in range(n):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        side = int(rng.integers(config.min_size, config.max_size + 1))
        for _attempt in range(config.max_attempts):
            c0 = int(rng.integers(0, size - side + 1))
            r0 = int(rng.integers(0, size - side + 1))
            cand = (c0, r0, c0 + side, r0 + side)
            g = config.gap
            if all(cand[2] + g <= p[0] or p[2] + g <= cand[0] or cand[3] + g <= p[1] or p[3] + g <= cand[1]
                   for p in placed):
                break
        else:
            break
        placed.append(cand)
        fp = shape_mask(shape, side)
        tc0, tr0, tc1, tr1 = _tight(fp)
        box = NormBox.from_pixels(c0 + tc0, r0 + tr0, c0 + tc1, r0 + tr1, size)
        objs.append((SceneObject(shape, color, box), cand))
    objs.sort(key=lambda oc: _canonical_key(oc[0]))
    return SceneSpec(tuple(o for o, _ in objs), size, seed)


def _footprint_mask(obj: SceneObject, size: int) -> np.ndarray:
    """Rasterize from the tight box: the footprint is re-derived from its side."""
    c0, r0, c1, r1 = obj.box.to_pixels(size)
    w, h = c1 - c0, r1 - r0
    side = max(w, h)
    fp = shape_mask(obj.shape, side)
    tc0, tr0, tc1, tr1 = _tight(fp)
    m = np.zeros((size, size), dtype=bool)
    m[r0:r1, c0:c1] = fp[tr0:tr1, tc0:tc1]
    return m


def object_masks(spec: SceneSpec):
    return [_footprint_mask(o, spec.canvas) for o in spec.objects]


def render(spec: SceneSpec) -> np.ndarray:
    """White canvas with palette-exact, aliasing-free shapes; [H, W, 3] float in [0, 1]."""
    img = np.ones((spec.canvas, spec.canvas, 3))
    for obj, m in zip(spec.objects, object_masks(spec)):
        img[m] = PALETTE[obj.color]
    return img


# -- annotation ----------------------------------------------------------------------

def describe(spec: SceneSpec) -> str:
    groups = {}
    for o in spec.objects:
        groups[(o.color, o.shape)] = groups.get((o.color, o.shape), 0) + 1
    keys = sorted(groups, key=lambda k: (COLORS.index(k[0]), SHAPES.index(k[1])))
    phrases = [f"{groups[k]} {k[0]} {k[1] if groups[k] == 1 else PLURAL[k[1]]}" for k in keys]
    if not phrases:
        return "a scene with nothing"
    body = phrases[0] if len(phrases) == 1 else ", ".join(phrases[:-1]) + " and " + phrases[-1]
    return f"a scene with {body}"


def resize_nearest(img, size):
    h, w = img.shape[:2]
    rows = (np.arange(size) * h // size).clip(0, h - 1)
    cols = (np.arange(size) * w // size).clip(0, w - 1)
    return img[rows][:, cols]


def object_reference(image, mask, size):
    c0, r0, c1, r1 = _tight(mask)
    crop = np.where(mask[r0:r1, c0:c1, None], image[r0:r1, c0:c1], GRAY)
    return resize_nearest(crop, size)


def annotate(spec: SceneSpec, rendered: np.ndarray) -> AnnotationBundle:
    masks = object_masks(spec)
    union = np.zeros((spec.canvas, spec.canvas), dtype=bool)
    for m in masks:
        union |= m
    structure = np.repeat(union[..., None], 3, axis=2).astype(np.float64)
    refs = [object_reference(rendered, m, spec.canvas) for m in masks]
    boxes = [NormBox.from_pixels(*_tight(m), spec.canvas) for m in masks]
    return AnnotationBundle(describe(spec), structure, refs, boxes)


def make_item(rng, config: MocaConfig, seed=None) -> MocaItem:
    spec = gen_scene(rng, config, seed)
    img = render(spec)
    return MocaItem(spec, img, annotate(spec, img))


def generate_dataset(n: int, seed: int, config: MocaConfig = MocaConfig()):
    """Item i depends only on (seed, i, config)."""
    return [make_item(np.random.default_rng([seed, i]), config, seed=seed * 1_000_003 + i)
            for i in range(n)]


# -- augmentation ----------------------------------------------------------------------

def jitter_box(box: NormBox, rng, max_shift=0.15, min_iou=0.6, attempts=20) -> NormBox:
    w, h = box.x1 - box.x0, box.y1 - box.y0
    for _ in range(attempts):
        d = rng.uniform(-max_shift, max_shift, size=4) * np.array([w, h, w, h])
        x0, y0, x1, y1 = np.clip(np.array(box) + d, 0.0, 1.0)
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            continue
        cand = NormBox(float(x0), float(y0), float(x1), float(y1))
        if iou(cand, box) >= min_iou:
            return cand
    return box


def random_crop(img, rng, max_removed=0.15):
    """Crop away at most ``max_removed`` of the area, then resize back.

    Returns the resized crop and the removed-area fraction.
    """
    h, w = img.shape[:2]
    keep = rng.uniform(1.0 - max_removed, 1.0)
    a = rng.uniform(keep, 1.0)
    cw = min(w, math.ceil(a * w))
    ch = min(h, math.ceil(keep / (cw / w) * h))
    while cw * ch < (1.0 - max_removed) * w * h:
        ch = min(h, ch + 1)
        if ch == h and cw * ch < (1.0 - max_removed) * w * h:
            cw += 1
    x = int(rng.integers(0, w - cw + 1))
    y = int(rng.integers(0, h - ch + 1))
    removed = 1.0 - (cw * ch) / (w * h)
    return resize_nearest(img[y:y + ch, x:x + cw], h), removed


def local_distortion(img, rng, region=None):
    """Blur or pixel-shuffle one random square region."""
    h, w = img.shape[:2]
    region = region or max(2, h // 4)
    y = int(rng.integers(0, h - region + 1))
    x = int(rng.integers(0, w - region + 1))
    out = img.copy()
    patch = out[y:y + region, x:x + region]
    if rng.random() < 0.5:
        padded = np.pad(patch, ((1, 1), (1, 1), (0, 0)), mode="edge")
        blurred = sum(padded[dy:dy + region, dx:dx + region] for dy in range(3) for dx in range(3)) / 9.0
        out[y:y + region, x:x + region] = blurred
    else:
        flat = patch.reshape(-1, patch.shape[-1])
        out[y:y + region, x:x + region] = flat[rng.permutation(len(flat))].reshape(patch.shape)
    return out


def augment(bundle: AnnotationBundle, rendered, rng):
    boxes = [jitter_box(b, rng) for b in bundle.boxes]
    image = local_distortion(rendered, rng)
    refs = [random_crop(r, rng)[0] for r in bundle.object_refs]
    return AnnotationBundle(bundle.text, bundle.structure_ref, refs, boxes), image


# -- persistence ---------------------------------------------------------------------------

def write_ppm(path, img):
    img = np.asarray(img)
    arr = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing image file: {path}")
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"truncated PPM header in {path}")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise DatasetError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1: pos + 1 + w * h * 3]
    if len(data) != w * h * 3:
        raise DatasetError(f"{path}: pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3) / 255.0


def save_dataset(items, root) -> Path:
    root = Path(root)
    for sub in ("img", "struct", "obj"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, item in enumerate(items):
        stem = f"{i:06d}"
        rec = {
            "id": i,
            "text": item.annotation.text,
            "boxes": [list(b) for b in item.annotation.boxes],
            "image": f"img/{stem}.ppm",
            "structure": f"struct/{stem}.ppm",
            "objects": [f"obj/{stem}_{k}.ppm" for k in range(len(item.annotation.object_refs))],
            "spec": item.spec.to_dict(),
        }
        write_ppm(root / rec["image"], item.image)
        write_ppm(root / rec["structure"], item.annotation.structure_ref)
        for rel, ref in zip(rec["objects"], item.annotation.object_refs):
            write_ppm(root / rel, ref)
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = root / "manifest.jsonl"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def load_dataset(root):
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"no manifest.jsonl in {root}")
    items = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            spec = SceneSpec.from_dict(rec["spec"])
            boxes = [NormBox(*b) for b in rec["boxes"]]
            text, img_rel, struct_rel, obj_rels = rec["text"], rec["image"], rec["structure"], rec["objects"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{manifest}: line {lineno}: {exc}") from exc
        ann = AnnotationBundle(text, read_ppm(root / struct_rel),
                               [read_ppm(root / r) for r in obj_rels], boxes)
        items.append(MocaItem(spec, read_ppm(root / img_rel), ann))
    return items
