"""Oracle object counter and the desk-scale evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .boxes import NormBox, iou
from .data import PALETTE

COLOR_TOL = 0.25
MIN_AREA = 4


@dataclass(frozen=True)
class Detection:
    color: str
    box: NormBox
    area: int
    pixel_box: tuple


def detect(image, tol=COLOR_TOL, min_area=MIN_AREA):
    """Palette-color thresholding followed by 4-connected components."""
    image = np.asarray(image, dtype=np.float64)
    size_h, size_w = image.shape[:2]
    found = []
    for name, rgb in PALETTE.items():
        mask = np.linalg.norm(image - np.asarray(rgb), axis=-1) < tol
        labels, n = ndimage.label(mask)
        if n == 0:
            continue
        areas = np.bincount(labels.ravel())[1:]
        for k, sl in enumerate(ndimage.find_objects(labels)):
            if areas[k] < min_area:
                continue
            r0, r1 = sl[0].start, sl[0].stop
            c0, c1 = sl[1].start, sl[1].stop
            box = NormBox(c0 / size_w, r0 / size_h, c1 / size_w, r1 / size_h)
            found.append(Detection(name, box, int(areas[k]), (c0, r0, c1, r1)))
    return found


def count_objects(image) -> int:
    return len(detect(image))


def numerical_accuracy(generated, specs) -> float:
    """Percentage of images whose oracle count equals the scene's object count."""
    if len(generated) != len(specs):
        raise ValueError(f"{len(generated)} images vs {len(specs)} specs")
    if not specs:
        return 0.0
    hits = sum(count_objects(img) == spec.count for img, spec in zip(generated, specs))
    return 100.0 * hits / len(specs)


def greedy_match(detected_boxes, target_boxes):
    """Pairs (target_idx, detected_idx, iou) chosen by descending IoU."""
    pairs = [(iou(t, d), ti, di) for ti, t in enumerate(target_boxes)
             for di, d in enumerate(detected_boxes)]
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    used_t, used_d, out = set(), set(), []
    for v, ti, di in pairs:
        if v <= 0 or ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        out.append((ti, di, v))
    return sorted(out)


@dataclass
class SpatialResult:
    score: float
    matches: list = field(default_factory=list)
    detections: list = field(default_factory=list)


def spatial_sim_item(image, target_boxes) -> SpatialResult:
    dets = detect(image)
    matches = greedy_match([d.box for d in dets], target_boxes)
    if not target_boxes:
        return SpatialResult(0.0, matches, dets)
    return SpatialResult(sum(v for _, _, v in matches) / len(target_boxes), matches, dets)


def spatial_sim(generated, target_boxes) -> float:
    """Mean IoU over all target boxes; unmatched targets count as 0."""
    total, n = 0.0, 0
    for img, boxes in zip(generated, target_boxes):
        res = spatial_sim_item(img, boxes)
        total += res.score * len(boxes)
        n += len(boxes)
    return total / n if n else 0.0


def color_histogram(img, bins=4):
    img = np.clip(np.asarray(img, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    idx = np.minimum((img * bins).astype(int), bins - 1)
    flat = idx[:, 0] * bins * bins + idx[:, 1] * bins + idx[:, 2]
    return np.bincount(flat, minlength=bins ** 3).astype(np.float64)


def histogram_cosine(a, b) -> float:
    ha, hb = color_histogram(a), color_histogram(b)
    na, nb = np.linalg.norm(ha), np.linalg.norm(hb)
    if na == 0 or nb == 0:
        return 0.0
    return float(ha @ hb / (na * nb))


def appearance_sim(generated, object_refs, matched_regions) -> float:
    """Mean histogram cosine between each object reference and its matched crop.

    ``matched_regions[i][k]`` is the pixel box (c0, r0, c1, r1) matched to
    reference k of item i, or None when unmatched (scored 0).
    """
    scores = []
    for img, refs, regions in zip(generated, object_refs, matched_regions):
        for ref, region in zip(refs, regions):
            if region is None:
                scores.append(0.0)
                continue
            c0, r0, c1, r1 = region
            scores.append(histogram_cosine(ref, np.asarray(img)[r0:r1, c0:c1]))
    return float(np.mean(scores)) if scores else 0.0


def matched_regions(image, target_boxes):
    res = spatial_sim_item(image, target_boxes)
    regions = [None] * len(target_boxes)
    for ti, di, _ in res.matches:
        regions[ti] = res.detections[di].pixel_box
    return regions


def img_sim(a, b) -> float:
    """1 - RMSE over [0, 1] pixels, clipped to [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("img_sim needs equal shapes")
    return float(np.clip(1.0 - np.sqrt(np.mean((a - b) ** 2)), 0.0, 1.0))


@dataclass
class MetricReport:
    numerical: float
    spatial_sim: float
    appearance_sim: float
    img_sim: float
    rows: list = field(default_factory=list)


def evaluate(generated, items) -> MetricReport:
    specs = [it.spec for it in items]
    boxes = [it.annotation.boxes for it in items]
    regions = [matched_regions(g, b) for g, b in zip(generated, boxes)]
    rows = []
    for i, (g, it) in enumerate(zip(generated, items)):
        sp = spatial_sim_item(g, it.annotation.boxes)
        rows.append({"item": i, "target_count": it.spec.count, "detected": len(sp.detections),
                     "spatial_sim": sp.score, "img_sim": img_sim(g, it.image)})
    return MetricReport(
        numerical=numerical_accuracy(generated, specs),
        spatial_sim=spatial_sim(generated, boxes),
        appearance_sim=appearance_sim(generated, [it.annotation.object_refs for it in items], regions),
        img_sim=float(np.mean([img_sim(g, it.image) for g, it in zip(generated, items)])) if items else 0.0,
        rows=rows,
    )
