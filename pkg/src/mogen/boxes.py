from __future__ import annotations

from typing import NamedTuple


class NormBox(NamedTuple):
    """Axis-aligned box in normalized [0, 1] image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def validate(self) -> "NormBox":
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise ValueError(f"invalid box {tuple(self)}: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")
        return self

    def to_pixels(self, size: int):
        """Inclusive-exclusive pixel bounds (c0, r0, c1, r1)."""
        return (round(self.x0 * size), round(self.y0 * size),
                round(self.x1 * size), round(self.y1 * size))

    @classmethod
    def from_pixels(cls, c0, r0, c1, r1, size):
        return cls(c0 / size, r0 / size, c1 / size, r1 / size)


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def parse_boxes(text: str):
    """Parse ``"x0,y0,x1,y1;x0,y0,x1,y1"`` into validated boxes."""
    boxes = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        parts = [float(v) for v in chunk.split(",")]
        if len(parts) != 4:
            raise ValueError(f"box {chunk!r} needs 4 comma-separated numbers")
        boxes.append(NormBox(*parts).validate())
    return boxes
