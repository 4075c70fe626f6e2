"""Integer rectangles inside an image."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import InputError


@dataclass(frozen=True, order=True)
class Region:
    row: int
    col: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InputError(f"region must be at least 1x1, got {self.height}x{self.width}")
        if self.row < 0 or self.col < 0:
            raise InputError(f"region origin must be non-negative, got ({self.row},{self.col})")

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def bottom(self) -> int:
        return self.row + self.height

    @property
    def right(self) -> int:
        return self.col + self.width

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row, self.bottom), slice(self.col, self.right)

    def fits(self, height: int, width: int) -> bool:
        return self.bottom <= height and self.right <= width

    def check_fits(self, height: int, width: int) -> None:
        if not self.fits(height, width):
            raise InputError(f"region {self.to_list()} exceeds image bounds {height}x{width}")

    def intersection(self, other: "Region") -> int:
        h = min(self.bottom, other.bottom) - max(self.row, other.row)
        w = min(self.right, other.right) - max(self.col, other.col)
        return max(h, 0) * max(w, 0)

    def iou(self, other: "Region") -> float:
        inter = self.intersection(other)
        return inter / (self.area + other.area - inter)

    def contains_point(self, r: int, c: int) -> bool:
        return self.row <= r < self.bottom and self.col <= c < self.right

    def to_list(self) -> list[int]:
        return [self.row, self.col, self.height, self.width]

    @classmethod
    def from_list(cls, values) -> "Region":
        r, c, h, w = (int(v) for v in values)
        return cls(r, c, h, w)

    @classmethod
    def full(cls, height: int, width: int) -> "Region":
        return cls(0, 0, height, width)
