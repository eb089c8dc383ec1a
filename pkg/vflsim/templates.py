"""Class templates for the synthetic grid images.

Each class is a pair of line-drawn shapes, one per image half, rendered on a
monochrome in-memory LED matrix so every pixel is either lit or dark.
"""

from typing import Callable, Dict, List, Protocol, Tuple

import numpy as np
from luma.core.device import dummy
from luma.core.render import canvas

from .errors import DataError

Point = Tuple[int, int]
Line = Tuple[Point, Point]


class GridCanvas(Protocol):
    """Protocol for anything templates can be drawn on."""
    def draw_lines(self, lines: List[Line]) -> None: ...
    def snapshot(self) -> np.ndarray: ...


class MatrixCanvas(GridCanvas):
    """An in-memory monochrome matrix backed by a luma dummy device."""
    def __init__(self, width: int, height: int) -> None:
        self.device = dummy(width=width, height=height, mode="1")

    def draw_lines(self, lines: List[Line]) -> None:
        # one canvas per frame: luma starts every canvas from a blank image
        with canvas(self.device) as draw:
            for start, end in lines:
                draw.line([start, end], fill="white")

    def snapshot(self) -> np.ndarray:
        """Lit pixels as 1.0, dark as 0.0, shaped (height, width)."""
        return np.asarray(self.device.image, dtype=np.float64)


# Shape helpers: each fills the box with corners (x0, y0) and (x1, y1).
def box(x0: int, y0: int, x1: int, y1: int) -> List[Line]:
    return [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))]


def cross(x0: int, y0: int, x1: int, y1: int) -> List[Line]:
    return [((x0, y0), (x1, y1)), ((x1, y0), (x0, y1))]


def plus(x0: int, y0: int, x1: int, y1: int) -> List[Line]:
    mx, my = (x0 + x1) // 2, (y0 + y1) // 2
    return [((mx, y0), (mx, y1)), ((x0, my), (x1, my))]


def hbars(x0: int, y0: int, x1: int, y1: int) -> List[Line]:
    return [((x0, y0), (x1, y0)), ((x0, y1), (x1, y1))]


def vbars(x0: int, y0: int, x1: int, y1: int) -> List[Line]:
    return [((x0, y0), (x0, y1)), ((x1, y0), (x1, y1))]


def wedge(x0: int, y0: int, x1: int, y1: int) -> List[Line]:
    mx = (x0 + x1) // 2
    return [((x0, y0), (mx, y1)), ((mx, y1), (x1, y0))]


SHAPES: Dict[str, Callable[[int, int, int, int], List[Line]]] = {
    "box": box,
    "cross": cross,
    "plus": plus,
    "hbars": hbars,
    "vbars": vbars,
    "wedge": wedge,
}


class ClassTemplates:
    """One fixed ``(height, width)`` template per class.

    Class ``c`` draws shape ``c`` in the left half and shape ``c + 1 + c // 6``
    (both modulo the six shapes) in the right half, so every half-image strip
    distinguishes the classes and no two classes share both shapes.
    """
    def __init__(self, num_classes: int, height: int, width: int) -> None:
        names = list(SHAPES)
        if num_classes > len(names) ** 2:
            raise DataError(f"At most {len(names) ** 2} grid classes are supported, got {num_classes}")
        if height < 6 or width < 6:
            raise DataError(f"Grid images need at least 6x6 pixels, got {height}x{width}")
        self.num_classes = num_classes
        self.height = height
        self.width = width

        # a one-pixel margin only where the half stays at least 3 pixels wide
        half = width // 2
        mx = 1 if min(half, width - half) >= 5 else 0
        my = 1 if height >= 8 else 0
        left_box = (mx, my, half - 1 - mx, height - 1 - my)
        right_box = (half + mx, my, width - 1 - mx, height - 1 - my)

        matrix = MatrixCanvas(width, height)
        templates = []
        self.shape_names: List[Tuple[str, str]] = []
        for c in range(num_classes):
            left = names[c % len(names)]
            right = names[(c + 1 + c // len(names)) % len(names)]
            matrix.draw_lines([*SHAPES[left](*left_box), *SHAPES[right](*right_box)])
            templates.append(matrix.snapshot())
            self.shape_names.append((left, right))
        self.templates = np.stack(templates)
        if len(np.unique(self.templates.reshape(num_classes, -1), axis=0)) < num_classes:
            raise DataError(f"A {height}x{width} grid is too small to keep {num_classes} class templates apart")

    def flat(self) -> np.ndarray:
        """Templates flattened column-major, shaped (num_classes, height * width)."""
        return np.stack([t.ravel(order="F") for t in self.templates])
