"""Backdoor triggers: patterns, placement and application.

Grid slices are stored column-major (see :class:`~vflsim.sim_types.FeatureShard`),
so pixel ``(row, col)`` of an ``h``-high strip lives at feature ``col * h + row``.
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .sim_types import FillPattern, TriggerMode, Window


@dataclass(frozen=True)
class TriggerSpec:
    """A fixed trigger: a grid patch of ``height x width`` or a tabular overwrite.

    ``phase`` is the column offset of this patch inside the undivided trigger,
    which keeps checkerboard sub-triggers in step with the whole.
    """
    mode: TriggerMode
    height: int = 0
    width: int = 0
    pattern: FillPattern = FillPattern.CONSTANT
    fill: float = 1.0
    alt_fill: float = 0.0
    phase: int = 0
    indices: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.height < 0 or self.width < 0:
            raise ShapeError(f"Trigger size must be non-negative, got {self.height}x{self.width}")
        if any(i < 0 for i in self.indices) or len(set(self.indices)) != len(self.indices):
            raise ShapeError(f"Trigger feature indices must be unique and non-negative, got {self.indices}")
        object.__setattr__(self, "indices", tuple(sorted(int(i) for i in self.indices)))

    @classmethod
    def grid(
        cls,
        height: int,
        width: int,
        fill: float = 1.0,
        pattern: FillPattern = FillPattern.CONSTANT,
        alt_fill: float = 0.0
    ) -> "TriggerSpec":
        return cls(TriggerMode.GRID_PATCH, height=height, width=width, pattern=pattern, fill=fill, alt_fill=alt_fill)

    @classmethod
    def tabular(cls, indices: Sequence[int], fill: float) -> "TriggerSpec":
        return cls(TriggerMode.TABULAR_OVERWRITE, indices=tuple(indices), fill=fill)

    @property
    def is_grid(self) -> bool:
        return self.mode is TriggerMode.GRID_PATCH

    def patch(self) -> np.ndarray:
        """The ``height x width`` block of values written inside the window."""
        if self.pattern is FillPattern.CONSTANT:
            return np.full((self.height, self.width), float(self.fill))
        rows, cols = np.indices((self.height, self.width))
        return np.where((rows + cols + self.phase) % 2 == 0, float(self.fill), float(self.alt_fill))

    def at(self, row: int, col: int) -> Window:
        return Window(row, col, self.height, self.width)


def to_grid(values: np.ndarray, grid_shape: Tuple[int, int]) -> np.ndarray:
    """View a column-major flat slice as an ``(h, w)`` grid."""
    h, w = grid_shape
    values = np.asarray(values)
    if values.shape[-1] != h * w:
        raise ShapeError(f"Slice of {values.shape[-1]} features is not a {h}x{w} grid")
    return np.swapaxes(values.reshape(values.shape[:-1] + (w, h)), -1, -2)


def window_features(window: Window, grid_shape: Tuple[int, int]) -> np.ndarray:
    """Flat feature indices covered by ``window``, laid out as ``(height, width)``."""
    if not window.fits(grid_shape):
        raise ShapeError(f"Window {window} does not fit a {grid_shape[0]}x{grid_shape[1]} grid")
    h = grid_shape[0]
    rows = np.arange(window.row, window.row + window.height)
    cols = np.arange(window.col, window.col + window.width)
    return cols[None, :] * h + rows[:, None]


def apply_trigger(
    sample_slice: np.ndarray,
    spec: TriggerSpec,
    window: Optional[Window] = None,
    grid_shape: Optional[Tuple[int, int]] = None
) -> np.ndarray:
    """Return a copy of one slice (or a batch of slices) with the trigger written in."""
    triggered = np.array(sample_slice, dtype=np.float64, copy=True)
    width = triggered.shape[-1]
    if spec.is_grid:
        if window is None or grid_shape is None:
            raise ShapeError("A grid trigger needs a placed window and the slice's grid shape")
        if (window.height, window.width) != (spec.height, spec.width):
            raise ShapeError(f"Window {window.height}x{window.width} does not match trigger {spec.height}x{spec.width}")
        if grid_shape[0] * grid_shape[1] != width:
            raise ShapeError(f"Slice of {width} features is not a {grid_shape[0]}x{grid_shape[1]} grid")
        if window.area == 0:
            return triggered
        triggered[..., window_features(window, grid_shape)] = spec.patch()
        return triggered

    if spec.indices and spec.indices[-1] >= width:
        raise ShapeError(f"Trigger feature {spec.indices[-1]} is outside a slice of {width} features")
    triggered[..., np.asarray(spec.indices, dtype=int)] = spec.fill
    return triggered


def split_trigger(spec: TriggerSpec, parts: int) -> List[TriggerSpec]:
    """Cut a trigger into ``parts`` sub-triggers, one per colluding adversary.

    Grid patches are cut into contiguous column slices, wider slices first
    (a 5-wide patch in two parts gives widths 3 and 2); tabular index sets
    are partitioned in ascending order the same way.
    """
    if parts < 1:
        raise ValueError(f"Need at least one part, got {parts}")
    if parts == 1:
        return [spec]
    if spec.is_grid:
        if parts > spec.width:
            raise ValueError(f"Cannot split a {spec.width}-wide trigger into {parts} column slices")
        widths = [spec.width // parts + (1 if i < spec.width % parts else 0) for i in range(parts)]
        offsets = np.concatenate([[0], np.cumsum(widths)[:-1]])
        return [replace(spec, width=w, phase=spec.phase + int(o)) for w, o in zip(widths, offsets)]

    if parts > len(spec.indices):
        raise ValueError(f"Cannot split {len(spec.indices)} trigger features into {parts} parts")
    chunks = np.array_split(np.asarray(spec.indices, dtype=int), parts)
    return [replace(spec, indices=tuple(int(i) for i in chunk)) for chunk in chunks]


def plan_trigger_window(saliency_grid: np.ndarray, window_h: int, window_w: int) -> Window:
    """Top-left placement with the highest mean saliency, stride 1.

    Ties go to the smallest ``(row, col)`` in row-major order.
    """
    saliency_grid = np.asarray(saliency_grid, dtype=np.float64)
    h, w = saliency_grid.shape
    if window_h > h or window_w > w:
        raise ShapeError(f"A {window_h}x{window_w} window does not fit a {h}x{w} grid")
    if window_h <= 0 or window_w <= 0:
        return Window(0, 0, max(window_h, 0), max(window_w, 0))
    means = np.lib.stride_tricks.sliding_window_view(saliency_grid, (window_h, window_w)).mean(axis=(2, 3))
    row, col = np.unravel_index(int(np.argmax(means)), means.shape)
    return Window(int(row), int(col), window_h, window_w)


def random_window(grid_shape: Tuple[int, int], window_h: int, window_w: int, rng: np.random.Generator) -> Window:
    """A uniformly random placement, the baseline saliency placement is compared to."""
    h, w = grid_shape
    if window_h > h or window_w > w:
        raise ShapeError(f"A {window_h}x{window_w} window does not fit a {h}x{w} grid")
    return Window(int(rng.integers(0, h - window_h + 1)), int(rng.integers(0, w - window_w + 1)), window_h, window_w)


def plan_trigger_features(saliency: np.ndarray, count: int) -> Tuple[int, ...]:
    """The ``count`` most salient features of a tabular slice, ascending.

    Equal saliency prefers the lower feature index.
    """
    saliency = np.asarray(saliency, dtype=np.float64).reshape(-1)
    if not 0 <= count <= saliency.shape[0]:
        raise ShapeError(f"Cannot pick {count} features out of {saliency.shape[0]}")
    order = np.argsort(-saliency, kind="stable")
    return tuple(sorted(int(i) for i in order[:count]))


def tabular_fill_value(shard_rows: np.ndarray) -> float:
    """A value outside the usual range of a slice: its maximum plus three deviations."""
    shard_rows = np.asarray(shard_rows, dtype=np.float64)
    return float(shard_rows.max() + 3.0 * shard_rows.std())
