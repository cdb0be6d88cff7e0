"""
Deterministic view sampling over RGB images.

Every stochastic view carries its own seed, so materializing a ViewSet is a
pure function of the image and the set. Images are immutable numpy buffers of
shape (H, W, 3), dtype uint8.
"""

from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core.seeding import derive_seed
from shared.errors import (
    CellTooSmall,
    CropLargerThanImage,
    HarnessError,
    InvalidViewSpec,
    ViewError,
)
from shared.settings import MAX_SEED


class Image(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray

    @field_validator("pixels")
    @classmethod
    def _check_pixels(cls, v: np.ndarray) -> np.ndarray:
        if not isinstance(v, np.ndarray) or v.dtype != np.uint8:
            raise ValueError("pixels must be a uint8 numpy array")
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError(f"pixels must have shape (H, W, 3), got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if v.flags.writeable:
            v = v.copy()
            v.flags.writeable = False
        return v

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes) -> "Image":
        if len(data) != width * height * 3:
            raise ValueError(
                f"expected {width * height * 3} bytes for {width}x{height}, got {len(data)}"
            )
        pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
        return cls(pixels=pixels)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def data(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


_Seed = Annotated[int, Field(ge=0, le=MAX_SEED)]
_Positive = Annotated[int, Field(ge=1)]


class _View(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class GridSampleSpec(_View):
    kind: Literal["grid_sample"] = "grid_sample"
    grid_n: _Positive
    fragment_n: _Positive
    output_k: Optional[_Positive] = None
    seed: _Seed = 0

    @model_validator(mode="after")
    def _check_output(self) -> "GridSampleSpec":
        expected = self.grid_n * self.fragment_n
        if self.output_k is None:
            object.__setattr__(self, "output_k", expected)
        elif self.output_k != expected:
            raise ValueError(
                f"output_k must equal grid_n * fragment_n = {expected}, got {self.output_k}"
            )
        return self


class CenterCropView(_View):
    kind: Literal["center_crop"] = "center_crop"
    w: _Positive
    h: _Positive


class ResizeView(_View):
    kind: Literal["resize"] = "resize"
    w: _Positive
    h: _Positive


class CropThenResizeView(_View):
    kind: Literal["crop_then_resize"] = "crop_then_resize"
    cw: _Positive
    ch: _Positive
    rw: _Positive
    rh: _Positive


class PatchShuffleView(_View):
    kind: Literal["patch_shuffle"] = "patch_shuffle"
    rows: _Positive
    cols: _Positive
    seed: _Seed = 0
    out_w: Optional[_Positive] = None
    out_h: Optional[_Positive] = None

    @model_validator(mode="after")
    def _check_grid(self) -> "PatchShuffleView":
        if self.rows * self.cols < 2:
            raise ValueError("patch_shuffle needs rows * cols >= 2")
        if (self.out_w is None) != (self.out_h is None):
            raise ValueError("out_w and out_h must be given together")
        return self


class IdentityView(_View):
    kind: Literal["identity"] = "identity"


class ScaleWidthView(_View):
    kind: Literal["scale_width"] = "scale_width"
    width: _Positive


class AspectCropView(_View):
    kind: Literal["aspect_crop"] = "aspect_crop"
    ratio_w: _Positive
    ratio_h: _Positive
    w: _Positive
    h: _Positive


class PatchView(_View):
    kind: Literal["patch"] = "patch"
    rows: _Positive
    cols: _Positive
    index: Annotated[int, Field(ge=0)]
    out_w: Optional[_Positive] = None
    out_h: Optional[_Positive] = None

    @model_validator(mode="after")
    def _check_index(self) -> "PatchView":
        if self.index >= self.rows * self.cols:
            raise ValueError(
                f"patch index {self.index} outside a {self.rows}x{self.cols} grid"
            )
        if (self.out_w is None) != (self.out_h is None):
            raise ValueError("out_w and out_h must be given together")
        return self


ViewSpec = Annotated[
    Union[
        GridSampleSpec,
        CenterCropView,
        ResizeView,
        CropThenResizeView,
        PatchShuffleView,
        IdentityView,
        ScaleWidthView,
        AspectCropView,
        PatchView,
    ],
    Field(discriminator="kind"),
]

STOCHASTIC_KINDS = ("grid_sample", "patch_shuffle")


class ViewSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1)
    views: List[ViewSpec] = Field(..., min_length=1)

    @property
    def is_stochastic(self) -> bool:
        return any(v.kind in STOCHASTIC_KINDS for v in self.views)


def fragment_offset(
    cell_h: int, cell_w: int, n: int, seed: int, i: int, j: int
) -> Tuple[int, int]:
    """Row/column offset of the n x n fragment inside grid cell (i, j)."""
    rng = np.random.default_rng([seed, i, j])
    dy = int(rng.integers(0, cell_h - n + 1))
    dx = int(rng.integers(0, cell_w - n + 1))
    return dy, dx


def grid_sample(img: Image, spec: GridSampleSpec) -> Image:
    """
    Splice one n x n fragment from each cell of an N x N grid into a K x K
    mosaic. Cell (i, j) spans rows floor(i*H/N)..floor((i+1)*H/N) and columns
    floor(j*W/N)..floor((j+1)*W/N); fragment offsets come from a per-cell
    generator seeded by (seed, i, j).
    """
    H, W = img.height, img.width
    N, n = spec.grid_n, spec.fragment_n
    if H // N < n or W // N < n:
        raise CellTooSmall(
            f"{W}x{H} image split {N}x{N} gives cells of at least "
            f"{W // N}x{H // N}, too small for {n}x{n} fragments"
        )

    out = np.empty((N * n, N * n, 3), dtype=np.uint8)
    for i in range(N):
        r0, r1 = i * H // N, (i + 1) * H // N
        for j in range(N):
            c0, c1 = j * W // N, (j + 1) * W // N
            dy, dx = fragment_offset(r1 - r0, c1 - c0, n, spec.seed, i, j)
            out[i * n : (i + 1) * n, j * n : (j + 1) * n] = img.pixels[
                r0 + dy : r0 + dy + n, c0 + dx : c0 + dx + n
            ]
    return Image(pixels=out)


def center_crop(img: Image, w: int, h: int) -> Image:
    if w > img.width or h > img.height:
        raise CropLargerThanImage(
            f"cannot crop {w}x{h} from a {img.width}x{img.height} image"
        )
    # odd margins leave the extra pixel on the right/bottom
    x0 = (img.width - w) // 2
    y0 = (img.height - h) // 2
    return Image(pixels=img.pixels[y0 : y0 + h, x0 : x0 + w])


def _bilinear_axis(src: int, dst: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize(img: Image, w: int, h: int) -> Image:
    """Bilinear resize with half-pixel centers, rounding half away from zero."""
    if w < 1 or h < 1:
        raise InvalidViewSpec(f"resize target must be positive, got {w}x{h}")
    if (w, h) == (img.width, img.height):
        return img

    y0, y1, fy = _bilinear_axis(img.height, h)
    x0, x1, fx = _bilinear_axis(img.width, w)
    fx = fx[None, :, None]
    fy = fy[:, None, None]

    top_rows = img.pixels[y0].astype(np.float64)
    bottom_rows = img.pixels[y1].astype(np.float64)
    top = top_rows[:, x0] * (1.0 - fx) + top_rows[:, x1] * fx
    bottom = bottom_rows[:, x0] * (1.0 - fx) + bottom_rows[:, x1] * fx
    value = top * (1.0 - fy) + bottom * fy

    # values are non-negative, so floor(v + 0.5) rounds half away from zero
    out = np.clip(np.floor(value + 0.5), 0, 255).astype(np.uint8)
    return Image(pixels=out)


def scale_width(img: Image, width: int) -> Image:
    height = max(1, int(np.floor(img.height * width / img.width + 0.5)))
    return resize(img, width, height)


def aspect_crop(img: Image, ratio_w: int, ratio_h: int, w: int, h: int) -> Image:
    """Largest centered crop with aspect ratio_w:ratio_h, resized to w x h."""
    if img.width * ratio_h >= img.height * ratio_w:
        ch = img.height
        cw = max(1, img.height * ratio_w // ratio_h)
    else:
        cw = img.width
        ch = max(1, img.width * ratio_h // ratio_w)
    return resize(center_crop(img, cw, ch), w, h)


def _tile_shape(img: Image, rows: int, cols: int) -> Tuple[int, int]:
    ph, pw = img.height // rows, img.width // cols
    if ph < 1 or pw < 1:
        raise InvalidViewSpec(
            f"a {img.width}x{img.height} image cannot be split into {rows}x{cols} tiles"
        )
    return ph, pw


def _tiles(img: Image, rows: int, cols: int) -> List[np.ndarray]:
    ph, pw = _tile_shape(img, rows, cols)
    return [
        img.pixels[r * ph : (r + 1) * ph, c * pw : (c + 1) * pw]
        for r in range(rows)
        for c in range(cols)
    ]


def shuffle_permutation(rows: int, cols: int, seed: int) -> Tuple[int, ...]:
    """Seeded Fisher-Yates permutation; output slot k receives tile perm[k]."""
    rng = np.random.default_rng(seed)
    perm = list(range(rows * cols))
    for i in range(len(perm) - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return tuple(perm)


def patch_shuffle(img: Image, rows: int, cols: int, seed: int) -> Image:
    """
    Cut the image into rows x cols tiles (dimensions truncated to multiples of
    the grid) and reassemble them in a seeded random order.
    """
    if rows * cols < 2:
        raise InvalidViewSpec("patch_shuffle needs rows * cols >= 2")
    tiles = _tiles(img, rows, cols)
    perm = shuffle_permutation(rows, cols, seed)
    shuffled = [tiles[k] for k in perm]
    out = np.concatenate(
        [np.concatenate(shuffled[r * cols : (r + 1) * cols], axis=1) for r in range(rows)],
        axis=0,
    )
    return Image(pixels=out)


def patch(img: Image, rows: int, cols: int, index: int) -> Image:
    return Image(pixels=_tiles(img, rows, cols)[index])


def apply_view(img: Image, view: ViewSpec) -> Image:
    match view:
        case GridSampleSpec():
            return grid_sample(img, view)
        case CenterCropView(w=w, h=h):
            return center_crop(img, w, h)
        case ResizeView(w=w, h=h):
            return resize(img, w, h)
        case CropThenResizeView(cw=cw, ch=ch, rw=rw, rh=rh):
            return resize(center_crop(img, cw, ch), rw, rh)
        case PatchShuffleView():
            out = patch_shuffle(img, view.rows, view.cols, view.seed)
            return resize(out, view.out_w, view.out_h) if view.out_w else out
        case IdentityView():
            return img
        case ScaleWidthView(width=width):
            return scale_width(img, width)
        case AspectCropView():
            return aspect_crop(img, view.ratio_w, view.ratio_h, view.w, view.h)
        case PatchView():
            out = patch(img, view.rows, view.cols, view.index)
            return resize(out, view.out_w, view.out_h) if view.out_w else out
    raise InvalidViewSpec(f"unsupported view kind: {view!r}")


def materialize_view_set(img: Image, view_set: ViewSet) -> List[Image]:
    outputs = []
    for index, view in enumerate(view_set.views):
        try:
            outputs.append(apply_view(img, view))
        except HarnessError as e:
            raise ViewError(index, e) from e
    return outputs


def reseed(view_set: ViewSet, seed: int) -> ViewSet:
    """Give every stochastic view a seed derived from ``seed`` and its index."""
    views = [
        (
            view.model_copy(update={"seed": derive_seed(seed, index)})
            if view.kind in STOCHASTIC_KINDS
            else view
        )
        for index, view in enumerate(view_set.views)
    ]
    return ViewSet(name=view_set.name, views=views)


def view_presets() -> Dict[str, ViewSet]:
    return {
        "baseline": ViewSet(
            name="baseline",
            views=[CropThenResizeView(cw=1920, ch=960, rw=1280, rh=720)],
        ),
        "three_branch": ViewSet(
            name="three_branch",
            views=[
                ResizeView(w=480, h=480),
                GridSampleSpec(grid_n=15, fragment_n=32),
                CenterCropView(w=480, h=480),
            ],
        ),
        "grid_mini_patch": ViewSet(
            name="grid_mini_patch",
            views=[GridSampleSpec(grid_n=16, fragment_n=24)],
        ),
        "multi_scale": ViewSet(
            name="multi_scale",
            views=[
                ScaleWidthView(width=3840),
                ScaleWidthView(width=960),
                ScaleWidthView(width=256),
            ],
        ),
        "aspect_ratios": ViewSet(
            name="aspect_ratios",
            views=[
                AspectCropView(ratio_w=1, ratio_h=1, w=720, h=720),
                AspectCropView(ratio_w=2, ratio_h=1, w=1440, h=720),
                AspectCropView(ratio_w=3, ratio_h=1, w=2160, h=720),
            ],
        ),
        "patches_and_shuffle": ViewSet(
            name="patches_and_shuffle",
            views=[ResizeView(w=224, h=224)]
            + [
                PatchView(rows=3, cols=3, index=k, out_w=224, out_h=224)
                for k in range(9)
            ]
            + [PatchShuffleView(rows=3, cols=3, out_w=224, out_h=224)],
        ),
        "largest_square": ViewSet(
            name="largest_square",
            views=[
                AspectCropView(ratio_w=1, ratio_h=1, w=320, h=320),
                CenterCropView(w=320, h=320),
            ],
        ),
    }
