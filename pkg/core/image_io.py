from pathlib import Path
from typing import Iterator, Tuple

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from core.views import Image
from shared.errors import ImageDecodeError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_image(path: Path | str) -> Image:
    try:
        with PILImage.open(path) as decoded:
            pixels = np.asarray(decoded.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as e:
        raise ImageDecodeError(f"cannot decode {path}: {e}") from e
    return Image(pixels=pixels)


def save_png(image: Image, path: Path | str) -> None:
    PILImage.fromarray(image.pixels).save(path, format="PNG")


def iter_image_files(directory: Path | str) -> Iterator[Tuple[str, Path]]:
    """Yield ``(image_id, path)`` for decodable-looking files, sorted by name."""
    for path in sorted(Path(directory).iterdir()):
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES:
            yield path.stem, path
