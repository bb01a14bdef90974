"""Image grids for inspecting reconstructions, translations and interpolation sweeps."""

import logging
import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from latentaug.data_model import load_manifest
from latentaug.exception import ConfigError
from latentaug.utils.imaging import read_image, to_uint8

logger = logging.getLogger(__name__)

PADDING = 2
CAPTION_WIDTH = 72
BACKGROUND = (255, 255, 255)
TEXT_COLOR = (0, 0, 0)


def grid_shape(n_images, columns, rows=None):
    """``(rows, columns)`` holding ``n_images``; rows default to as many as needed."""

    if n_images < 1:
        raise ConfigError("a grid needs at least one image")
    if columns < 1:
        raise ConfigError("columns must be >= 1")

    needed = math.ceil(n_images / columns)
    rows = needed if rows is None else int(rows)
    if rows < needed:
        raise ConfigError(f"{n_images} images do not fit {rows} x {columns}")

    return rows, columns


def grid_image(images, columns, rows=None, captions=None, cell_size=None):
    """Tile ``(H, W, 3)`` images row-major into a Pillow image; unused cells stay blank.

    ``captions`` (one per row) are written into a left margin.
    """

    rows, columns = grid_shape(len(images), columns, rows)
    if captions is not None and len(captions) > rows:
        raise ConfigError(f"{len(captions)} captions for {rows} rows")

    cell = int(cell_size or max(max(im.shape[:2]) for im in images))
    margin = CAPTION_WIDTH if captions else 0

    width = margin + columns * (cell + PADDING) + PADDING
    height = rows * (cell + PADDING) + PADDING
    canvas = Image.new("RGB", (width, height), BACKGROUND)

    for i, image in enumerate(images):
        r, c = divmod(i, columns)
        tile = Image.fromarray(to_uint8(image))
        if tile.size != (cell, cell):
            tile = tile.resize((cell, cell), Image.BILINEAR)
        canvas.paste(tile, (margin + PADDING + c * (cell + PADDING), PADDING + r * (cell + PADDING)))

    if captions:
        draw = ImageDraw.Draw(canvas)
        for r, caption in enumerate(captions):
            draw.text((PADDING, PADDING + r * (cell + PADDING) + cell // 2 - 5), str(caption), fill=TEXT_COLOR)

    return canvas


def interpolation_row(image_a, image_b, interpolants):
    """``A``, the interpolants ordered from ``A`` towards ``B``, then ``B``.

    Interpolants are given in ascending lambda (weight on ``A``), so the row reads
    ``A, lam_max, ..., lam_min, B``.
    """

    return [image_a] + list(reversed(interpolants)) + [image_b]


def load_grid_images(source, size=None):
    """Images of a manifest file, or of a list of image paths, in order."""

    if isinstance(source, (str, Path)) and Path(source).suffix in (".tsv", ".txt"):
        manifest = load_manifest(source)
        return [read_image(manifest.resolve(r), size) for r in manifest.records]

    return [read_image(p, size) for p in source]


def report_grid(source, out_path, columns, rows=None, captions=None, cell_size=None):
    """Write a grid of the images in ``source`` (manifest path, image paths or arrays) to ``out_path``.

    Raises
    ------
    FileNotFoundError
        an image cannot be read (names the path)
    """

    if isinstance(source, (list, tuple)) and source and isinstance(source[0], np.ndarray):
        images = list(source)
    else:
        images = load_grid_images(source)

    canvas = grid_image(images, columns, rows, captions, cell_size)

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)

    logger.info(f"Report: {len(images)} images -> {canvas.size[0]}x{canvas.size[1]} grid {out_path}")
    return out_path
