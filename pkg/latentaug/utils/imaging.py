"""Image file I/O and array/tensor conversions.

Images in memory are ``float32`` arrays of shape ``(H, W, 3)``, RGB, in ``[0, 1]``.
Network tensors are ``(N, 3, H, W)`` in ``[-1, 1]``.
"""

import os
from pathlib import Path

os.environ.setdefault("OPENCV_LOG_LEVEL", "OFF")
import cv2
import numpy as np
import torch


def read_image(path, size=None):

    path = Path(path)
    bgr = cv2.imread(path.as_posix(), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot read image: {path}")

    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    if size is not None and rgb.shape[:2] != (size, size):
        rgb = cv2.resize(rgb, (size, size), interpolation=cv2.INTER_AREA)

    return rgb.astype(np.float32) / 255.0


def write_image(path, image):

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = cv2.imwrite(path.as_posix(), cv2.cvtColor(to_uint8(image), cv2.COLOR_RGB2BGR))
    if not ok:
        raise OSError(f"cannot write image: {path}")


def read_mask(path):

    mask = cv2.imread(Path(path).as_posix(), cv2.IMREAD_GRAYSCALE)
    if mask is None:
        raise FileNotFoundError(f"cannot read mask: {path}")
    return mask > 127


def write_mask(path, mask):

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(path.as_posix(), np.where(mask, 255, 0).astype(np.uint8)):
        raise OSError(f"cannot write mask: {path}")


def to_uint8(image):

    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def to_float(image):

    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def resize(image, size):

    return cv2.resize(to_float(image), (size, size), interpolation=cv2.INTER_AREA)


def images_to_tensor(images, device="cpu"):
    """Stack ``(H, W, 3)`` images in [0, 1] into an ``(N, 3, H, W)`` tensor in [-1, 1]."""

    batch = np.stack([to_float(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(batch)).to(device) * 2.0 - 1.0


def tensor_to_images(tensor):
    """Inverse of :func:`images_to_tensor`; values are clamped into [0, 1]."""

    arr = ((tensor.detach().clamp(-1.0, 1.0) + 1.0) / 2.0).cpu().numpy()
    return [np.ascontiguousarray(a.transpose(1, 2, 0), dtype=np.float32) for a in arr]
