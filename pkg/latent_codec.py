"""
Exact space-to-depth codec between pixel images and latents.

An (N, N, 3) image becomes an (N/p, N/p, 3p^2) latent by moving each p x p
pixel block into the channel axis. No scaling is applied, so both directions
are pure rearrangements and round-trip bit-exactly. Leading batch axes are
carried through unchanged.
"""
import numpy as np

from errors import ShapeError

PATCH_SIZE = 2


def encode_latent(image: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim < 3:
        raise ShapeError(f"expected (..., H, W, C) image, got shape {image.shape}")
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image sides {h}x{w} are not divisible by patch size {p}")
    blocks = image.reshape(*lead, h // p, p, w // p, p, c)
    n = len(lead)
    blocks = np.moveaxis(blocks, n + 1, n + 2)   # (..., h/p, w/p, p, p, c)
    return np.ascontiguousarray(blocks.reshape(*lead, h // p, w // p, p * p * c))


def decode_latent(latent: np.ndarray, patch_size: int = PATCH_SIZE) -> np.ndarray:
    latent = np.asarray(latent)
    if latent.ndim < 3:
        raise ShapeError(f"expected (..., h, w, C) latent, got shape {latent.shape}")
    *lead, gh, gw, channels = latent.shape
    p = patch_size
    if channels % (p * p):
        raise ShapeError(f"latent channels {channels} are not divisible by {p * p}")
    c = channels // (p * p)
    blocks = latent.reshape(*lead, gh, gw, p, p, c)
    n = len(lead)
    blocks = np.moveaxis(blocks, n + 2, n + 1)   # (..., h/p, p, w/p, p, c)
    return np.ascontiguousarray(blocks.reshape(*lead, gh * p, gw * p, c))
