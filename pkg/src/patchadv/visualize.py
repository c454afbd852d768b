"""Attention visualization: CAM heatmap overlays and clean-vs-perturbed grids."""

import numpy as np
import torch
from PIL import Image

from .generator import perturb
from .surrogate import compute_cam, forward_logits


def cam_overlay(image, cam, alpha=0.5, cmap="jet"):
    """Blend a [0,1] heatmap over a [0,1] HxWx3 image using a colormap."""
    import matplotlib

    if cam.min() < 0 or cam.max() > 1:
        raise ValueError("cam values must lie in [0, 1]")
    colors = matplotlib.colormaps[cmap](cam)[..., :3].astype(np.float32)
    return (1 - alpha) * image + alpha * colors


def build_grid(tiles, pad=2):
    """Compose a rows x cols nested list of [0,1] HxWx3 arrays into one array."""
    rows = len(tiles)
    cols = len(tiles[0])
    h, w, _ = tiles[0][0].shape
    grid = np.ones((rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad, 3), np.float32)
    for r, row in enumerate(tiles):
        if len(row) != cols:
            raise ValueError("ragged tile rows")
        for c, tile in enumerate(row):
            if tile.shape != (h, w, 3):
                raise ValueError(f"tile shape {tile.shape} differs from {(h, w, 3)}")
            y = pad + r * (h + pad)
            x = pad + c * (w + pad)
            grid[y:y + h, x:x + w] = tile
    return grid


def save_image(array, path):
    """Write a [0,1] HxWx3 array as an 8-bit PNG."""
    Image.fromarray(np.round(np.clip(array, 0, 1) * 255).astype(np.uint8)).save(path)
    return path


def attack_cam_grid(net, surrogate, images, epsilon, class_index=None):
    """Four-row grid: clean, clean CAM, perturbed, perturbed CAM (one column per image).

    images: (B, 3, H, W) tensor in [0, 1]. The CAM class defaults to each
    image's top clean prediction so both rows attend to the same class.
    """
    net.eval()
    with torch.no_grad():
        perturbed = perturb(net, images, epsilon)
    rows = [[], [], [], []]
    for i in range(images.shape[0]):
        clean = images[i:i + 1]
        pert = perturbed[i:i + 1]
        if class_index is None:
            logits = forward_logits(surrogate, clean)[0]
            target = int(torch.argmax(logits))
        else:
            target = class_index
        clean_img = clean[0].permute(1, 2, 0).numpy()
        pert_img = pert[0].permute(1, 2, 0).numpy()
        rows[0].append(clean_img)
        rows[1].append(cam_overlay(clean_img, compute_cam(surrogate, clean, target)))
        rows[2].append(pert_img)
        rows[3].append(cam_overlay(pert_img, compute_cam(surrogate, pert, target)))
    return build_grid(rows)
