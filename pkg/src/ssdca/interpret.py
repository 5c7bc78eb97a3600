"""Embeddings, cluster separation, 2-D projection, GradCAM and DCA attention maps."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import ImageStore, LongitudinalPair, iter_batches
from .fusion import SSDCA, PairModel


class UnsupportedOperationError(TypeError):
    pass


@dataclass
class EmbeddingRecord:
    vector: np.ndarray
    label: int
    patient_id: str
    pair_id: str = ""


@torch.no_grad()
def extract_embeddings(
    model: PairModel, pairs: Sequence[LongitudinalPair], store: ImageStore, batch_size: int = 8
) -> list[EmbeddingRecord]:
    """Head-input vectors (eval mode), one per pair."""
    model.eval()
    out = []
    for chunk in iter_batches(list(pairs), batch_size):
        pre, post, _ = store.batch(chunk)
        vecs = model.embed(pre, post).double().numpy()
        for pair, v in zip(chunk, vecs):
            out.append(EmbeddingRecord(v, pair.label, pair.patient_id, f"{pair.pre.image_id}->{pair.post.image_id}"))
    return out


def cluster_metrics(points: np.ndarray, labels: Sequence[int]) -> tuple[float, float]:
    """(distance between the two class centroids, mean over classes of mean radius).

    The radius of a class is the mean Euclidean distance of its points to
    the class centroid.
    """
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) != 2:
        raise ValueError(f"cluster metrics need exactly two classes, got {len(classes)}")
    centroids = [x[y == c].mean(axis=0) for c in classes]
    inter = float(np.linalg.norm(centroids[0] - centroids[1]))
    intra = float(np.mean([np.linalg.norm(x[y == c] - m, axis=1).mean() for c, m in zip(classes, centroids)]))
    return inter, intra


def project_2d(embeddings: np.ndarray, method: str = "pca", external: np.ndarray | None = None) -> np.ndarray:
    """Top-2 principal-component scores, or pass-through of externally computed coordinates.

    Components are ordered by variance and each loading vector is signed so
    its largest-magnitude entry is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if method == "external":
        coords = np.asarray(external, dtype=np.float64)
        if coords.shape != (len(x), 2):
            raise ValueError(f"external coordinates must have shape ({len(x)}, 2)")
        return coords
    if method != "pca":
        raise ValueError(f"unknown projection method {method!r}")
    if len(x) < 3:
        raise ValueError("projection needs at least 3 points")
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        warnings.warn("all embeddings identical; projection is all zeros", stacklevel=2)
        return np.zeros((len(x), 2))
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    signs[signs == 0] = 1.0
    return xc @ (comps * signs[:, None]).T


def _branch_gradient(model: PairModel, pre, post, target_class: int, branch: str):
    """Fusion-stage activations of one branch and d(score)/d(activations)."""
    if branch not in ("pre", "post"):
        raise ValueError(f"branch must be 'pre' or 'post', got {branch!r}")
    model.eval()
    fm = model.stage_features((pre if branch == "pre" else post)[None])
    with torch.no_grad():
        other = model.stage_features((post if branch == "pre" else pre)[None]).tokens
    act = fm.tokens.detach().requires_grad_(True)
    f_pre, f_post = (act, other) if branch == "pre" else (other, act)
    logit = model.head(model.embed_from_features(f_pre, f_post))[0]
    score = logit if target_class == 1 else -logit
    (grad,) = torch.autograd.grad(score, act, allow_unused=True)
    return act.detach(), grad, fm.grid


def gradcam(
    model: PairModel,
    pre: torch.Tensor,
    post: torch.Tensor,
    target_class: int = 1,
    upsample: bool = True,
    branch: str = "pre",
) -> np.ndarray:
    """GradCAM over the fusion-stage features of one branch (restaging by default).

    ``pre``/``post`` are single (3, H, W) images. The LR target scores the
    logit; the cCR target scores its negation. Returns a map in [0, 1] at
    image resolution (or at the token grid when ``upsample`` is False).
    """
    act, grad, (rows, cols) = _branch_gradient(model, pre, post, target_class, branch)
    if grad is None or not torch.any(grad):
        warnings.warn("zero gradient everywhere; returning an all-zero map", stacklevel=2)
        size = pre.shape[-2:] if upsample else (rows, cols)
        return np.zeros(tuple(size))
    weights = grad[0].mean(dim=0)  # per-channel GAP of gradients
    cam = F.relu(act[0] @ weights).reshape(rows, cols)
    lo, hi = cam.min(), cam.max()
    cam = (cam - lo) / (hi - lo) if hi > lo else torch.zeros_like(cam)
    if upsample:
        cam = F.interpolate(cam[None, None], size=tuple(pre.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
        cam = cam.clamp(0.0, 1.0)
    return cam.double().numpy()


def gradcam_channel_weights(
    model: PairModel, pre: torch.Tensor, post: torch.Tensor, target_class: int = 1, branch: str = "pre"
) -> np.ndarray:
    _, grad, _ = _branch_gradient(model, pre, post, target_class, branch)
    if grad is None:
        return np.zeros(model.fusion_channels)
    return grad[0].mean(dim=0).double().numpy()


@dataclass
class AttentionMaps:
    pre_to_post: np.ndarray  # (T, T): rows are pre queries over post keys
    post_to_pre: np.ndarray
    grid: tuple[int, int]
    per_head: tuple[np.ndarray, np.ndarray] | None = None

    def query_map(self, direction: str, cell: tuple[int, int]) -> np.ndarray:
        """Attention of one query cell over the other image's grid."""
        mat = self.pre_to_post if direction == "pre_to_post" else self.post_to_pre
        q = cell[0] * self.grid[1] + cell[1]
        return mat[q].reshape(self.grid)


@torch.no_grad()
def attention_correspondence(
    model: PairModel, pre: torch.Tensor, post: torch.Tensor, per_head: bool = False
) -> AttentionMaps:
    """Head-averaged softmax matrices of both DCA directions for one pair."""
    if not isinstance(model, SSDCA):
        raise UnsupportedOperationError(f"attention maps need a DCA model, got {type(model).__name__}")
    model.eval()
    _, _, (a_pre, a_post) = model.fused(pre[None], post[None], return_weights=True)
    grid = model.stage_features(pre[None]).grid
    heads = (a_pre[0].double().numpy(), a_post[0].double().numpy()) if per_head else None
    return AttentionMaps(
        a_pre[0].mean(dim=0).double().numpy(), a_post[0].mean(dim=0).double().numpy(), tuple(grid), heads
    )


def top_fraction_mask(heatmap: np.ndarray, fraction: float = 0.1) -> np.ndarray:
    thresh = np.quantile(heatmap, 1.0 - fraction)
    return heatmap >= thresh if thresh > 0 else heatmap > thresh


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def cell_coverage(mask: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Fraction of each token cell's pixel footprint covered by a pixel mask."""
    rows, cols = grid
    h, w = mask.shape
    return mask.reshape(rows, h // rows, cols, w // cols).mean(axis=(1, 3))


def cell_center_in_mask(mask: np.ndarray, grid: tuple[int, int], cell: tuple[int, int]) -> bool:
    h, w = mask.shape
    cy = int((cell[0] + 0.5) * h / grid[0])
    cx = int((cell[1] + 0.5) * w / grid[1])
    return bool(mask[cy, cx])


def write_grid_csv(grid: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(grid):
            w.writerow([f"{v:.8f}" for v in row])


def read_grid_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_grid_png(grid: np.ndarray, path: str | Path, size: int | None = None) -> None:
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    g = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    im = Image.fromarray((g * 255).round().astype(np.uint8))
    if size:
        im = im.resize((size, size), Image.NEAREST)
    im.save(path)


def write_embeddings_csv(records: Sequence[EmbeddingRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = len(records[0].vector) if records else 0
        w.writerow(["id", "patient_id", "label"] + [f"v{i}" for i in range(dim)])
        for r in records:
            w.writerow([r.pair_id, r.patient_id, r.label] + [f"{v:.8g}" for v in r.vector])
