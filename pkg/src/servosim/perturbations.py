"""Image perturbations for dataset robustness: lighting and occlusions.

Lighting is a global affine intensity change plus a multiplicative mixture
of 2-D Gaussian light spots. Occlusions are coherent pixel clusters cut from
arbitrary corpus images by SLIC superpixel segmentation and pasted hard
(no blending) at a random position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from servosim.errors import ImageTooSmall
from servosim.image import ImageBuffer

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=int)
SLIC_ITERATIONS = 10


@dataclass(frozen=True)
class GaussianLight:
    """One projected light spot: center (px), gain, and spread per axis (px)."""

    x0: float
    y0: float
    amplitude: float
    sigma_x: float
    sigma_y: float

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("sigma_x and sigma_y must be positive")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")

    def gain_field(self, width: int, height: int) -> np.ndarray:
        xs = np.arange(width, dtype=float)
        ys = np.arange(height, dtype=float)[:, None]
        ex = (xs - self.x0) ** 2 / (2.0 * self.sigma_x**2)
        ey = (ys - self.y0) ** 2 / (2.0 * self.sigma_y**2)
        return self.amplitude * np.exp(-(ex + ey))


@dataclass(frozen=True)
class LightingConfig:
    """Global affine intensity change plus local Gaussian light spots."""

    global_gain: float = 1.0
    global_bias: float = 0.0
    lights: tuple[GaussianLight, ...] = ()

    def __post_init__(self):
        if self.global_gain < 0:
            raise ValueError("global_gain must be non-negative")
        object.__setattr__(self, "lights", tuple(self.lights))

    def to_dict(self) -> dict:
        return {
            "global_gain": self.global_gain,
            "global_bias": self.global_bias,
            "lights": [
                {
                    "x0": l.x0,
                    "y0": l.y0,
                    "amplitude": l.amplitude,
                    "sigma_x": l.sigma_x,
                    "sigma_y": l.sigma_y,
                }
                for l in self.lights
            ],
        }

    @staticmethod
    def from_dict(data: dict) -> "LightingConfig":
        lights = tuple(GaussianLight(**entry) for entry in data.get("lights", []))
        return LightingConfig(
            global_gain=data.get("global_gain", 1.0),
            global_bias=data.get("global_bias", 0.0),
            lights=lights,
        )


@dataclass(frozen=True)
class SlicParams:
    cluster_count: int = 64
    compactness: float = 10.0

    def __post_init__(self):
        if self.cluster_count < 2:
            raise ValueError("cluster_count must be at least 2")
        if self.compactness <= 0:
            raise ValueError("compactness must be positive")


@dataclass(frozen=True)
class SuperpixelLabels:
    """Dense per-pixel cluster ids in [0, cluster_count)."""

    labels: np.ndarray
    cluster_count: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)


@dataclass(frozen=True)
class OcclusionPatch:
    """Cropped cluster: pixel values, membership mask, paste position (x, y)."""

    pixels: np.ndarray
    mask: np.ndarray
    anchor: tuple[int, int]
    cluster_id: int = -1

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        mk = np.asarray(self.mask, dtype=bool)
        if px.shape != mk.shape:
            raise ValueError("pixels and mask must share a shape")
        if not mk.any():
            raise ValueError("mask must be nonempty")
        px.setflags(write=False)
        mk.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "mask", mk)


def apply_global_affine(img: ImageBuffer, gain: float, bias: float) -> ImageBuffer:
    """Per-pixel gain * p + bias, clamped to [0, 255] and rounded."""
    if gain < 0:
        raise ValueError("gain must be non-negative")
    out = np.clip(gain * img.as_float() + bias, 0.0, 255.0)
    return ImageBuffer(np.rint(out).astype(np.uint8))


def apply_gaussian_lights(img: ImageBuffer, lights) -> ImageBuffer:
    """Multiply the image by the summed gain of all light spots, then clamp.

    An empty light list is the identity (the literal mixture with zero terms
    would black out the image).
    """
    lights = tuple(lights)
    if not lights:
        return ImageBuffer(img.pixels.copy())
    gain = np.zeros((img.height, img.width))
    for light in lights:
        gain += light.gain_field(img.width, img.height)
    out = np.clip(img.as_float() * gain, 0.0, 255.0)
    return ImageBuffer(np.rint(out).astype(np.uint8))


def apply_lighting(img: ImageBuffer, config: LightingConfig) -> ImageBuffer:
    """Global affine first, then the local light mixture (if any)."""
    out = apply_global_affine(img, config.global_gain, config.global_bias)
    if config.lights:
        out = apply_gaussian_lights(out, config.lights)
    return out


def _seed_grid(width: int, height: int, k: int) -> tuple[int, int]:
    nx = max(1, math.ceil(math.sqrt(k * width / height)))
    ny = max(1, round(k / nx))
    return nx, ny


def slic_segment(img: ImageBuffer, cluster_count_target: int, compactness: float) -> SuperpixelLabels:
    """SLIC superpixels by localized k-means in (intensity, x, y) space.

    Centers start on a regular grid at interval ~S = sqrt(N/k); each runs
    10 assignment/update rounds searching a 2S x 2S window with distance
    sqrt(d_int^2 + (compactness/S)^2 d_xy^2); finally every cluster is made
    4-connected by merging orphan components into the largest adjacent
    cluster.
    """
    if cluster_count_target < 2:
        raise ValueError("cluster_count_target must be at least 2")
    if compactness <= 0:
        raise ValueError("compactness must be positive")
    w, h = img.width, img.height
    n = w * h
    s = math.sqrt(n / cluster_count_target)
    if s < 2.0:
        raise ImageTooSmall(
            f"grid interval {s:.2f} px < 2 px for {w}x{h} with k={cluster_count_target}"
        )

    intensity = img.as_float()
    nx, ny = _seed_grid(w, h, cluster_count_target)
    cx = (np.arange(nx) + 0.5) * (w / nx)
    cy = (np.arange(ny) + 0.5) * (h / ny)
    gx, gy = np.meshgrid(cx, cy)
    centers_x = gx.ravel()
    centers_y = gy.ravel()
    centers_i = intensity[
        np.clip(np.rint(centers_y), 0, h - 1).astype(int),
        np.clip(np.rint(centers_x), 0, w - 1).astype(int),
    ].copy()
    k = centers_x.size

    spatial_w = (compactness / s) ** 2
    xs = np.arange(w, dtype=float)
    ys = np.arange(h, dtype=float)
    px, py = np.meshgrid(xs, ys)
    labels = np.zeros((h, w), dtype=np.int32)

    for _ in range(SLIC_ITERATIONS):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for c in range(k):
            x_lo = max(0, int(math.floor(centers_x[c] - s)))
            x_hi = min(w, int(math.ceil(centers_x[c] + s)) + 1)
            y_lo = max(0, int(math.floor(centers_y[c] - s)))
            y_hi = min(h, int(math.ceil(centers_y[c] + s)) + 1)
            if x_lo >= x_hi or y_lo >= y_hi:
                continue
            window = intensity[y_lo:y_hi, x_lo:x_hi]
            dx = xs[x_lo:x_hi] - centers_x[c]
            dy = ys[y_lo:y_hi] - centers_y[c]
            d2 = (window - centers_i[c]) ** 2 + spatial_w * (
                dx[None, :] ** 2 + dy[:, None] ** 2
            )
            view_best = best[y_lo:y_hi, x_lo:x_hi]
            closer = d2 < view_best
            view_best[closer] = d2[closer]
            labels[y_lo:y_hi, x_lo:x_hi][closer] = c
        # Pixels no window reached fall to the nearest center spatially.
        unassigned = labels < 0
        if unassigned.any():
            uy, ux = np.nonzero(unassigned)
            d = (ux[:, None] - centers_x[None, :]) ** 2 + (uy[:, None] - centers_y[None, :]) ** 2
            labels[uy, ux] = np.argmin(d, axis=1)
        # Update step: means per cluster.
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=k).astype(float)
        occupied = counts > 0
        sum_x = np.bincount(flat, weights=px.ravel(), minlength=k)
        sum_y = np.bincount(flat, weights=py.ravel(), minlength=k)
        sum_i = np.bincount(flat, weights=intensity.ravel(), minlength=k)
        centers_x[occupied] = sum_x[occupied] / counts[occupied]
        centers_y[occupied] = sum_y[occupied] / counts[occupied]
        centers_i[occupied] = sum_i[occupied] / counts[occupied]

    labels = _enforce_connectivity(labels, k)
    return SuperpixelLabels(labels, int(labels.max()) + 1)


def _enforce_connectivity(labels: np.ndarray, k: int) -> np.ndarray:
    """Keep each cluster's largest 4-connected component; orphan components
    join the largest adjacent surviving cluster. Ids end up dense."""
    h, w = labels.shape
    final = np.full((h, w), -1, dtype=np.int32)
    orphans = []
    areas = np.zeros(k, dtype=np.int64)
    for c in range(k):
        mask = labels == c
        if not mask.any():
            continue
        comp, ncomp = ndimage.label(mask, structure=_FOUR_CONNECTED)
        if ncomp == 1:
            final[mask] = c
            areas[c] = int(mask.sum())
            continue
        sizes = np.bincount(comp.ravel())[1:]  # skip background 0
        keep = int(np.argmax(sizes)) + 1
        core = comp == keep
        final[core] = c
        areas[c] = int(core.sum())
        for comp_id in range(1, ncomp + 1):
            if comp_id != keep:
                orphans.append(np.nonzero(comp == comp_id))

    while orphans:
        deferred = []
        progressed = False
        for ys, xs in orphans:
            neighbor_labels = []
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy = ys + dy
                xx = xs + dx
                ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                vals = final[yy[ok], xx[ok]]
                neighbor_labels.append(vals[vals >= 0])
            candidates = np.unique(np.concatenate(neighbor_labels)) if neighbor_labels else []
            if len(candidates) == 0:
                deferred.append((ys, xs))
                continue
            target = int(candidates[np.argmax(areas[candidates])])
            final[ys, xs] = target
            areas[target] += len(ys)
            progressed = True
        if not progressed and deferred:
            raise RuntimeError("connectivity enforcement failed to converge")
        orphans = deferred

    used = np.unique(final)
    remap = np.full(k, -1, dtype=np.int32)
    remap[used] = np.arange(len(used), dtype=np.int32)
    return remap[final]


def sample_occlusion_patch(
    corpus_img: ImageBuffer,
    rng: np.random.Generator,
    slic_params: SlicParams | None = None,
    target_width: int | None = None,
    target_height: int | None = None,
    segmentation: SuperpixelLabels | None = None,
) -> OcclusionPatch:
    """Cut a random superpixel out of a corpus image and pick a paste anchor.

    The anchor is drawn uniformly inside the target dimensions (defaults to
    the corpus image's own size). A precomputed ``segmentation`` skips the
    SLIC run; it must come from the same image and parameters.
    """
    if corpus_img.width < 32 or corpus_img.height < 32:
        raise ImageTooSmall("corpus image must be at least 32x32")
    params = slic_params or SlicParams()
    seg = segmentation or slic_segment(corpus_img, params.cluster_count, params.compactness)
    cluster_id = int(rng.integers(seg.cluster_count))
    tw = target_width if target_width is not None else corpus_img.width
    th = target_height if target_height is not None else corpus_img.height
    anchor = (int(rng.integers(tw)), int(rng.integers(th)))
    return extract_patch(corpus_img, seg, cluster_id, anchor)


def extract_patch(
    corpus_img: ImageBuffer, seg: SuperpixelLabels, cluster_id: int, anchor: tuple[int, int]
) -> OcclusionPatch:
    """Crop one labeled cluster to its bounding box as a paste-ready patch."""
    mask_full = seg.labels == cluster_id
    if not mask_full.any():
        raise ValueError(f"cluster {cluster_id} is empty")
    ys, xs = np.nonzero(mask_full)
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    return OcclusionPatch(
        pixels=corpus_img.pixels[y0:y1, x0:x1].copy(),
        mask=mask_full[y0:y1, x0:x1].copy(),
        anchor=anchor,
        cluster_id=cluster_id,
    )


def composite_occlusion(img: ImageBuffer, patch: OcclusionPatch) -> ImageBuffer:
    """Paste the patch at its anchor (top-left), clipping at borders.

    Only pixels under the translated mask change; everything else is
    bit-identical to the input.
    """
    ax, ay = patch.anchor
    if not (0 <= ax < img.width and 0 <= ay < img.height):
        raise ValueError(f"anchor {patch.anchor} outside image {img.width}x{img.height}")
    ph, pw = patch.mask.shape
    y1 = min(ay + ph, img.height)
    x1 = min(ax + pw, img.width)
    out = img.pixels.copy()
    sub_mask = patch.mask[: y1 - ay, : x1 - ax]
    region = out[ay:y1, ax:x1]
    region[sub_mask] = patch.pixels[: y1 - ay, : x1 - ax][sub_mask]
    return ImageBuffer(out)
