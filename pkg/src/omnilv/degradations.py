"""Seeded degradation, enhancement and annotation operators on c×H×W images in [0, 1]."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])


class DegradationParamError(ValueError):
    pass


@dataclass(frozen=True)
class ParamRange:
    lo: float
    hi: float
    integer: bool = False

    def check(self, kind: str, name: str, value) -> float:
        v = float(value)
        if not (self.lo <= v <= self.hi) or (self.integer and v != int(v)):
            kind_s = "integer " if self.integer else ""
            raise DegradationParamError(
                f"{kind}: parameter {name!r}={value} outside {kind_s}range [{self.lo}, {self.hi}]"
            )
        return int(v) if self.integer else v


# Documented ranges; the first entry of each tuple is the identity value where one exists.
PARAM_RANGES: dict[str, dict[str, ParamRange]] = {
    "gaussian_blur": {"sigma": ParamRange(0.0, 4.0)},
    "motion_blur": {"length": ParamRange(1, 15, integer=True), "angle": ParamRange(0.0, 180.0)},
    "gaussian_noise": {"sigma": ParamRange(0.0, 0.5)},
    "poisson_noise": {"peak": ParamRange(1.0, 1000.0)},
    "pixelate": {"block": ParamRange(1, 16, integer=True)},
    "quantize_hist": {"levels": ParamRange(2, 256, integer=True)},
    "quantize_median": {"levels": ParamRange(2, 256, integer=True)},
    "quantize_otsu": {},
    "ringing": {"cutoff": ParamRange(0.05, 1.0)},
    "compress_dct": {"quality": ParamRange(1, 100, integer=True)},
    "brighten_gamma": {"gamma": ParamRange(0.1, 1.0)},
    "darken_gamma": {"gamma": ParamRange(1.0, 10.0)},
    "brighten_shift": {"shift": ParamRange(0.0, 1.0)},
    "darken_shift": {"shift": ParamRange(0.0, 1.0)},
    "contrast_scale": {"factor": ParamRange(0.0, 3.0)},
    "saturation_scale": {"factor": ParamRange(0.0, 3.0)},
    "oversharpen": {"amount": ParamRange(0.0, 5.0), "sigma": ParamRange(0.3, 3.0)},
    "mosaic": {"block": ParamRange(1, 16, integer=True)},
    "mask_inpaint": {"n_rects": ParamRange(0, 8, integer=True)},
    "grayscale": {},
    "canny": {"lo": ParamRange(1e-3, 4.0), "hi": ParamRange(1e-3, 4.0)},
    "identity": {},
    "invert": {},
}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def validated(self) -> dict:
        if self.kind not in PARAM_RANGES:
            raise DegradationParamError(f"unknown degradation kind {self.kind!r}")
        ranges = PARAM_RANGES[self.kind]
        extra = set(self.params) - set(ranges)
        if extra:
            raise DegradationParamError(f"{self.kind}: unexpected parameters {sorted(extra)}")
        missing = set(ranges) - set(self.params)
        if missing:
            raise DegradationParamError(f"{self.kind}: missing parameters {sorted(missing)}")
        out = {name: r.check(self.kind, name, self.params[name]) for name, r in ranges.items()}
        if self.kind == "canny" and out["lo"] > out["hi"]:
            raise DegradationParamError(f"canny: parameter 'lo'={out['lo']} must not exceed 'hi'={out['hi']}")
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}


def rng_for(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, salt)]))


# -- filtering primitives -------------------------------------------------------
def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur2d(plane: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian on the last two axes with mirrored borders."""
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(plane, k, axis=-1, mode="mirror")
    return ndimage.correlate1d(out, k, axis=-2, mode="mirror")


def luma(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, img, axes=(0, 0))


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Anti-aliased line kernel: samples along the segment splatted bilinearly."""
    size = length if length % 2 else length + 1
    c = size // 2
    kernel = np.zeros((size, size))
    rad = math.radians(angle)
    dx, dy = math.cos(rad), -math.sin(rad)
    half = (length - 1) / 2.0
    for s in np.linspace(-half, half, 8 * length + 1):
        x, y = c + s * dx, c + s * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for yy, xx, w in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
                          (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
            if 0 <= yy < size and 0 <= xx < size:
                kernel[yy, xx] += w
    return kernel / kernel.sum()


def _block_average(img: np.ndarray, block: int) -> np.ndarray:
    c, h, w = img.shape
    out = np.empty_like(img)
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = img[:, y:y + block, x:x + block]
            out[:, y:y + block, x:x + block] = tile.mean(axis=(1, 2), keepdims=True)
    return out


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximising between-class variance over a histogram on [0, 1].

    Returned as the upper edge of the last low-class bin, so ``values >= t`` is the high class.
    """
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist).astype(np.float64)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centers)
    m0 = np.divide(s0, w0, out=np.zeros_like(s0), where=w0 > 0)
    m1 = np.divide(s0[-1] - s0, w1, out=np.zeros_like(s0), where=w1 > 0)
    between = w0 * w1 * (m0 - m1) ** 2
    return float(edges[int(np.argmax(between)) + 1])


def _quantize_hist(ch: np.ndarray, levels: int) -> np.ndarray:
    flat = ch.reshape(-1)
    order = np.argsort(flat, kind="stable")
    n = flat.size
    labels = np.empty(n, dtype=np.int64)
    labels[order] = (np.arange(n) * levels) // n
    out = np.empty_like(flat)
    for k in range(levels):
        sel = labels == k
        if sel.any():
            out[sel] = flat[sel].mean()
    return out.reshape(ch.shape)


def _quantize_median(ch: np.ndarray, levels: int) -> np.ndarray:
    flat = ch.reshape(-1)
    labels = np.minimum((flat * levels).astype(np.int64), levels - 1)
    out = np.empty_like(flat)
    for k in np.unique(labels):
        sel = labels == k
        out[sel] = np.median(flat[sel])
    return out.reshape(ch.shape)


def _ringing(ch: np.ndarray, cutoff: float) -> np.ndarray:
    fy = np.fft.fftfreq(ch.shape[0])[:, None]
    fx = np.fft.fftfreq(ch.shape[1])[None, :]
    keep = np.sqrt(fy ** 2 + fx ** 2) <= cutoff * 0.5
    return np.real(np.fft.ifft2(np.fft.fft2(ch) * keep))


def _compress_dct(img: np.ndarray, quality: int) -> np.ndarray:
    scale = 50.0 / quality if quality < 50 else 2.0 - quality / 50.0
    step = 16.0 / 255.0 * scale
    if step == 0.0:
        return img.copy()
    c, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="symmetric")
    H, W = padded.shape[1:]
    blocks = padded.reshape(c, H // 8, 8, W // 8, 8).transpose(0, 1, 3, 2, 4)
    coef = sfft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / step) * step
    rec = sfft.idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, H, W)
    return rec[:, :h, :w]


def _mask_inpaint(img: np.ndarray, n_rects: int, rng: np.random.Generator) -> np.ndarray:
    out = img.copy()
    _, h, w = img.shape
    if n_rects == 0:
        return out
    budget = 0.25 * h * w / n_rects
    for _ in range(n_rects):
        rh = int(rng.integers(1, max(2, int(math.sqrt(budget)) + 1)))
        rw = int(rng.integers(1, max(2, int(budget // rh) + 1)))
        rw = min(rw, w)
        rh = min(rh, h)
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
        out[:, y:y + rh, x:x + rw] = 0.0
    return out


def canny_edges(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Binary edge map (H×W) via Gaussian smoothing, Sobel, NMS and hysteresis."""
    gray = luma(img) if img.ndim == 3 else img
    smooth = blur2d(gray, 1.0)
    gx = ndimage.correlate(smooth, np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], float), mode="mirror")
    gy = ndimage.correlate(smooth, np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], float), mode="mirror")
    mag = np.hypot(gx, gy)
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0

    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    def shifted(dy, dx):
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    sector = np.digitize(angle, [22.5, 67.5, 112.5, 157.5]) % 4
    # neighbour offsets across the edge for gradient directions 0, 45, 90, 135 degrees (y down)
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros_like(mag, dtype=bool)
    for s, (dy, dx) in offsets.items():
        sel = sector == s
        keep |= sel & (mag >= shifted(dy, dx)) & (mag >= shifted(-dy, -dx))
    nms = np.where(keep, mag, 0.0)

    strong = nms >= hi
    candidate = nms >= lo
    labels, count = ndimage.label(candidate, structure=np.ones((3, 3)))
    if count == 0:
        return np.zeros_like(mag)
    connected = np.zeros(count + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    return connected[labels].astype(np.float64)


# -- dispatch -------------------------------------------------------------------
def apply(spec: DegradationSpec, img: np.ndarray) -> np.ndarray:
    """Apply one operator; output is clamped to [0, 1] and a pure function of (spec, img)."""
    p = spec.validated()
    k = spec.kind
    img = np.asarray(img, dtype=np.float64)
    rng = rng_for(spec.seed, 0x0D15)

    if k == "gaussian_blur":
        out = img.copy() if p["sigma"] == 0 else blur2d(img, p["sigma"])
    elif k == "motion_blur":
        if p["length"] == 1:
            out = img.copy()
        else:
            kern = motion_kernel(p["length"], p["angle"])
            out = np.stack([ndimage.correlate(ch, kern, mode="mirror") for ch in img])
    elif k == "gaussian_noise":
        out = img.copy() if p["sigma"] == 0 else img + p["sigma"] * rng.standard_normal(img.shape)
    elif k == "poisson_noise":
        out = rng.poisson(np.clip(img, 0, 1) * p["peak"]) / p["peak"]
    elif k in ("pixelate", "mosaic"):
        out = img.copy() if p["block"] == 1 else _block_average(img, p["block"])
    elif k == "quantize_hist":
        out = np.stack([_quantize_hist(ch, p["levels"]) for ch in img])
    elif k == "quantize_median":
        out = np.stack([_quantize_median(ch, p["levels"]) for ch in img])
    elif k == "quantize_otsu":
        out = np.stack([(ch >= otsu_threshold(ch)).astype(np.float64) for ch in img])
    elif k == "ringing":
        out = np.stack([_ringing(ch, p["cutoff"]) for ch in img])
    elif k == "compress_dct":
        out = _compress_dct(img, p["quality"])
    elif k in ("brighten_gamma", "darken_gamma"):
        out = img.copy() if p["gamma"] == 1 else np.clip(img, 0, 1) ** p["gamma"]
    elif k == "brighten_shift":
        out = img + p["shift"]
    elif k == "darken_shift":
        out = img - p["shift"]
    elif k == "contrast_scale":
        out = img.copy() if p["factor"] == 1 else 0.5 + p["factor"] * (img - 0.5)
    elif k == "saturation_scale":
        if p["factor"] == 1:
            out = img.copy()
        else:
            y = luma(img)[None]
            out = y + p["factor"] * (img - y)
    elif k == "oversharpen":
        out = img.copy() if p["amount"] == 0 else img + p["amount"] * (img - blur2d(img, p["sigma"]))
    elif k == "mask_inpaint":
        out = _mask_inpaint(img, p["n_rects"], rng)
    elif k == "grayscale":
        out = np.repeat(luma(img)[None], img.shape[0], axis=0)
    elif k == "canny":
        out = np.repeat(canny_edges(img, p["lo"], p["hi"])[None], img.shape[0], axis=0)
    elif k == "identity":
        out = img.copy()
    elif k == "invert":
        out = 1.0 - img
    else:  # pragma: no cover - guarded by validated()
        raise DegradationParamError(f"unknown degradation kind {k!r}")
    return np.clip(out, 0.0, 1.0)


# -- clean image synthesis ------------------------------------------------------
def gen_clean(seed: int, size: int = 32, channels: int = 3) -> np.ndarray:
    """Procedural HQ image: gradient background, shapes, a sinusoid patch and soft strokes."""
    rng = rng_for(seed, 0xC1EA)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    corners = rng.uniform(0.1, 0.9, size=(4, channels))
    img = (corners[0][:, None, None] * (1 - yy) * (1 - xx) + corners[1][:, None, None] * (1 - yy) * xx
           + corners[2][:, None, None] * yy * (1 - xx) + corners[3][:, None, None] * yy * xx)

    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0, 1, size=channels)[:, None, None]
        y0, x0 = rng.uniform(0, 0.8, size=2)
        hgt, wid = rng.uniform(0.15, 0.5, size=2)
        mask = (yy >= y0) & (yy <= y0 + hgt) & (xx >= x0) & (xx <= x0 + wid)
        img = np.where(mask[None], color, img)

    for _ in range(int(rng.integers(1, 4))):
        color = rng.uniform(0, 1, size=channels)[:, None, None]
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.08, 0.25)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        cover = np.clip((r - d) * size + 0.5, 0.0, 1.0)
        img = img * (1 - cover[None]) + color * cover[None]

    freq = rng.uniform(3.0, 9.0)
    theta = rng.uniform(0, math.pi)
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    y0, x0 = rng.uniform(0, 0.6, size=2)
    region = (yy >= y0) & (yy <= y0 + 0.4) & (xx >= x0) & (xx <= x0 + 0.4)
    tint = rng.uniform(0, 1, size=channels)[:, None, None]
    img = np.where(region[None], 0.5 * img + 0.5 * wave[None] * tint, img)

    for _ in range(int(rng.integers(1, 3))):
        color = rng.uniform(0, 1, size=channels)[:, None, None]
        (ay, ax), (by, bx) = rng.uniform(0, 1, size=(2, 2))
        width = rng.uniform(0.6, 1.6) / size
        vy, vx = by - ay, bx - ax
        seg = max(vy * vy + vx * vx, 1e-12)
        s = np.clip(((yy - ay) * vy + (xx - ax) * vx) / seg, 0, 1)
        dist = np.sqrt((yy - ay - s * vy) ** 2 + (xx - ax - s * vx) ** 2)
        cover = np.clip((width - dist) * size + 0.5, 0.0, 1.0)
        img = img * (1 - cover[None]) + color * cover[None]

    return np.clip(img, 0.0, 1.0)


def mean_abs_laplacian(img: np.ndarray) -> float:
    return float(np.mean(np.abs(np.stack([ndimage.laplace(ch, mode="mirror") for ch in img]))))
