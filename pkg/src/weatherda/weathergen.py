"""Haze, rain and low-light synthesis from clear images.

Haze follows the scattering model H = J t + A (1 - t) with a transmission
derived from a depth map. Rain seeds a sparse noise layer, smears it with a
directional line kernel and alpha-blends it over the image. Night is a
parametric gamma/gain/colour-shift stand-in for a learned translator.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import DomainTag

HAZE_BETA = (0.6, 1.4)
HAZE_A = (0.7, 1.0)
RAIN_RHO = (0.02, 0.06)
RAIN_LENGTH = (7.0, 15.0)
RAIN_THETA = (-15.0, 15.0)
RAIN_KERNELS = (7, 9, 11)
RAIN_ALPHA = (0.15, 0.35)
NIGHT_GAMMA = (1.8, 2.6)
NIGHT_GAIN = (0.25, 0.45)
NIGHT_BLUE_SHIFT = (0.0, 0.0, 0.03)

DEPTH_MAGIC = b"WDADEPTH"


@dataclass(frozen=True)
class ImageRGB:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 3 or d.shape[0] == 0 or d.shape[1] == 0:
            raise ValueError(f"expected an (H, W, 3) image, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", np.clip(d, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class DepthMap:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 2 or d.size == 0:
            raise ValueError(f"expected an (H, W) depth map, got shape {d.shape}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ValueError("depth must be finite and non-negative")
        object.__setattr__(self, "data", d)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class HazeParams:
    beta: float
    A: tuple[float, float, float]

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        a = tuple(float(v) for v in np.broadcast_to(self.A, 3))
        if any(not 0.0 <= v <= 1.0 for v in a):
            raise ValueError("atmospheric light must lie in [0, 1]")
        object.__setattr__(self, "A", a)


@dataclass(frozen=True)
class RainParams:
    rho: float
    L: float
    theta: float
    k: int
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.L < 1:
            raise ValueError("streak length must be >= 1")
        if int(self.k) != self.k or self.k < 3 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd and >= 3, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        object.__setattr__(self, "k", int(self.k))


@dataclass(frozen=True)
class NightParams:
    gamma: float
    gain: float
    blue_shift: tuple[float, float, float] = NIGHT_BLUE_SHIFT

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0.0 <= self.gain <= 1.0:
            raise ValueError("gain must lie in [0, 1]")
        object.__setattr__(self, "blue_shift", tuple(float(v) for v in np.broadcast_to(self.blue_shift, 3)))


def rng_for(seed: int, index: int = 0) -> np.random.Generator:
    """Independent stream per (seed, image index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def transmission_from_depth(depth: DepthMap | np.ndarray, beta: float) -> np.ndarray:
    """t = exp(-beta * d) with d the depth min-max scaled to [0, 1].

    A constant depth map has no range and maps to t == 1 everywhere.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    d = depth.data if isinstance(depth, DepthMap) else DepthMap(depth).data
    lo, hi = d.min(), d.max()
    dn = np.zeros_like(d) if hi == lo else (d - lo) / (hi - lo)
    return np.exp(-beta * dn)


def apply_haze(image: ImageRGB, t: np.ndarray, A) -> ImageRGB:
    t = np.asarray(t, dtype=np.float64)
    if t.shape != image.data.shape[:2]:
        raise ValueError(f"transmission shape {t.shape} != image shape {image.data.shape[:2]}")
    a = np.broadcast_to(np.asarray(A, dtype=np.float64), 3)
    t3 = t[..., None]
    return ImageRGB(image.data * t3 + a * (1.0 - t3))


def motion_blur_kernel(k: int, length: float, theta_deg: float) -> np.ndarray:
    """Normalised k x k line kernel; theta is measured from the vertical axis.

    The streak is clipped to the kernel, so its effective length is min(length, k).
    """
    if k < 1 or k % 2 == 0:
        raise ValueError("kernel size must be odd")
    eff = min(float(length), float(k))
    c = (k - 1) / 2.0
    kernel = np.zeros((k, k))
    th = math.radians(theta_deg)
    half = (eff - 1.0) / 2.0
    for t in np.linspace(-half, half, max(2, 4 * int(math.ceil(eff)))):
        r = int(round(c + t * math.cos(th)))
        q = int(round(c + t * math.sin(th)))
        if 0 <= r < k and 0 <= q < k:
            kernel[r, q] = 1.0
    return kernel / kernel.sum()


def rain_streaks(shape: tuple[int, int], params: RainParams, rng: np.random.Generator) -> np.ndarray:
    noise = (rng.random(shape) < params.rho).astype(np.float64)
    kernel = motion_blur_kernel(params.k, params.L, params.theta)
    return np.clip(ndimage.convolve(noise, kernel, mode="constant", cval=0.0), 0.0, 1.0)


def synth_rain(image: ImageRGB, params: RainParams, rng: np.random.Generator) -> ImageRGB:
    streaks = rain_streaks(image.data.shape[:2], params, rng)
    a = params.alpha
    return ImageRGB((1.0 - a) * image.data + a * streaks[..., None])


def apply_night(image: ImageRGB, params: NightParams) -> ImageRGB:
    out = params.gain * image.data ** params.gamma + np.asarray(params.blue_shift)
    return ImageRGB(out)


def sample_weather_params(domain: DomainTag | str, rng: np.random.Generator):
    domain = DomainTag.parse(domain)
    if domain is DomainTag.HAZE:
        a = float(rng.uniform(*HAZE_A))
        return HazeParams(float(rng.uniform(*HAZE_BETA)), (a, a, a))
    if domain is DomainTag.RAIN:
        return RainParams(rho=float(rng.uniform(*RAIN_RHO)), L=float(rng.uniform(*RAIN_LENGTH)),
                          theta=float(rng.uniform(*RAIN_THETA)), k=int(rng.choice(RAIN_KERNELS)),
                          alpha=float(rng.uniform(*RAIN_ALPHA)))
    if domain is DomainTag.NIGHT:
        return NightParams(gamma=float(rng.uniform(*NIGHT_GAMMA)), gain=float(rng.uniform(*NIGHT_GAIN)))
    raise ValueError("weather parameters are only defined for target domains")


def synthesize(image: ImageRGB, domain: DomainTag | str, rng: np.random.Generator,
               depth: DepthMap | None = None, params=None):
    """Draw parameters (unless given) and render one image. Returns (image, params)."""
    domain = DomainTag.parse(domain)
    params = params or sample_weather_params(domain, rng)
    if domain is DomainTag.HAZE:
        if depth is None:
            raise ValueError("haze synthesis needs a depth map")
        if depth.shape != image.data.shape[:2]:
            raise ValueError("depth and image sizes differ")
        t = transmission_from_depth(depth, params.beta)
        return apply_haze(image, t, params.A), params
    if domain is DomainTag.RAIN:
        return synth_rain(image, params, rng), params
    return apply_night(image, params), params


# -- file formats ------------------------------------------------------------

def load_png(path) -> ImageRGB:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ImageRGB(arr)


def save_png(image: ImageRGB, path) -> None:
    arr = np.round(image.data * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def save_depth_raw(depth: DepthMap, path) -> None:
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + f"\n{h} {w}\n".encode())
        fh.write(depth.data.astype("<f4").tobytes())


def save_depth_png16(depth: DepthMap, path, scale: float = 256.0) -> None:
    arr = np.clip(np.round(depth.data * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def load_depth(path) -> DepthMap:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(len(DEPTH_MAGIC))
        if head == DEPTH_MAGIC:
            fh.readline()
            h, w = (int(v) for v in fh.readline().split())
            buf = fh.read(4 * h * w)
            return DepthMap(np.frombuffer(buf, dtype="<f4").reshape(h, w).astype(np.float64))
    with Image.open(path) as im:
        return DepthMap(np.asarray(im, dtype=np.float64))


def write_sidecar(path, domain: DomainTag, params, seed: int, index: int, source: str) -> None:
    rec = {"domain": domain.value, "seed": int(seed), "index": int(index),
           "source": source, "params": asdict(params)}
    Path(path).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")

