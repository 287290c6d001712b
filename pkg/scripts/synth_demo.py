"""Render a small street-like scene and its night, rain and haze versions.

    python scripts/synth_demo.py --out demo_out
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from weatherda import weathergen as W
from weatherda.cli import main as cli_main


def make_scene(h: int = 96, w: int = 160) -> tuple[W.ImageRGB, W.DepthMap]:
    rows = np.linspace(0.0, 1.0, h)[:, None]
    cols = np.linspace(0.0, 1.0, w)[None, :]
    sky = rows < 0.45
    img = np.empty((h, w, 3))
    img[...] = np.where(sky[..., None], [0.55, 0.7, 0.9], [0.35, 0.35, 0.33])
    # a couple of blocky "cars"
    for x0, x1, colour in ((0.15, 0.3, (0.8, 0.1, 0.1)), (0.6, 0.72, (0.1, 0.3, 0.8))):
        m = (rows > 0.6) & (rows < 0.75) & (cols > x0) & (cols < x1)
        img[m] = colour
    # depth grows towards the horizon, sky far away
    depth = np.where(sky, 80.0, 2.0 + 40.0 * (1.0 - rows) ** 2 * np.ones_like(cols))
    return W.ImageRGB(np.clip(img, 0, 1)), W.DepthMap(depth)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    out = Path(args.out)
    src, depth_dir = out / "source", out / "depth"
    src.mkdir(parents=True, exist_ok=True)
    depth_dir.mkdir(parents=True, exist_ok=True)
    image, depth = make_scene()
    W.save_png(image, src / "street.png")
    W.save_depth_raw(depth, depth_dir / "street.depth")
    for domain in ("night", "rain", "haze"):
        code = cli_main(["synth", "--input", str(src), "--depth", str(depth_dir), "--domain", domain,
                         "--seed", str(args.seed), "--out", str(out / domain)])
        if code:
            return code
        print(f"{domain}: {out / domain}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
