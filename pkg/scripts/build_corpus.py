#!/usr/bin/env python3
"""Collect a small natural-photo corpus from images bundled with Python packages.

Installed packages (scikit-image, matplotlib, scikit-learn) are read in place;
the remaining photos come out of wheels fetched with ``pip download`` into a
scratch directory. Every photo is converted to RGB and shrunk so its longer
side is at most ``--max-side`` pixels, then written as PNG.

    python scripts/build_corpus.py --out tests/data/corpus
"""

import argparse
import bz2
import importlib.util
import io
import pickle
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image

INSTALLED = {
    "skimage": [
        "data/astronaut.png", "data/chelsea.png", "data/coffee.png", "data/motorcycle_left.png",
        "data/motorcycle_right.png", "data/ihc.png", "data/rocket.jpg", "data/hubble_deep_field.jpg",
        "data/retina.jpg",
    ],
    "matplotlib": ["mpl-data/sample_data/grace_hopper.jpg"],
    "sklearn": ["datasets/images/china.jpg", "datasets/images/flower.jpg"],
}

WHEELS = {
    "scipy==1.9.3": ["scipy/misc/face.dat"],
    "mahotas==1.4.19": ["mahotas/demos/data/DepartmentStore.jpg", "mahotas/demos/data/luispedro.jpg"],
    "ultralytics==8.4.177": ["ultralytics/assets/bus.jpg", "ultralytics/assets/zidane.jpg"],
    "imgaug==0.4.0": ["imgaug/quokka.jpg"],
    "insightface==2.1": [
        # mask_white.jpg is skipped: a flat synthetic template with no chroma
        "insightface/data/images/t1.jpg",
        "insightface/data/images/mask_blue.jpg", "insightface/data/images/mask_black.jpg",
    ],
}


def decode(name: str, raw: bytes) -> Image.Image:
    if name.endswith("face.dat"):
        # scipy.misc.face: bz2-compressed raw 768x1024 RGB bytes
        buf = bz2.decompress(raw)
        return Image.fromarray(np.frombuffer(buf, dtype=np.uint8).reshape(768, 1024, 3))
    return Image.open(io.BytesIO(raw))


def save(im: Image.Image, out: Path, stem: str, max_side: int) -> Path:
    im = im.convert("RGB")
    scale = max_side / max(im.size)
    if scale < 1:
        im = im.resize((round(im.width * scale), round(im.height * scale)), Image.LANCZOS)
    path = out / f"{stem}.png"
    im.save(path, optimize=True)
    return path


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-side", type=int, default=384)
    p.add_argument("--wheels", type=Path, help="directory with pre-downloaded wheels")
    args = p.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    sources = []

    for pkg, files in INSTALLED.items():
        spec = importlib.util.find_spec(pkg)
        if spec is None:
            print(f"skip {pkg}: not installed", file=sys.stderr)
            continue
        root = Path(spec.origin).parent
        for rel in files:
            path = save(Image.open(root / rel), args.out, Path(rel).stem, args.max_side)
            sources.append(f"{path.name}\t{pkg}/{rel}")

    with tempfile.TemporaryDirectory() as tmp:
        wheel_dir = args.wheels or Path(tmp)
        for req, files in WHEELS.items():
            name = req.split("==")[0]
            found = list(wheel_dir.glob(f"{name}-*.whl"))
            if not found:
                subprocess.run(
                    [sys.executable, "-m", "pip", "download", "--no-deps", "-q", req, "-d", str(wheel_dir)], check=True
                )
                found = list(wheel_dir.glob(f"{name}-*.whl"))
            with zipfile.ZipFile(found[0]) as z:
                for rel in files:
                    path = save(decode(rel, z.read(rel)), args.out, Path(rel).stem, args.max_side)
                    sources.append(f"{path.name}\t{req}:{rel}")

    (args.out / "SOURCES.txt").write_text("\n".join(sources) + "\n")
    print(f"{len(sources)} images -> {args.out}")


if __name__ == "__main__":
    main()
