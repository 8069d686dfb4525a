"""Write a small WAV corpus laid out like DCASE 2018 Task 1B, for smoke-testing the corpus pipeline.

Each scene is coloured noise with its own spectral peak; each device applies
its own first-order filter and gain, so the devices form separate domains.

    python scripts/toy_corpus.py data/toy --per-device A=40 B=10 C=10 --seconds 10
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

from adasc.data import SCENES, ManifestRow, write_manifest

DEVICE_FILTERS = {"A": (1.0, 0.0), "B": (0.6, 0.7), "C": (1.8, -0.6)}  # gain, pole


def scene_clip(scene: int, seconds: float, rate: int, rng: np.random.Generator) -> np.ndarray:
    n = int(seconds * rate)
    noise = rng.standard_normal(n)
    t = np.arange(n) / rate
    tone = np.sin(2 * np.pi * (300 + 400 * scene) * t + rng.uniform(0, 2 * np.pi))
    return 0.1 * noise + 0.2 * tone


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path)
    ap.add_argument("--per-device", nargs="+", default=["A=40", "B=10", "C=10"])
    ap.add_argument("--seconds", type=float, default=10.0)
    ap.add_argument("--rate", type=int, default=44100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    rows = []
    for spec in args.per_device:
        device, count = spec.split("=")
        gain, pole = DEVICE_FILTERS[device]
        for i in range(int(count)):
            scene = i % len(SCENES)
            x = lfilter([gain], [1.0, -pole], scene_clip(scene, args.seconds, args.rate, rng))
            x = np.clip(x / max(1.0, np.abs(x).max()), -1, 1)
            rel = Path("audio") / f"{SCENES[scene]}-{device}-{i:04d}.wav"
            (args.root / rel).parent.mkdir(parents=True, exist_ok=True)
            wavfile.write(args.root / rel, args.rate, (x * 32767).astype(np.int16))
            rows.append(ManifestRow(rel.stem, str(rel), device, SCENES[scene]))
    write_manifest(rows, args.root / "manifest.csv")
    print(f"wrote {len(rows)} clips to {args.root}")


if __name__ == "__main__":
    main()
