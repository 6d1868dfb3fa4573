"""Desk-scale toy services for the startup experiments.

Each app keeps its whole state in sandbox pages.  ``init`` builds that state
from scratch (what a cold start pays for) and ``request`` serves one call by
touching only a slice of it, so a resumed sandbox faults in just that slice.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .hibernate import Sandbox
from .pagealloc import PAGE_SIZE

FLOATS_PER_PAGE = PAGE_SIZE // 8
TILE = 64  # one 64x64 greyscale tile per page


@dataclass
class ToyApp:
    name = "toy"
    pages: int = 1024
    touch_fraction: float = 0.1
    seed: int = 0

    def touched(self) -> list[int]:
        rng = np.random.default_rng(self.seed)
        k = max(1, int(round(self.pages * self.touch_fraction)))
        return sorted(int(v) for v in rng.choice(self.pages, size=k, replace=False))

    def init(self, sandbox: Sandbox) -> None:
        raise NotImplementedError

    def request(self, sandbox: Sandbox) -> str:
        raise NotImplementedError


class FloatOpApp(ToyApp):
    """Each page holds 512 float64 samples of a damped oscillator; a request
    integrates a subset of them."""

    name = "float_op"

    def init(self, sandbox: Sandbox) -> None:
        for vpn in range(self.pages):
            t = np.linspace(vpn, vpn + 1, FLOATS_PER_PAGE, endpoint=False)
            x = np.exp(-t / self.pages) * np.sin(2 * np.pi * t) + 0.5 * np.cos(7.3 * t) ** 3
            for _ in range(8):  # a few relaxation sweeps stand in for runtime warm-up
                x = 0.5 * x + 0.25 * (np.roll(x, 1) + np.roll(x, -1))
            sandbox.map_page(vpn, x.astype("<f8").view(np.uint8))

    def request(self, sandbox: Sandbox) -> str:
        acc = 0.0
        for vpn in self.touched():
            x = np.frombuffer(sandbox.access_page(vpn), dtype="<f8")
            acc += float(np.sum(x * x) - np.sum(np.abs(x)))
        return f"{acc:.12e}"


class ImageApp(ToyApp):
    """Pages are 64x64 tiles of a synthetic image; a request inverts and
    box-blurs a subset of tiles and returns a digest of the output."""

    name = "image"

    def init(self, sandbox: Sandbox) -> None:
        rng = np.random.default_rng(self.seed)
        yy, xx = np.mgrid[0:TILE, 0:TILE]
        for vpn in range(self.pages):
            base = (xx * (vpn % 7 + 1) + yy * (vpn % 5 + 1)) % 256
            noise = rng.integers(0, 32, size=(TILE, TILE))
            tile = np.clip(base + noise, 0, 255).astype(np.uint8)
            sandbox.map_page(vpn, tile.reshape(-1))

    def request(self, sandbox: Sandbox) -> str:
        h = hashlib.sha256()
        for vpn in self.touched():
            tile = 255 - np.frombuffer(sandbox.access_page(vpn), dtype=np.uint8).reshape(TILE, TILE).astype(np.int32)
            padded = np.pad(tile, 1, mode="edge")
            blur = sum(padded[dy:dy + TILE, dx:dx + TILE] for dy in range(3) for dx in range(3)) // 9
            h.update(blur.astype(np.uint8).tobytes())
        return h.hexdigest()[:16]


APPS = {cls.name: cls for cls in (FloatOpApp, ImageApp)}


def make_app(name: str, pages: int = 1024, touch_fraction: float = 0.1, seed: int = 0) -> ToyApp:
    try:
        return APPS[name](pages, touch_fraction, seed)
    except KeyError:
        raise ValueError(f"unknown app {name!r}; choose from {sorted(APPS)}") from None
