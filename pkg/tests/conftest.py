"""Shared fixtures: synthetic images, sim worlds, and workspaces."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from fpengine.config import EngineConfig
from fpengine import orchestrator, simkit


def natural_image(seed: int = 0, size: tuple[int, int] = (96, 96)) -> Image.Image:
    """Textured grayscale image with a spread spectrum (sinusoid mixture
    plus soft blobs); hash-stable under re-encoding, unlike flat or
    single-frequency patterns."""
    w, h = size
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros((h, w))
    for _ in range(10):
        fx, fy = rng.uniform(0.5, 5, 2)
        amp = rng.uniform(0.3, 1.0) / max(fx, fy)
        phase = rng.uniform(0, 2 * np.pi)
        img += amp * np.sin(2 * np.pi * (fx * xs / w + fy * ys / h) + phase)
    for _ in range(4):
        cx, cy = rng.uniform(0.2, 0.8, 2) * [w, h]
        r = rng.uniform(8, 25)
        img += rng.uniform(0.4, 1.0) * np.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r)))
    img = (img - img.min()) / (img.max() - img.min())
    return Image.fromarray((img * 255).astype(np.uint8), mode="L")


def noise_image(seed: int, size: tuple[int, int] = (96, 96)) -> Image.Image:
    rng = np.random.default_rng(seed)
    return Image.fromarray(rng.integers(0, 256, size=size[::-1], dtype=np.uint8), mode="L")


def png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def jpeg_bytes(img: Image.Image, quality: int = 95) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=quality)
    return buf.getvalue()


@pytest.fixture
def small_world() -> simkit.SimWorld:
    return simkit.generate_world(seed=11, k=3, dim=32, pool_size=600, dev_size=90, test_size=30)


def make_workspace(root: Path, world: simkit.SimWorld, **overrides) -> orchestrator.Workspace:
    base = {
        "seed": world.seed,
        "budget": 40,
        "model": f"mock:{world.seed}",
        "oracle": f"mock:{world.seed}",
        "trainer": f"mock:{world.seed}",
        "embedder": f"mock:{world.seed}",
        "scorer": f"mock:{world.seed}",
        "reviewer": f"mock:{world.seed}",
    }
    base.update(overrides)
    config = EngineConfig().with_overrides(**base)
    ws = orchestrator.init_workspace(root, config, dim=world.dim, k=world.k)
    world.save(ws.root / "world.json")
    world.ingest_into(ws.store())
    return ws


@pytest.fixture
def sim_workspace(tmp_path, small_world) -> orchestrator.Workspace:
    return make_workspace(tmp_path / "ws", small_world)


def pytest_runtest_logreport(report):
    """One pass/fail line per acceptance criterion."""
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1].removeprefix("test_")
        print(f"\n[acceptance] {name}: {'PASS' if report.passed else 'FAIL'}")
