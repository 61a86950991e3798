"""Frozen prompt embedders and the binary embedding file format."""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (BadMagic, ChecksumMismatch, MixedCategories, ProviderFailure, ShapeMismatch,
                     TruncatedFile, VersionMismatch)
from .prompt_library import PromptInstance

EMB_MAGIC = b"MIGE"
EMB_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class PromptFeatureMatrix:
    values: np.ndarray  # float32, N x D
    category: int
    provider_id: str = "unknown"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"expected N x D matrix, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("prompt features contain NaN/Inf")

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


class EmbeddingProvider:
    """Interface: a frozen map from a prompt image to a D-vector."""

    provider_id = "abstract"
    dim = 0
    frozen = True

    def __call__(self, image: PromptInstance) -> np.ndarray:
        raise NotImplementedError


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an H x W x C float array."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def orientation_histogram(gray: np.ndarray, bins: int = 8) -> np.ndarray:
    """Fraction of pixels per unsigned gradient-orientation bin.

    Flat pixels have atan2(0, 0) = 0 and land in bin 0.
    """
    gy, gx = np.gradient(gray)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    idx = np.minimum((theta / (np.pi / bins)).astype(int), bins - 1)
    return np.bincount(idx.ravel(), minlength=bins).astype(np.float64) / idx.size


class ToyEmbedder(EmbeddingProvider):
    """Patch colour means + orientation histogram, randomly projected and L2-normalized."""

    provider_id = "toy-v1"
    size = 32
    patch = 4
    bins = 8

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        n_in = (self.size // self.patch) ** 2 * 3 + self.bins
        self.projection = np.random.default_rng(seed).standard_normal((n_in, dim)) / np.sqrt(n_in)
        self.projection.setflags(write=False)

    def features(self, pixels: np.ndarray) -> np.ndarray:
        img = np.asarray(pixels, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
            raise ValueError(f"malformed prompt image of shape {img.shape}")
        img = resize_bilinear(img / 255.0, self.size, self.size)
        g = self.size // self.patch
        means = img.reshape(g, self.patch, g, self.patch, 3).mean(axis=(1, 3)).ravel()
        hist = orientation_histogram(img.mean(axis=2), self.bins)
        return np.concatenate([means, hist])

    def __call__(self, image: PromptInstance) -> np.ndarray:
        v = self.features(image.pixels) @ self.projection
        return (v / np.linalg.norm(v)).astype(np.float32)


def toy_embed(image: PromptInstance, provider: ToyEmbedder | None = None) -> np.ndarray:
    return (provider or _default_toy())(image)


_TOY = None


def _default_toy() -> ToyEmbedder:
    global _TOY
    if _TOY is None:
        _TOY = ToyEmbedder()
    return _TOY


def embed_prompts(provider: EmbeddingProvider, prompts: Sequence[PromptInstance]) -> PromptFeatureMatrix:
    """Stack per-prompt embeddings row by row in input order."""
    if not prompts:
        raise ValueError("need at least one prompt")
    cats = {p.category for p in prompts}
    if len(cats) != 1:
        raise MixedCategories(f"prompts span categories {sorted(cats)}")
    rows = []
    for p in prompts:
        try:
            v = np.asarray(provider(p), dtype=np.float32)
        except Exception as exc:
            raise ProviderFailure(f"{provider.provider_id} failed on {p.source}") from exc
        if v.shape != (provider.dim,) or not np.isfinite(v).all():
            raise ProviderFailure(f"{provider.provider_id} returned bad vector for {p.source}")
        rows.append(v)
    return PromptFeatureMatrix(np.stack(rows), cats.pop(), provider.provider_id)


def save_embeddings(matrix: PromptFeatureMatrix, path: str | os.PathLike) -> None:
    payload = np.ascontiguousarray(matrix.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EMB_MAGIC, EMB_VERSION, matrix.N, matrix.D, matrix.category))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_embeddings(path: str | os.PathLike, expect_dim: int | None = None) -> PromptFeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != EMB_MAGIC:
        raise BadMagic(f"{path}: not an embedding file")
    if len(data) < _HEADER.size:
        raise TruncatedFile(f"{path}: header cut short")
    _, version, n, d, cat = _HEADER.unpack_from(data)
    if version != EMB_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {EMB_VERSION}")
    if expect_dim is not None and d != expect_dim:
        raise ShapeMismatch(f"{path}: width {d}, expected {expect_dim}")
    nbytes = n * d * 4
    if len(data) < _HEADER.size + nbytes + 4:
        raise TruncatedFile(f"{path}: header declares {n}x{d} but payload is short")
    if len(data) != _HEADER.size + nbytes + 4:
        raise ShapeMismatch(f"{path}: {len(data) - _HEADER.size - 4} payload bytes for {n}x{d}")
    payload = data[_HEADER.size:_HEADER.size + nbytes]
    (crc,) = struct.unpack_from("<I", data, _HEADER.size + nbytes)
    if crc != zlib.crc32(payload):
        raise ChecksumMismatch(f"{path}: payload CRC mismatch")
    values = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return PromptFeatureMatrix(values, cat, provider_id="file")
