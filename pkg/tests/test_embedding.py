import itertools
import struct

import numpy as np
import pytest

from mig.embedding import (EMB_MAGIC, EmbeddingProvider, PromptFeatureMatrix, ToyEmbedder, embed_prompts,
                           load_embeddings, orientation_histogram, save_embeddings, toy_embed)
from mig.errors import (BadMagic, ChecksumMismatch, MixedCategories, ProviderFailure, ShapeMismatch, TruncatedFile,
                        VersionMismatch)
from mig.prompt_library import PromptInstance, build_library
from mig.synthetic_data import SceneSpec, generate


def _inst(seed=0, cat=1, shape=(9, 7)):
    px = np.random.default_rng(seed).integers(0, 256, size=shape + (3,), dtype=np.uint8)
    return PromptInstance(px, cat, ("train", seed, seed))


def test_constant_image_histogram_and_norm():
    flat = np.full((12, 12), 0.3)
    h = orientation_histogram(flat, 8)
    assert h[0] == pytest.approx(1.0) and np.all(h[1:] == 0)
    v = toy_embed(PromptInstance(np.full((5, 6, 3), 77, np.uint8), 1, ("train", 0, 0)))
    assert v.shape == (64,) and v.dtype == np.float32
    assert np.linalg.norm(v.astype(np.float64)) == pytest.approx(1.0, abs=1e-6)


def test_toy_embedding_is_frozen():
    p = _inst()
    assert np.array_equal(toy_embed(p), toy_embed(p))
    assert np.array_equal(ToyEmbedder()(p), ToyEmbedder()(p))


def test_embed_single_and_duplicates():
    p = _inst()
    m = embed_prompts(ToyEmbedder(), [p])
    assert m.values.shape == (1, 64) and np.array_equal(m.values[0], toy_embed(p))
    m2 = embed_prompts(ToyEmbedder(), [p, p])
    assert np.array_equal(m2.values[0], m2.values[1])


def test_embed_stacks_rowwise():
    e = ToyEmbedder()
    ps = [_inst(i, shape=(5 + i, 11 - i)) for i in range(8)]
    m = embed_prompts(e, ps)
    assert m.values.shape == (8, 64) and m.category == 1 and m.provider_id == "toy-v1"
    for i, p in enumerate(ps):
        assert np.array_equal(m.values[i], e(p))


def test_embed_errors():
    with pytest.raises(MixedCategories):
        embed_prompts(ToyEmbedder(), [_inst(0, 1), _inst(1, 2)])

    class Broken(EmbeddingProvider):
        provider_id, dim = "broken", 4

        def __call__(self, image):
            raise RuntimeError("boom")

    class Wrong(EmbeddingProvider):
        provider_id, dim = "wrong", 4

        def __call__(self, image):
            return np.full(4, np.nan)

    with pytest.raises(ProviderFailure):
        embed_prompts(Broken(), [_inst()])
    with pytest.raises(ProviderFailure):
        embed_prompts(Wrong(), [_inst()])
    with pytest.raises(ValueError):
        PromptFeatureMatrix(np.array([[np.inf]]), 1)


@pytest.fixture(scope="module")
def toy_clusters():
    lib = build_library(generate(SceneSpec(seed=0, outlier_rate=0.0), 60))
    e = ToyEmbedder()
    return {c: np.stack([e(i) for i in v]).astype(np.float64) for c, v in lib.instances.items()}


def test_same_shape_different_colour_fixture(toy_clusters):
    # frozen measurements: first striped-circle vs first dotted-circle, and the striped-circle pair mean
    a, b = toy_clusters[1][0], toy_clusters[4][0]
    cross = float(a @ b)
    intra = float(np.mean([x @ y for x, y in itertools.combinations(toy_clusters[1], 2)]))
    assert cross == pytest.approx(0.71030915, abs=1e-5)
    assert intra == pytest.approx(0.96803140, abs=1e-5)
    assert cross < intra


def test_intra_category_similarity_exceeds_inter(toy_clusters):
    E = toy_clusters
    intra = np.mean([(E[c] @ E[c].T)[np.triu_indices(len(E[c]), 1)].mean() for c in E])
    inter = np.mean([(E[c] @ E[d].T).mean() for c in E for d in E if c < d])
    assert intra > inter + 0.1


def test_file_roundtrip_bit_exact(tmp_path, rng):
    m = PromptFeatureMatrix(rng.standard_normal((8, 64)).astype(np.float32), 3, "x")
    save_embeddings(m, tmp_path / "a.mige")
    back = load_embeddings(tmp_path / "a.mige", expect_dim=64)
    assert back.values.tobytes() == m.values.tobytes()
    assert back.category == 3


def _write_raw(path, magic=EMB_MAGIC, version=1, n=8, d=4, rows=None, crc=None):
    import zlib
    rows = n if rows is None else rows
    payload = np.arange(rows * d, dtype="<f4").tobytes()
    path.write_bytes(struct.pack("<4sIIII", magic, version, n, d, 0) + payload
                     + struct.pack("<I", zlib.crc32(payload) if crc is None else crc))


def test_file_errors(tmp_path):
    p = tmp_path / "e.mige"
    _write_raw(p, magic=b"NOPE")
    with pytest.raises(BadMagic):
        load_embeddings(p)
    _write_raw(p, version=2)
    with pytest.raises(VersionMismatch):
        load_embeddings(p)
    _write_raw(p, n=8, rows=7)
    with pytest.raises(TruncatedFile):
        load_embeddings(p)
    _write_raw(p, n=7, rows=8)
    with pytest.raises(ShapeMismatch):
        load_embeddings(p)
    _write_raw(p, crc=0)
    with pytest.raises(ChecksumMismatch):
        load_embeddings(p)
    _write_raw(p)
    with pytest.raises(ShapeMismatch):
        load_embeddings(p, expect_dim=64)
    p.write_bytes(EMB_MAGIC + b"\x01")
    with pytest.raises(TruncatedFile):
        load_embeddings(p)
