import numpy as np
import pytest

from vecs_io import SyntheticSpec, gen_synthetic, read_fvecs, read_ivecs, write_fvecs, write_ivecs


def test_fvecs_round_trip_is_bit_exact(tmp_path):
    path = str(tmp_path / "base.fvecs")
    data = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    write_fvecs(data, path)
    ds = read_fvecs(path)
    assert ds.vectors.tobytes() == data.tobytes()
    assert (tmp_path / "base.fvecs").stat().st_size == 7 * (4 + 5 * 4)


def test_ivecs_round_trip(tmp_path):
    path = str(tmp_path / "gt.ivecs")
    ids = np.arange(12, dtype=np.int32).reshape(3, 4)
    write_ivecs(ids, path)
    assert np.array_equal(read_ivecs(path), ids)


def test_empty_files(tmp_path):
    empty = tmp_path / "empty.ivecs"
    empty.write_bytes(b"")
    assert read_ivecs(str(empty)).shape == (0, 0)
    with pytest.raises(ValueError, match="empty"):
        read_fvecs(str(empty))


def test_truncated_file_is_rejected(tmp_path):
    path = tmp_path / "cut.fvecs"
    write_fvecs(np.ones((3, 4), dtype=np.float32), str(path))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="Truncated"):
        read_fvecs(str(path))
    path.write_bytes(raw[:-2])
    with pytest.raises(ValueError, match="Truncated"):
        read_fvecs(str(path))


def test_inconsistent_dimension_names_the_record(tmp_path):
    path = tmp_path / "mixed.fvecs"
    first = np.concatenate([[3], np.ones(3)]).astype("<i4")
    second = np.concatenate([[2], np.ones(3)]).astype("<i4")
    path.write_bytes(first.tobytes() + second.tobytes())
    with pytest.raises(ValueError, match="record 1"):
        read_fvecs(str(path))


def test_nan_payload_names_the_record(tmp_path):
    path = str(tmp_path / "nan.fvecs")
    data = np.zeros((4, 3), dtype=np.float32)
    data[2, 0] = np.nan
    write_fvecs(data, path)
    with pytest.raises(ValueError, match="record 2"):
        read_fvecs(path)


def test_synthetic_is_seeded():
    spec = SyntheticSpec(100, 16, seed=3)
    assert np.array_equal(gen_synthetic(spec).vectors, gen_synthetic(SyntheticSpec(100, 16, seed=3)).vectors)
    assert not np.array_equal(gen_synthetic(spec).vectors, gen_synthetic(SyntheticSpec(100, 16, seed=4)).vectors)


def test_low_rank_spectrum():
    ds = gen_synthetic(SyntheticSpec(400, 64, "low-rank", seed=1, rank=8))
    x = ds.vectors.astype(np.float64)
    eig = np.sort(np.linalg.eigvalsh(np.cov(x.T)))[::-1]
    assert eig[:8].sum() / eig.sum() > 0.99


def test_concat_tokens_repeats_pool_entries():
    spec = SyntheticSpec(50, 12, "concat-tokens", seed=2, token_dim=4, token_pool=3)
    ds = gen_synthetic(spec)
    tokens = ds.vectors.reshape(-1, 4)
    assert len(np.unique(tokens, axis=0)) <= 3


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(10, 8, "uniform")
    with pytest.raises(ValueError):
        SyntheticSpec(10, 8, "low-rank", rank=9)
    with pytest.raises(ValueError):
        SyntheticSpec(10, 8, "concat-tokens", token_dim=3)
    with pytest.raises(ValueError, match="colour"):
        SyntheticSpec.from_dict({"n": 10, "dim": 4, "colour": "red"})
    spec = SyntheticSpec.from_dict({"n": 10, "dim": 4}, seed=9)
    assert spec.seed == 9
    assert "isotropic-gaussian" in spec.describe()
