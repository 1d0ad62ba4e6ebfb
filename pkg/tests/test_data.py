import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from infomae.data import (
    WorldConfig,
    export_dataset,
    generate_world,
    labeled_split,
    load_dataset,
    paired_count,
    quantize_angle,
    sample_paired_batch,
    sample_paired_sequence_batch,
    sample_sequence_batch,
    iter_paired_epoch,
)


def identity_world(**kw):
    base = dict(
        shared_dim=1, private_dim=1, channels=1, intervals=1, spectrum=2,
        mixing="identity", observation_noise_sigma=0.0, pair_ratio=1.0, labeled_fraction=0.0,
    )
    base.update(kw)
    return WorldConfig(**base)


def test_identity_mixing_without_noise_reproduces_latents():
    ds = generate_world(identity_world(num_sequences=5, sequence_length=7), seed=0)
    for i in range(2):
        latent = np.concatenate([ds.shared_latent, ds.private_latent[i]], axis=1)
        np.testing.assert_array_equal(ds.tensors[i].reshape(len(ds), -1), latent.astype(np.float32))


def test_shared_coordinates_agree_and_private_ones_do_not():
    ds = generate_world(identity_world(num_sequences=100, sequence_length=100, latent_walk_rho=0.0), seed=1)
    idx = ds.paired_indices()
    assert len(idx) == 10_000
    a = ds.tensors[0].reshape(len(ds), -1)[idx]
    b = ds.tensors[1].reshape(len(ds), -1)[idx]
    assert np.corrcoef(a[:, 0], b[:, 0])[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert abs(np.corrcoef(a[:, 1], b[:, 1])[0, 1]) < 0.03


def test_ceiling_pair_count():
    assert paired_count(0.05, 39_609) == 1981
    assert paired_count(0.05, 2000) == 100
    cfg = identity_world(num_sequences=163, sequence_length=243, pair_ratio=0.05)
    assert cfg.num_windows == 39_609
    assert generate_world(cfg, 0).num_pairs == 1981


@given(st.floats(0.001, 1.0), st.integers(1, 5000))
def test_pair_count_is_a_ceiling(ratio, n):
    k = paired_count(ratio, n)
    assert k >= ratio * n - 1e-9
    assert k - 1 < ratio * n + 1e-9


@pytest.mark.parametrize(
    "field,value",
    [("shared_dim", 0), ("num_modalities", 1), ("pair_ratio", 0.0), ("pair_ratio", 1.5), ("latent_walk_rho", 1.0), ("num_classes", 1)],
)
def test_invalid_configs_name_the_field(field, value):
    with pytest.raises(ValueError, match=field):
        WorldConfig(**{field: value}).validate()


def test_observation_must_fit_latents():
    with pytest.raises(ValueError, match="C\\*I\\*S"):
        WorldConfig(intervals=1, spectrum=2, shared_dim=2, private_dim=2).validate()


def test_regeneration_is_bit_exact(small_world_config):
    a = generate_world(small_world_config, 5)
    b = generate_world(small_world_config, 5)
    for x, y in zip(a.tensors, b.tensors):
        assert x.tobytes() == y.tobytes()
    assert np.array_equal(a.pair_id, b.pair_id)


def test_pairing_does_not_touch_latents(small_world):
    other = small_world.with_pair_ratio(0.9)
    assert other.num_pairs > small_world.num_pairs
    assert np.array_equal(other.shared_latent, small_world.shared_latent)
    assert all(np.array_equal(a, b) for a, b in zip(other.tensors, small_world.tensors))


def test_labels_depend_only_on_shared_latent(small_world):
    rng = np.random.default_rng(0)
    shuffled = [p[rng.permutation(len(p))] for p in small_world.private_latent]
    assert not np.array_equal(shuffled[0], small_world.private_latent[0])
    assert np.array_equal(quantize_angle(small_world.shared_latent, 4), small_world.label)


def test_angle_quantization_is_balanced():
    z = np.random.default_rng(0).standard_normal((40_000, 2))
    counts = np.bincount(quantize_angle(z, 4), minlength=4) / len(z)
    np.testing.assert_allclose(counts, 0.25, atol=0.01)


def test_lag_one_autocorrelation_matches_rho():
    cfg = identity_world(num_sequences=200, sequence_length=60, latent_walk_rho=0.7)
    ds = generate_world(cfg, 2)
    z = ds.shared_latent[:, 0].reshape(200, 60)
    a, b = z[:, :-1].ravel(), z[:, 1:].ravel()
    assert a.size >= 10_000
    assert np.corrcoef(a, b)[0, 1] == pytest.approx(0.7, abs=0.05)


def test_pair_members_share_latent(small_world):
    for idx in small_world.paired_indices():
        recs = [small_world.record(m, idx) for m in range(2)]
        assert recs[0].pair_id == recs[1].pair_id
        assert recs[0].true_shared_latent.tobytes() == recs[1].true_shared_latent.tobytes()
        assert all(np.isfinite(r.tensor).all() for r in recs)


# ------------------------------------------------------------------ samplers


def test_sequence_batch_of_length_one(small_world):
    b = sample_sequence_batch(small_world, 0, 4, 1, seed=0)
    seqs = [r[0].sequence_id for r in b.sequences]
    assert b.indices.shape == (4, 1) and len(set(seqs)) == 4


def test_sequence_batch_structure_and_determinism(small_world):
    b1 = sample_sequence_batch(small_world, 1, 5, 3, seed=7)
    b2 = sample_sequence_batch(small_world, 1, 5, 3, seed=7)
    np.testing.assert_array_equal(b1.tensors, b2.tensors)
    for group in b1.sequences:
        assert len({r.sequence_id for r in group}) == 1
        assert [r.position_in_sequence for r in group] == list(range(group[0].position_in_sequence, group[0].position_in_sequence + 3))


def test_sequence_batch_covering_all_sequences(small_world):
    n = small_world.config.num_sequences
    b = sample_sequence_batch(small_world, 0, n, 4, seed=1)
    assert sorted(small_world.sequence_id[b.indices[:, 0]]) == list(range(n))


def test_sequence_batch_errors_name_counts(small_world):
    with pytest.raises(ValueError, match="13.*12"):
        sample_sequence_batch(small_world, 0, 13, 2, seed=0)


def test_paired_batch_exhaustive_epoch(small_world):
    n = small_world.num_pairs
    batches = list(iter_paired_epoch(small_world, n, seed=0))
    assert len(batches) == 1
    assert sorted(batches[0].indices) == sorted(small_world.paired_indices())


def test_paired_batch_of_one(small_world):
    b = sample_paired_batch(small_world, 1, seed=0)
    recs = b.records
    assert len(recs) == 2 and len(recs[0]) == 1
    assert recs[0][0].pair_id == recs[1][0].pair_id is not None


def test_scarce_pairs_error():
    ds = generate_world(WorldConfig(num_sequences=40, sequence_length=50, pair_ratio=0.05, labeled_fraction=0.0), 0)
    assert ds.num_pairs == 100
    sample_paired_batch(ds, 100, seed=0)
    with pytest.raises(ValueError, match="101.*100"):
        sample_paired_batch(ds, 101, seed=0)


def test_paired_sequence_batch(small_world):
    idx = sample_paired_sequence_batch(small_world, 3, 2, seed=0)
    assert idx.shape == (3, 2)
    assert np.all(small_world.pair_id[idx] >= 0)
    seqs = small_world.sequence_id[idx]
    assert np.all(seqs[:, 0] == seqs[:, 1]) and len(set(seqs[:, 0])) == 3
    assert np.all(small_world.position[idx[:, 1]] > small_world.position[idx[:, 0]])
    with pytest.raises(ValueError, match="smaller batch"):
        sample_paired_sequence_batch(small_world, 50, 2, seed=0)


def test_labeled_split_is_disjoint_from_pairs(small_world):
    train, test = labeled_split(small_world)
    assert len(train) and len(test)
    assert not set(train) & set(test)
    assert np.all(small_world.pair_id[np.concatenate([train, test])] < 0)
    assert set(small_world.sequence_id[train]).isdisjoint(small_world.sequence_id[test])


def test_export_round_trip(tmp_path, small_world):
    path = export_dataset(small_world, tmp_path / "ds")
    header = (path / "modality_0.index.tsv").read_text().splitlines()[0]
    assert header.split("\t") == ["record_id", "offset", "sequence_id", "position", "pair_id", "label"]
    back = load_dataset(path)
    for a, b in zip(back.tensors, small_world.tensors):
        assert a.tobytes() == b.tobytes()
    for name in ("sequence_id", "position", "label", "pair_id", "labeled_sequences"):
        assert np.array_equal(getattr(back, name), getattr(small_world, name))
    np.testing.assert_array_equal(back.shared_latent, small_world.shared_latent)
    assert back.config == small_world.config
    raw = np.frombuffer((path / "modality_1.f32").read_bytes(), dtype="<f4")
    assert raw.size == small_world.tensors[1].size
