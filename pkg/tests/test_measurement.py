import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lindbladfit.generators import ExperimentConfig, ModelSpec, TrueParams, sample_true_params
from lindbladfit.measurement import (
    DatasetFormatError, ProbabilityError, ProtocolConfig, empty_dataset, generate_dataset, outcome_distribution,
    read_dataset, sample_bases, sample_initial_states, sample_shots, write_dataset,
)
from lindbladfit.spinops import random_density_matrix


@pytest.fixture(scope="module")
def small_dataset():
    model, truth = sample_true_params(ExperimentConfig("xyz", "thermal", 2), np.random.default_rng(0))
    return generate_dataset(model, truth, ProtocolConfig(L=2, times=(0.2, 0.7), K=3, M=4, seed=5))


def test_protocol_defaults_and_validation():
    p = ProtocolConfig()
    assert (p.L, p.J, p.K, p.M) == (5, 10, 200, 100)
    assert p.n_records == 10**6
    assert p.times[0] == 0.1 and p.times[-1] == 1.0
    for bad in [dict(L=0), dict(K=0), dict(M=0), dict(times=()), dict(times=(0.5, 0.2)), dict(times=(0.0, 1.0))]:
        with pytest.raises(ValueError):
            ProtocolConfig(**bad)
    assert ProtocolConfig.from_dict(p.to_dict()) == p


def test_initial_state_sampling():
    a = sample_initial_states(5, 3, np.random.default_rng(1))
    b = sample_initial_states(5, 3, np.random.default_rng(1))
    assert a == b and len(a) == 5 and all(s.n == 3 for s in a)
    draws = sample_initial_states(6000, 1, np.random.default_rng(2))
    counts = {}
    for s in draws:
        counts[str(s)] = counts.get(str(s), 0) + 1
    assert len(counts) == 6
    for c in counts.values():
        assert abs(c / 6000 - 1 / 6) <= 0.02


def test_basis_sampling():
    a = sample_bases(10, 3, np.random.default_rng(1))
    assert a == sample_bases(10, 3, np.random.default_rng(1))
    draws = sample_bases(6000, 2, np.random.default_rng(3))
    assert all(p.is_basis for p in draws)
    for site in range(2):
        for lab in "XYZ":
            freq = np.mean([p.labels[site] == lab for p in draws])
            assert abs(freq - 1 / 3) <= 0.02


def test_outcome_distribution_examples():
    assert np.allclose(outcome_distribution(np.diag([1.0, 0.0]), "Z"), [1, 0])
    plus = np.full((2, 2), 0.5)
    assert np.allclose(outcome_distribution(plus, "X"), [1, 0])
    assert np.allclose(outcome_distribution(plus, "Z"), [0.5, 0.5])
    with pytest.raises(ProbabilityError):
        outcome_distribution(2 * plus, "Z")


@settings(max_examples=40)
@given(st.text(alphabet="XYZ", min_size=1, max_size=3), st.integers(0, 2**32 - 1))
def test_outcome_distribution_properties(basis, seed):
    rho = random_density_matrix(len(basis), np.random.default_rng(seed))
    p = outcome_distribution(rho, basis)
    assert abs(p.sum() - 1) <= 1e-10
    assert np.allclose(p, oracles.born(rho, basis), atol=1e-12)
    assert np.array_equal(outcome_distribution(rho, "Z" * len(basis)), np.real(np.diag(rho)))


def test_negative_probabilities_are_clamped():
    rho = np.diag([1.0 + 1e-11, -1e-11])
    p = outcome_distribution(rho, "Z")
    assert p[1] == 0 and p[0] == 1


def test_shot_sampling():
    assert sample_shots([1.0, 0.0], 50, np.random.default_rng(0)) == ["0"] * 50
    shots = sample_shots([0.5, 0.5], 10**4, np.random.default_rng(1))
    assert 0.48 <= shots.count("0") / 10**4 <= 0.52
    assert sample_shots([0.1, 0.2, 0.3, 0.4], 20, np.random.default_rng(2)) == \
        sample_shots([0.1, 0.2, 0.3, 0.4], 20, np.random.default_rng(2))
    # site 0 is the leading bit
    assert set(sample_shots([0, 0, 1.0, 0], 5, np.random.default_rng(3))) == {"10"}


def test_dataset_size_and_layout(small_dataset):
    ds = small_dataset
    assert len(ds) == 2 * 2 * 3 * 4
    assert set(ds.state_id.tolist()) == {0, 1}
    groups = ds.groups()
    assert sorted(groups) == [(l, m) for l in range(2) for m in range(4)]
    assert all(idx.size == 2 * 3 for idx in groups.values())
    rec = next(ds.records())
    assert rec.t in (0.2, 0.7) and len(rec.basis) == 2 and len(rec.bits) == 2


def test_single_record_dataset():
    model, truth = sample_true_params(ExperimentConfig("xyz", "phase", 2), np.random.default_rng(0))
    ds = generate_dataset(model, truth, ProtocolConfig(L=1, times=(0.5,), K=1, M=1))
    assert len(ds) == 1


def test_early_time_z_measurements_reproduce_preparation():
    model = ModelSpec.create("xyz", "thermal", 3)
    truth = TrueParams(np.full(model.n_h, 0.5), np.full(model.n_l, 0.5))
    ds = generate_dataset(model, truth, ProtocolConfig(L=5, times=(1e-6,), K=100, M=5, seed=3))
    checked = 0
    for l, spec in enumerate(ds.initial_states):
        for site, (axis, sign) in enumerate(zip(spec.axes, spec.signs)):
            if axis != "Z":
                continue
            sel = (ds.state_id == l) & (ds.bases[:, site] == 2)
            assert np.all(ds.bits[sel, site] == (0 if sign > 0 else 1))
            checked += sel.sum()
    assert checked > 0


def test_generation_is_deterministic(small_dataset):
    model, truth = sample_true_params(ExperimentConfig("xyz", "thermal", 2), np.random.default_rng(0))
    again = generate_dataset(model, truth, ProtocolConfig(L=2, times=(0.2, 0.7), K=3, M=4, seed=5))
    assert again.equals(small_dataset)
    other = generate_dataset(model, truth, ProtocolConfig(L=2, times=(0.2, 0.7), K=3, M=4, seed=6))
    assert not other.equals(small_dataset)


def test_empirical_frequencies_match_born_rule():
    model, truth = sample_true_params(ExperimentConfig("xyz", "thermal", 2), np.random.default_rng(1))
    ds = generate_dataset(model, truth, ProtocolConfig(L=1, times=(0.5,), K=4, M=10**4, seed=2))
    from lindbladfit.generators import LindbladField
    from lindbladfit.propagator import evolve
    rho = evolve(LindbladField(model, truth.theta_h, truth.theta_l), ds.initial_rho(0), [0.5]).states[0]
    codes = np.unique(ds.bases, axis=0)
    for c in codes:
        sel = np.all(ds.bases == c, axis=1)
        idx = ds.bits[sel] @ np.array([2, 1])
        emp = np.bincount(idx, minlength=4) / sel.sum()
        exact = outcome_distribution(rho, "".join("XYZ"[k] for k in c))
        assert 0.5 * np.abs(emp - exact).sum() <= 0.05


def test_write_read_roundtrip(tmp_path, small_dataset):
    path = tmp_path / "ds.csv"
    write_dataset(small_dataset, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("{") and '"version": 1' in lines[0]
    assert lines[1].split(",")[1] in ("0.20000000000000001", "0.69999999999999996")
    back = read_dataset(path)
    assert back.equals(small_dataset)
    write_dataset(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


def test_meta_only_file(tmp_path, small_dataset):
    empty = empty_dataset(small_dataset.meta, small_dataset.initial_states, small_dataset.times)
    path = tmp_path / "empty.csv"
    write_dataset(empty, path)
    back = read_dataset(path)
    assert len(back) == 0 and back.meta == small_dataset.meta


def test_malformed_files(tmp_path, small_dataset):
    path = tmp_path / "ds.csv"
    write_dataset(small_dataset, path)
    text = path.read_text()
    (tmp_path / "trunc.csv").write_text(text[:-8])
    with pytest.raises(DatasetFormatError, match=r"line \d+"):
        read_dataset(tmp_path / "trunc.csv")
    lines = text.splitlines()
    bad = lines[:3] + ["0,0.5,XZ,01"] + lines[3:]
    (tmp_path / "badt.csv").write_text("\n".join(bad) + "\n")
    with pytest.raises(DatasetFormatError, match="line 4"):
        read_dataset(tmp_path / "badt.csv")
    (tmp_path / "ver.csv").write_text(text.replace('"version": 1', '"version": 9', 1))
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(tmp_path / "ver.csv")
    (tmp_path / "hdr.csv").write_text("not json\n")
    with pytest.raises(DatasetFormatError, match="line 1"):
        read_dataset(tmp_path / "hdr.csv")
