import numpy as np
import pytest

from adaptsearch.episodes import Domain, DomainSpec, load_dataset, make_domain, sample_episode
from adaptsearch.seeding import rng_from


def spec(domain_id="d0", **kwargs):
    defaults = dict(n_classes=20, d_in=8, noise_sigma=0.2, n_way_max=5)
    defaults.update(kwargs)
    return DomainSpec(id=domain_id, **defaults)


def test_make_domain_is_deterministic_per_seed():
    a = make_domain(spec(), seed=11)
    b = make_domain(spec(), seed=11)
    np.testing.assert_array_equal(a.prototypes, b.prototypes)
    np.testing.assert_array_equal(a.transform_a, b.transform_a)
    assert a.split == b.split


def test_split_ratio_half_gives_equal_halves():
    domain = make_domain(spec(n_classes=40, n_way_max=8), seed=0)
    assert len(domain.labels_for_split("train")) == 20
    assert len(domain.labels_for_split("test")) == 20
    assert set(domain.labels_for_split("train")) & set(domain.labels_for_split("test")) == set()


def test_domain_id_salts_the_seed():
    a = make_domain(spec("alpha"), seed=5)
    b = make_domain(spec("beta"), seed=5)
    assert np.abs(a.transform_a - b.transform_a).max() > 0
    assert np.abs(a.prototypes - b.prototypes).max() > 0


def test_transform_condition_number_is_bounded():
    for cond_max in (2.0, 8.0):
        domain = make_domain(spec(transform_cond_max=cond_max), seed=3)
        s = np.linalg.svd(domain.transform_a, compute_uv=False)
        assert s.max() / s.min() <= cond_max + 1e-9


def test_too_few_classes_for_the_way_range_raises():
    with pytest.raises(ValueError, match="classes < 2"):
        make_domain(spec(n_classes=9, n_way_max=5), seed=0)


def test_episode_counts_and_label_structure():
    domain = make_domain(spec(), seed=1)
    ep = sample_episode(domain, (5, 5), (1, 1), 2, "train", rng_from(1, "ep"))
    assert ep.n_way == 5 and ep.k_shot == 1
    assert ep.support_x.shape == (5, 8)
    assert ep.query_x.shape == (10, 8)
    assert set(ep.support_y) == set(ep.query_y)
    assert all(np.count_nonzero(ep.support_y == l) == 1 for l in set(ep.support_y))
    assert all(np.count_nonzero(ep.query_y == l) == 2 for l in set(ep.query_y))


def test_episode_split_purity():
    domain = make_domain(spec(), seed=2)
    train_labels = set(domain.labels_for_split("train"))
    test_labels = set(domain.labels_for_split("test"))
    rng = rng_from(2, "purity")
    for _ in range(20):
        ep_train = sample_episode(domain, (2, 5), (1, 3), 4, "train", rng)
        ep_test = sample_episode(domain, (2, 5), (1, 3), 4, "test", rng)
        assert set(ep_train.support_y) <= train_labels
        assert set(ep_test.support_y) <= test_labels


def test_fixed_rng_stream_reproduces_the_episode():
    domain = make_domain(spec(), seed=4)
    a = sample_episode(domain, (2, 5), (1, 5), 3, "train", rng_from(9, "s"))
    b = sample_episode(domain, (2, 5), (1, 5), 3, "train", rng_from(9, "s"))
    np.testing.assert_array_equal(a.support_x, b.support_x)
    np.testing.assert_array_equal(a.query_x, b.query_x)
    np.testing.assert_array_equal(a.support_y, b.support_y)


def test_distinct_seeds_give_distinct_episode_streams():
    domain = make_domain(spec(), seed=4)
    a = sample_episode(domain, (2, 5), (1, 5), 3, "train", rng_from(9, "s"))
    b = sample_episode(domain, (2, 5), (1, 5), 3, "train", rng_from(10, "s"))
    assert a.support_x.shape != b.support_x.shape or np.abs(a.support_x - b.support_x).max() > 0


def test_infeasible_way_range_raises():
    domain = make_domain(spec(), seed=1)
    with pytest.raises(ValueError, match="infeasible"):
        sample_episode(domain, (11, 12), (1, 1), 2, "train", rng_from(0, "x"))
    with pytest.raises(ValueError, match="shot range"):
        sample_episode(domain, (2, 3), (0, 1), 2, "train", rng_from(0, "x"))


def _write_csv(path, rows, d=2):
    header = ",".join([f"f{i}" for i in range(d)] + ["label"])
    path.write_text("\n".join([header] + rows) + "\n")


def test_load_dataset_basic(tmp_path):
    f = tmp_path / "toy.csv"
    _write_csv(f, ["0.0,1.0,a", "0.1,0.9,a", "1.0,0.0,b", "0.9,0.1,b"])
    domain = load_dataset(f, split_ratio=0.5, seed=0)
    assert domain.d_in == 2
    assert domain.label_names == ["a", "b"]
    assert sum(len(v) for v in domain.samples.values()) == 4


def test_load_dataset_rejects_nan_naming_the_row(tmp_path):
    f = tmp_path / "bad.csv"
    rows = [f"0.{i},1.0,a" for i in range(1, 7)] + ["nan,1.0,b"] + ["0.8,1.0,b"]
    _write_csv(f, rows)
    with pytest.raises(ValueError, match="row 7"):
        load_dataset(f)


def test_load_dataset_rejects_ragged_rows(tmp_path):
    f = tmp_path / "ragged.csv"
    _write_csv(f, ["0.0,1.0,a", "0.5,b"])
    with pytest.raises(ValueError, match="row 2 has 2 columns"):
        load_dataset(f)


def test_load_dataset_rejects_bad_header(tmp_path):
    f = tmp_path / "head.csv"
    f.write_text("x,y,label\n0.0,1.0,a\n")
    with pytest.raises(ValueError, match="header"):
        load_dataset(f)


def test_load_dataset_split_is_seed_stable(tmp_path):
    f = tmp_path / "toy.csv"
    rows = [f"0.{i},{i}.0,c{i % 4}" for i in range(16)]
    _write_csv(f, rows)
    a = load_dataset(f, split_ratio=0.5, seed=7)
    b = load_dataset(f, split_ratio=0.5, seed=7)
    c = load_dataset(f, split_ratio=0.5, seed=8)
    assert a.split == b.split
    assert a.split != c.split


def test_csv_domain_episodes_draw_real_rows(tmp_path):
    f = tmp_path / "toy.csv"
    rows = []
    for label in ("a", "b", "c", "d"):
        for i in range(6):
            rows.append(f"{i}.0,{ord(label)}.0,{label}")
    _write_csv(f, rows)
    domain = load_dataset(f, split_ratio=0.5, seed=0)
    ep = sample_episode(domain, (2, 2), (2, 2), 3, "train", rng_from(0, "csv"))
    assert ep.support_x.shape == (4, 2)
    assert ep.query_x.shape == (6, 2)
    # every drawn sample is one of the file rows
    all_rows = {tuple(map(float, r.split(",")[:2])) for r in rows}
    for row in np.vstack([ep.support_x, ep.query_x]):
        assert tuple(row) in all_rows


def test_csv_domain_infeasible_shot_count_raises(tmp_path):
    f = tmp_path / "toy.csv"
    rows = [f"{i}.0,0.0,{label}" for label in "abcd" for i in range(2)]
    _write_csv(f, rows)
    domain = load_dataset(f, split_ratio=0.5, seed=0)
    with pytest.raises(ValueError, match="classes have"):
        sample_episode(domain, (2, 2), (5, 5), 5, "train", rng_from(0, "x"))
