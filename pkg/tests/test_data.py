import numpy as np
import pytest

from dprisk.core import ContractError, SampleBatch, SeedSpec, as_param
from dprisk.data import GMC_FEATURES, LABEL_COLUMN, DataParseError, Dataset, impute_median, load_gmc_csv, preprocess, synth_credit
from dprisk.fixtures import build_environment
from dprisk.models import LogisticLinear

HEADER = "," + LABEL_COLUMN + "," + ",".join(GMC_FEATURES)


def write_csv(tmp_path, rows, header=HEADER):
    path = tmp_path / "cs.csv"
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def row(i, label, income="5000"):
    vals = ["0.5", str(30 + i), "0", "0.3", income, "4", "0", "1", "0", "2"]
    return ",".join([str(i), str(label)] + vals)


def test_load_well_formed(tmp_path):
    ds = load_gmc_csv(write_csv(tmp_path, [row(1, 0), row(2, 1), row(3, 0)]))
    assert ds.features.shape == (3, 10)
    assert ds.column_names == GMC_FEATURES
    assert ds.labels.tolist() == [0, 1, 0]
    assert ds.n_missing == 0


def test_missing_label_column(tmp_path):
    path = write_csv(tmp_path, ["1,2"], header="a,b")
    with pytest.raises(DataParseError, match=LABEL_COLUMN):
        load_gmc_csv(path)


def test_blank_cell_is_recorded_missing(tmp_path):
    ds = load_gmc_csv(write_csv(tmp_path, [row(1, 0), row(2, 1, income=""), row(3, 0, income="NA")]))
    assert ds.n_missing == 2
    assert np.isnan(ds.features[1, GMC_FEATURES.index("MonthlyIncome")])


def test_bad_cell_names_row_and_column(tmp_path):
    path = write_csv(tmp_path, [row(1, 0), row(2, 1, income="lots")])
    with pytest.raises(DataParseError, match="row 3, column MonthlyIncome"):
        load_gmc_csv(path)


def test_median_imputation():
    ds = Dataset(np.array([[1.0], [np.nan], [3.0]]), np.array([0, 1, 0]), ("c",))
    assert impute_median(ds).features[:, 0].tolist() == [1.0, 2.0, 3.0]


def messy(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3)) * [1.0, 5.0, 0.1] + [0.0, 10.0, -2.0]
    x[rng.uniform(size=(n, 3)) < 0.05] = np.nan
    y = (rng.uniform(size=n) < 0.2).astype(np.int64)
    return Dataset(x, y, ("a", "b", "c"))


def test_preprocess_balances_and_normalizes():
    out = preprocess(messy(), balance=True, seed=SeedSpec(1))
    counts = np.bincount(out.labels)
    assert abs(counts[0] - counts[1]) <= 1
    assert np.allclose(out.features.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(out.features.std(axis=0), 1.0, atol=1e-12)
    assert not np.isnan(out.features).any()


def test_preprocess_target_n():
    out = preprocess(messy(), balance=True, target_n=51, seed=SeedSpec(1))
    assert len(out) == 50 and np.bincount(out.labels).tolist() == [25, 25]
    out = preprocess(messy(), balance=False, target_n=60, seed=SeedSpec(1))
    assert len(out) == 60


@pytest.mark.parametrize("target_n", [None, 40, 51])
def test_preprocess_is_idempotent(target_n):
    once = preprocess(messy(), balance=True, target_n=target_n, seed=SeedSpec(2))
    twice = preprocess(once, balance=True, target_n=target_n, seed=SeedSpec(2))
    assert np.allclose(once.features, twice.features, atol=1e-12)
    assert np.array_equal(once.labels, twice.labels)


def test_zero_variance_column_is_named():
    ds = Dataset(np.column_stack([np.arange(6.0), np.ones(6)]), np.array([0, 1] * 3), ("ok", "flat"))
    with pytest.raises(ContractError, match="flat"):
        preprocess(ds)


def test_synth_credit_is_seeded_and_balanced():
    a = synth_credit(101, 4, 2.0, SeedSpec(3))
    b = synth_credit(101, 4, 2.0, SeedSpec(3))
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert abs(int(a.labels.sum()) * 2 - 101) <= 1
    assert np.allclose(a.features.std(axis=0), 1.0)


def fit_logistic(ds, steps=300, lr=0.5):
    m = LogisticLinear(ds.features.shape[1])
    theta = np.zeros(m.theta_dim)
    for _ in range(steps):
        theta -= lr * m.mean_grad_theta(ds.features, ds.labels, theta)
    return m, theta


def accuracy(m, ds, theta):
    return m.accuracy(SampleBatch(ds.features, as_param(0.0), ds.labels), theta)


def test_separation_zero_is_chance():
    ds = synth_credit(10_000, 5, 0.0, SeedSpec(0))
    m, theta = fit_logistic(synth_credit(10_000, 5, 0.0, SeedSpec(1)))
    acc = accuracy(m, ds, theta)
    assert abs(acc - 0.5) <= 3 * np.sqrt(0.25 / 10_000)


def test_large_separation_is_learnable():
    ds = synth_credit(1000, 5, 10.0, SeedSpec(0))
    m, theta = fit_logistic(ds)
    assert accuracy(m, ds, theta) > 0.99


@pytest.mark.parametrize("s", [0, 1, 2])
def test_accuracy_grows_with_separation(s):
    accs = []
    for sep in (0.0, 1.0, 2.0, 5.0):
        ds = synth_credit(10_000, 5, sep, SeedSpec(s))
        m, theta = fit_logistic(ds, steps=100)
        accs.append(accuracy(m, ds, theta))
    assert accs == sorted(accs)


@pytest.mark.parametrize("s", [0, 1, 2])
def test_strategic_response_degrades_a_frozen_classifier(s):
    env = build_environment("strategic", dict(data_seed=s))
    ds = env.meta["dataset"]
    m, theta = fit_logistic(ds)
    before = accuracy(m, ds, theta)
    moved = env.map.sample(theta, len(ds), SeedSpec(s))
    after = env.model.accuracy(moved, theta)
    assert after <= before


def test_gmc_fixture_reads_the_path_override(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    rows = [",".join([str(i), str(i % 2)] + [f"{v:.4f}" for v in rng.uniform(size=10)]) for i in range(1, 41)]
    path = write_csv(tmp_path, rows)
    monkeypatch.setenv("DPRISK_GMC_PATH", str(path))
    env = build_environment("strategic", dict(source="gmc", n=20))
    assert env.map.pool_size == 20


def test_gmc_fixture_without_path_is_an_error(monkeypatch):
    monkeypatch.delenv("DPRISK_GMC_PATH", raising=False)
    with pytest.raises(ContractError, match="DPRISK_GMC_PATH"):
        build_environment("strategic", dict(source="gmc"))
