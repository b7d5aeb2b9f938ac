import numpy as np
import pytest

from overexpress.detectors import KnnConfig, ProbeConfig
from overexpress.experiments import (
    ParseError,
    ProtocolConfig,
    ProtocolError,
    SchemaError,
    TabularDataset,
    dimensionality_sweep,
    guided_run,
    load_csv,
    make_attribute_dataset,
    make_toy_dataset,
    protocol_labels,
    rank_features,
    result_record,
    run_protocol,
    split_train_test,
    toy_detector_bridge,
    write_csv,
    write_records,
)
from overexpress.stats_core import RandomStream
from overexpress.toy_model import ToyModelParams


@pytest.fixture(scope="module")
def toy16():
    return make_toy_dataset(1200, n_noise=15, delta=3.0, seed=3)


@pytest.fixture(scope="module")
def attr():
    return make_attribute_dataset(1500, n_values=3, spacing=3.0, n_noise=6, seed=5)


def null_auc_se(n0, n1):
    return np.sqrt((n0 + n1 + 1) / (12.0 * n0 * n1))


class TestLoadCsv:
    def test_example(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b,label\n1,2,0\n3,4,1\n")
        ds = load_csv(p, "label")
        assert ds.feature_names == ["a", "b"]
        np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4]])
        np.testing.assert_array_equal(ds.label, [0, 1])

    def test_bad_label_names_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,label\n1,0\n2,1\n3,2\n")
        with pytest.raises(ParseError, match="row 3"):
            load_csv(p, "label")

    def test_unparseable_cell(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,label\n1,0\nx,1\n")
        with pytest.raises(ParseError, match="row 2"):
            load_csv(p, "label")

    def test_non_finite_rejected(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,label\nnan,0\n")
        with pytest.raises(ParseError):
            load_csv(p, "label")

    def test_missing_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(SchemaError):
            load_csv(p, "label")

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,label\n1,0,5\n")
        with pytest.raises(SchemaError):
            load_csv(p, "label")

    def test_digest_stable_and_content_sensitive(self, tmp_path):
        p, q = tmp_path / "p.csv", tmp_path / "q.csv"
        p.write_text("a,label\n1,0\n2,1\n")
        q.write_text("a,label\n1,0\n2.5,1\n")
        assert load_csv(p, "label").source_digest == load_csv(p, "label").source_digest
        assert load_csv(p, "label").source_digest != load_csv(q, "label").source_digest

    def test_round_trip(self, tmp_path, attr):
        p = tmp_path / "a.csv"
        write_csv(attr, p)
        back = load_csv(p, "label", ["relevant", "nuisance"])
        np.testing.assert_array_equal(back.features, attr.features)
        np.testing.assert_array_equal(back.label, attr.label)
        np.testing.assert_array_equal(back.attribute_columns["relevant"], attr.attribute_columns["relevant"])


class TestSplit:
    def test_sizes_and_normal_only(self, toy16):
        cfg = ProtocolConfig(seed=1)
        labels = protocol_labels(toy16, cfg)
        train, test = split_train_test(toy16, cfg)
        assert test.size == 180
        assert np.all(labels[train] == 0)
        assert np.intersect1d(train, test).size == 0

    def test_deterministic(self, toy16):
        a = split_train_test(toy16, ProtocolConfig(seed=9))
        b = split_train_test(toy16, ProtocolConfig(seed=9))
        c = split_train_test(toy16, ProtocolConfig(seed=10))
        np.testing.assert_array_equal(a[1], b[1])
        assert not np.array_equal(a[1], c[1])


class TestProtocolLabels:
    def test_settings(self, attr):
        rel = attr.attribute_columns["relevant"]
        single = protocol_labels(attr, ProtocolConfig("single_value", "relevant", "v1"))
        multi = protocol_labels(attr, ProtocolConfig("multi_value", "relevant", "v1"))
        np.testing.assert_array_equal(single, rel != "v1")
        np.testing.assert_array_equal(multi, rel == "v1")

    def test_multi_value_needs_rows(self, attr):
        small = TabularDataset(
            attr.feature_names, attr.features[:40], attr.label[:40],
            {"relevant": np.where(np.arange(40) < 5, "rare", "common")},
        )
        with pytest.raises(ProtocolError):
            protocol_labels(small, ProtocolConfig("multi_value", "relevant", "rare"), KnnConfig(10))

    def test_single_valued_attribute(self, attr):
        flat = TabularDataset(attr.feature_names, attr.features, attr.label, {"c": np.full(attr.n_rows, "only")})
        with pytest.raises(ProtocolError):
            run_protocol(flat, ProtocolConfig("multi_value", "c", "only"))

    def test_unknown_value(self, attr):
        with pytest.raises(ProtocolError):
            protocol_labels(attr, ProtocolConfig("single_value", "relevant", "v9"))


class TestRankFeatures:
    def test_label_copy_first(self, toy16):
        x = np.c_[toy16.features, toy16.label + 0.01 * np.random.default_rng(0).standard_normal(toy16.n_rows)]
        ds = TabularDataset([*toy16.feature_names, "copy"], x, toy16.label)
        assert rank_features(ds, ProtocolConfig())[0] == "copy"

    def test_single_feature(self):
        ds = make_toy_dataset(400, n_noise=0, seed=1)
        assert rank_features(ds, ProtocolConfig()) == ["signal"]

    def test_duplicate_columns_keep_order(self, toy16):
        x = np.c_[toy16.features[:, :1], toy16.features[:, :1]]
        ds = TabularDataset(["b_first", "a_second"], x, toy16.label)
        names, aucs = rank_features(ds, ProtocolConfig(), return_auc=True)
        assert names == ["b_first", "a_second"] and aucs[0] == aucs[1]


class TestSweep:
    def test_knn_degrades_with_noise(self, toy16):
        res = dimensionality_sweep(toy16, ProtocolConfig(seed=2))
        assert res.features[0] == "signal"
        assert res.knn_auc[0] >= res.knn_auc[-1] + 0.05
        assert len(res.knn_auc) == len(res.probe_auc) == 16

    def test_one_feature(self):
        res = dimensionality_sweep(make_toy_dataset(400, n_noise=0, seed=1), ProtocolConfig())
        assert res.dims == [1]

    def test_records_reproducible(self, toy16, tmp_path):
        def emit(sub):
            cfg = ProtocolConfig(seed=4)
            res = dimensionality_sweep(toy16, cfg)
            recs = [result_record("s", toy16, cfg, "knn", d, _Auc(a, res)) for d, a in zip(res.dims, res.knn_auc)]
            (tmp_path / sub).mkdir()
            return [p.read_bytes() for p in write_records(recs, tmp_path / sub / "r")]

        assert emit("a") == emit("b")


class _Auc:
    def __init__(self, auc, res):
        self.auc, self.n_normal, self.n_anomalous = auc, res.n_normal, res.n_anomalous


class TestRunProtocol:
    def test_attribute_fully_determines_anomaly(self):
        ds = make_attribute_dataset(1500, n_values=3, spacing=8.0, n_noise=0, seed=11)
        knn, probe = run_protocol(ds, ProtocolConfig("single_value", "relevant", "v0", seed=1))
        assert knn.auc >= 0.95 and probe.auc >= 0.95

    def test_probe_beats_knn_with_many_noise_columns(self):
        ds = make_toy_dataset(1200, n_noise=31, delta=3.0, seed=6)
        knn, probe = run_protocol(ds, ProtocolConfig(seed=6))
        assert probe.auc >= knn.auc

    def test_same_test_rows(self, toy16):
        knn, probe = run_protocol(toy16, ProtocolConfig())
        assert (knn.n_normal, knn.n_anomalous) == (probe.n_normal, probe.n_anomalous)

    def test_standardization_removes_affine_rescaling(self, toy16):
        cfg = ProtocolConfig(seed=3)
        base = run_protocol(toy16, cfg)[0].auc
        shifted = TabularDataset(toy16.feature_names, toy16.features * 2.0 + 7.0, toy16.label)
        assert run_protocol(shifted, cfg)[0].auc == pytest.approx(base, abs=1e-12)


class TestGuided:
    def test_relevant_matches_single_feature_sweep(self, attr):
        cfg = ProtocolConfig(seed=2)
        res = dimensionality_sweep(attr, cfg, order=["relevant_feature"])
        guided = guided_run(attr, cfg, ["relevant_feature"])
        assert abs(guided.auc - res.knn_auc[0]) <= 0.02

    def test_noise_guidance_is_near_chance(self, attr):
        assert guided_run(attr, ProtocolConfig(seed=2), ["noise_0", "noise_1"]).auc <= 0.6

    def test_all_features_equals_unguided(self, attr):
        cfg = ProtocolConfig(seed=2)
        assert guided_run(attr, cfg, list(reversed(attr.feature_names))).auc == run_protocol(attr, cfg)[0].auc

    def test_empty_and_unknown(self, attr):
        with pytest.raises(ValueError):
            guided_run(attr, ProtocolConfig(), [])
        with pytest.raises(SchemaError):
            guided_run(attr, ProtocolConfig(), ["nope"])


class TestBridge:
    def test_null_model_is_chance(self):
        n_test = 1000
        rows = toy_detector_bridge([ToyModelParams(d, 0.0) for d in (4, 64)], 500, n_test, stream=RandomStream(8))
        for r in rows:
            assert abs(r.knn_auc - 0.5) <= 4 * null_auc_se(n_test / 2, n_test / 2)
            assert abs(r.probe_auc - 0.5) <= 4 * null_auc_se(n_test / 2, n_test / 2)

    def test_knn_decays_probe_holds(self):
        rows = toy_detector_bridge([ToyModelParams(d, 3.0) for d in (2, 512)], 1000, 1000, stream=RandomStream(1))
        assert rows[0].knn_auc >= 0.85
        assert rows[1].knn_auc <= rows[0].knn_auc - 0.1
        assert min(r.probe_auc for r in rows) >= 0.9

    def test_deterministic(self):
        grid = [ToyModelParams(8, 2.0)]
        assert toy_detector_bridge(grid, 200, 200, stream=RandomStream(3)) == toy_detector_bridge(grid, 200, 200, stream=RandomStream(3))

    def test_mixed_grid_rejected(self):
        with pytest.raises(ValueError):
            toy_detector_bridge([ToyModelParams(2, 1.0), ToyModelParams(4, 2.0)], 50, 50)
