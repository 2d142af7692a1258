import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_profile
from edabench.core import Split
from edabench.datagen import (
    RawRecord,
    ShiftProfile,
    gen_abrupt_switch,
    gen_rotating_gaussians,
    generate,
    label_distribution,
    linear_priors,
    load_records,
    partition_chronological,
    split_5_1_4,
    split_sizes,
    stream_from_records,
    stream_to_records,
    write_records,
)
from edabench.divergence import mmd_matrix
from edabench.exceptions import (
    DimensionMismatch,
    EmptySource,
    InvalidProfile,
    NoTargets,
    ParseError,
    TooSmall,
    UnknownLabel,
)


def _pool(y, seed=0, dim=2):
    y = np.asarray(y)
    X = np.random.default_rng(seed).normal(size=(len(y), dim))
    return Split(tuple(f"r{i}" for i in range(len(y))), X, y, np.arange(len(y)))


class TestProfile:
    def test_prior_simplex(self):
        with pytest.raises(InvalidProfile):
            ShiftProfile("LabelDrift", T=2, priors=[[0.5, 0.6]] * 3)

    def test_rotation_budget(self):
        with pytest.raises(InvalidProfile):
            make_profile(T=10, rotation_step=0.16)
        make_profile(T=10, rotation_step=0.15)

    @pytest.mark.parametrize("kw", [dict(n_per_domain=9), dict(n_per_domain=0), dict(kind="Spiral"),
                                    dict(noise_sigma=0), dict(T=0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidProfile):
            make_profile(**kw)

    def test_switch_point_range(self):
        with pytest.raises(InvalidProfile):
            make_profile(kind="AbruptSwitch", switch_point=0)
        make_profile(kind="AbruptSwitch", T=3, switch_point=4)

    def test_dict_roundtrip(self):
        p = make_profile(priors={"start": [0.85, 0.15], "end": [0.45, 0.55]})
        q = ShiftProfile.from_dict(json.loads(json.dumps(p.to_dict())))
        assert q.to_dict() == p.to_dict()

    def test_unknown_field(self):
        with pytest.raises(InvalidProfile, match="colour"):
            ShiftProfile.from_dict({"kind": "GradualRotation", "T": 2, "colour": 1})

    def test_linear_priors(self):
        pr = linear_priors([0.85, 0.15], [0.45, 0.55], 10)
        assert pr.shape == (11, 2)
        assert np.allclose(pr[0], [0.85, 0.15]) and np.allclose(pr[-1], [0.45, 0.55])
        assert np.allclose(pr.sum(axis=1), 1, atol=1e-12)


class TestGenerators:
    def test_deterministic(self):
        p = make_profile()
        a, b = generate(p, 5), generate(p, 5)
        assert a.equals(b)

    def test_seeds_differ_sizes_match(self):
        p = make_profile(kind="AbruptSwitch", switch_point=2, displacement=1.0)
        a, b = gen_abrupt_switch(p, 1), gen_abrupt_switch(p, 2)
        assert not np.array_equal(a[0].train.X, b[0].train.X)
        assert [len(d) for d in a.domains] == [len(d) for d in b.domains]

    def test_structure(self):
        s = generate(make_profile(dim=5), 0)
        assert s.T == 3 and s.dim == 5 and s.class_names == ("c00", "c01")
        assert [d.name for d in s.domains] == ["2000-01", "2000-02", "2000-03", "2000-04"]
        assert all(len(d) == 200 for d in s.domains)

    def test_means_rotate(self):
        s = gen_rotating_gaussians(make_profile(T=4, rotation_step=0.3, n_per_domain=4000, noise_sigma=0.1), 0)
        for t in range(5):
            p = s[t].pooled()
            mu = p.X[p.y == 0].mean(axis=0)
            assert np.arctan2(mu[1], mu[0]) == pytest.approx(0.3 * t, abs=0.02)

    def test_extra_dims_are_noise(self):
        s = generate(make_profile(dim=4, n_per_domain=3000, noise_sigma=0.2), 0)
        p = s[3].pooled()
        assert np.abs(p.X[:, 2:].mean(axis=0)).max() < 0.02

    def test_never_switch_equals_static(self):
        a = generate(make_profile(kind="AbruptSwitch", T=3, switch_point=4, displacement=2.0), 9)
        b = generate(make_profile(rotation_step=0.0), 9)
        assert a.equals(b)

    def test_label_drift_tracks_priors(self):
        p = ShiftProfile.from_dict(dict(kind="LabelDrift", T=10, n_per_domain=400,
                                        priors={"start": [0.85, 0.15], "end": [0.45, 0.55]}))
        s = generate(p, 11)
        for t, dom in enumerate(s.domains):
            counts, _ = label_distribution(dom, 2)
            n, q = counts.sum(), p.priors[t][0]
            assert abs(counts[0] - n * q) <= 3 * np.sqrt(n * q * (1 - q))

    def test_zero_shift_small_mmd(self):
        s = generate(make_profile(rotation_step=0.0, T=4), 2)
        m = mmd_matrix(s, seed=0)
        assert m.values[0, 1:].max() < 0.02

    def test_rotation_mmd_grows(self):
        p = ShiftProfile.from_dict(dict(kind="GradualRotation", T=10, n_per_domain=400, noise_sigma=0.3,
                                        rotation_step=0.1))
        m = mmd_matrix(generate(p, 7), seed=0)
        assert m.values[0, 10] > m.values[0, 1]

    def test_abrupt_block(self):
        p = make_profile(kind="AbruptSwitch", T=10, switch_point=6, displacement=3 * 0.35, n_per_domain=300)
        v = mmd_matrix(generate(p, 3), seed=0).values
        adjacent = np.array([v[t - 1, t] for t in range(1, 11)])
        others = np.delete(adjacent, 5)
        assert adjacent[5] > 5 * np.median(others)


class TestSplit:
    def test_sizes(self):
        assert split_sizes(10) == (5, 1, 4)
        assert split_sizes(400) == (200, 40, 160)
        with pytest.raises(TooSmall):
            split_sizes(9)

    def test_example_ten(self):
        d = split_5_1_4(_pool([0, 1] * 5), seed=0)
        assert (len(d.train), len(d.val), len(d.test)) == (5, 1, 4)

    def test_stratified_counts(self):
        d = split_5_1_4(_pool([0] * 70 + [1] * 30), seed=3)
        c = np.bincount(d.train.y, minlength=2)
        assert abs(c[0] - 35) <= 1 and abs(c[1] - 15) <= 1

    def test_too_small(self):
        with pytest.raises(TooSmall):
            split_5_1_4(_pool([0] * 9), seed=0)

    @settings(max_examples=150, deadline=None)
    @given(st.lists(st.integers(0, 3), min_size=10, max_size=80), st.integers(0, 2**32), st.booleans())
    def test_partition_properties(self, y, seed, stratify):
        pool = _pool(y)
        d = split_5_1_4(pool, seed=seed, stratify=stratify)
        assert (len(d.train), len(d.val), len(d.test)) == split_sizes(len(y))
        assert len(d.train) >= len(d.test)
        orders = np.concatenate([d.train.order, d.val.order, d.test.order])
        assert sorted(orders.tolist()) == list(range(len(y)))
        for sp in (d.train, d.val, d.test):
            assert np.all(np.diff(sp.order) > 0)
            assert np.array_equal(sp.X, pool.X[sp.order]) and np.array_equal(sp.y, pool.y[sp.order])
        if stratify:
            for c in set(y):
                if y.count(c) >= 2:
                    assert c in d.train.y and c in d.test.y

    def test_independent_of_pool_order(self):
        pool = _pool([0, 1, 1] * 10)
        rev = pool.take(np.arange(len(pool))[::-1])
        assert split_5_1_4(pool, 4).equals(split_5_1_4(rev, 4))


class TestLabelDistribution:
    def test_source_row(self):
        _, props = label_distribution(_pool([0] * 224 + [1] * 1338), 2)
        assert round(props[0], 4) == 0.1434

    def test_one_hot_and_empty(self):
        counts, props = label_distribution(_pool([1] * 12), 3)
        assert counts.tolist() == [0, 12, 0] and props.tolist() == [0.0, 1.0, 0.0]
        assert abs(props.sum() - 1) < 1e-9


class TestRecords:
    def test_ndjson_example(self, tmp_path):
        f = tmp_path / "r.ndjson"
        f.write_text('{"id":"t1","timestamp":"2021-06-03","features":[0.1,0.2],"label":"against"}\n')
        (r,) = load_records(f)
        assert r == RawRecord("t1", "2021-06-03", [0.1, 0.2], "against", None)

    def test_ndjson_ignores_unknown(self, tmp_path):
        f = tmp_path / "r.jsonl"
        f.write_text('{"id":"a","timestamp":"2021-06-03","features":[1],"lang":"en"}\n\n')
        assert load_records(f)[0].label is None

    @pytest.mark.parametrize("line,msg", [("{bad", "invalid JSON"), ('{"id":"a","features":[1]}', "timestamp"),
                                          ('{"id":"a","timestamp":"2021-13-01","features":[1]}', "timestamp"),
                                          ('{"id":"a","timestamp":"2021-01-01","features":["x"]}', "features")])
    def test_ndjson_errors(self, tmp_path, line, msg):
        f = tmp_path / "r.ndjson"
        f.write_text('{"id":"ok","timestamp":"2021-01-01","features":[1]}\n' + line + "\n")
        with pytest.raises(ParseError, match=f"line 2: .*{msg}"):
            load_records(f)

    def test_ndjson_dimension(self, tmp_path):
        f = tmp_path / "r.ndjson"
        f.write_text('{"id":"a","timestamp":"2021-01-01","features":[1,2]}\n'
                     '{"id":"b","timestamp":"2021-01-01","features":[1]}\n')
        with pytest.raises(DimensionMismatch):
            load_records(f)

    def test_csv(self, tmp_path):
        f = tmp_path / "r.csv"
        f.write_text("id,timestamp,label,split,f0,f1\na,2021-01-02,x,train,0.5,1\nb,2021-01-03,,,2,3\n")
        a, b = load_records(f)
        assert a == RawRecord("a", "2021-01-02", [0.5, 1.0], "x", "train")
        assert b.label is None and b.split is None

    def test_csv_dimension_mismatch(self, tmp_path):
        f = tmp_path / "r.csv"
        f.write_text("id,timestamp,label,split,f0,f1\na,2021-01-02,x,train,0.5,1,7\n")
        with pytest.raises(DimensionMismatch, match="line 2"):
            load_records(f)

    def test_csv_unknown_column(self, tmp_path):
        f = tmp_path / "r.csv"
        f.write_text("id,timestamp,label,split,lang,f0\n")
        with pytest.raises(ParseError):
            load_records(f)

    def test_empty_file(self, tmp_path):
        f = tmp_path / "r.ndjson"
        f.write_text("")
        assert load_records(f) == []

    def test_generate_roundtrip(self, tmp_path):
        s = generate(make_profile(dim=3), 4)
        write_records(stream_to_records(s), tmp_path / "s.ndjson")
        back = stream_from_records(load_records(tmp_path / "s.ndjson"), ("2000-01", "2000-01"),
                                   min_domain_size=1, class_names=s.class_names)
        assert back.equals(s)


def _monthly_records():
    # a six-month source window, then monthly volumes whose last months are too thin to stand alone
    months = {"2020-12": 300, "2021-01": 250, "2021-02": 250, "2021-03": 250, "2021-04": 256, "2021-05": 256,
              "2021-06": 225, "2021-07": 423, "2021-08": 500, "2021-09": 432, "2021-10": 336, "2021-11": 309,
              "2021-12": 390, "2022-01": 358, "2022-02": 12, "2022-03": 221, "2022-04": 9, "2022-05": 11,
              "2022-06": 214}
    recs, k = [], 0
    for m, n in months.items():
        for i in range(n):
            recs.append(RawRecord(f"id{k}", f"{m}-{1 + i % 28:02d}", [float(k % 7), 1.0], "a" if k % 3 else "b"))
            k += 1
    return recs


class TestPartition:
    def test_sparse_tail_layout(self):
        buckets = partition_chronological(_monthly_records(), ("2020-12", "2021-05"), 1, 30)
        assert len(buckets) == 11
        assert buckets[0].name == "2020-12 to 2021-05" and len(buckets[0].records) == 1562
        assert buckets[1].name == "2021-06"
        assert buckets[-2].name == "2022-02 to 2022-03" and len(buckets[-2].records) == 233
        assert buckets[-1].name == "2022-04 to 2022-06" and len(buckets[-1].records) == 234

    def test_reverse_order_identical(self):
        recs = _monthly_records()
        a = stream_from_records(recs, ("2020-12", "2021-05"), seed=1)
        b = stream_from_records(recs[::-1], ("2020-12", "2021-05"), seed=1)
        assert a.equals(b)

    def test_chronology(self):
        s = stream_from_records(_monthly_records(), ("2020-12", "2021-05"))
        assert s.T == 10
        for t in range(1, s.T + 1):
            assert s[t].pooled().order.min() > s[t - 1].pooled().order.max()

    def test_drops_before_source_and_trailing(self):
        recs = [RawRecord("x", "2019-01-01", [0.0], "a")] + _monthly_records()
        assert len(partition_chronological(recs, ("2020-12", "2021-05"))[0].records) == 1562

    def test_undersized_last_merges_back(self):
        recs = [RawRecord(f"s{i}", "2021-01-05", [0.0], "a") for i in range(40)]
        recs += [RawRecord(f"t{i}", "2021-02-05", [0.0], "a") for i in range(40)]
        recs += [RawRecord(f"u{i}", "2021-03-05", [0.0], "a") for i in range(5)]
        b = partition_chronological(recs, ("2021-01", "2021-01"))
        assert [x.name for x in b] == ["2021-01", "2021-02 to 2021-03"]

    def test_window_len_two(self):
        recs = [RawRecord(f"r{m}{i}", f"2021-{m:02d}-02", [0.0], "a") for m in range(1, 6) for i in range(40)]
        b = partition_chronological(recs, ("2021-01", "2021-01"), target_window_len=2)
        assert [x.name for x in b] == ["2021-01", "2021-02 to 2021-03", "2021-04 to 2021-05"]

    def test_errors(self):
        recs = [RawRecord("a", "2021-01-05", [0.0], "x")]
        with pytest.raises(NoTargets):
            partition_chronological(recs, ("2021-01", "2021-02"))
        with pytest.raises(EmptySource):
            partition_chronological(recs, ("2021-03", "2021-04"))

    def test_unknown_label(self):
        with pytest.raises(UnknownLabel):
            stream_from_records(_monthly_records(), ("2020-12", "2021-05"), class_names=["a"])

    def test_unlabeled_targets(self):
        recs = _monthly_records()
        recs = [r if r.timestamp < "2021-06" else RawRecord(r.id, r.timestamp, r.features, None) for r in recs]
        s = stream_from_records(recs, ("2020-12", "2021-05"))
        assert s[0].train.labeled and np.all(s[3].train.y == -1)
