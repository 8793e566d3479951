import json

import numpy as np
import pytest

from graphhash.data import (TEST, TRAIN, UNSPLIT, VAL, binarize_rating, enforce_transductive, from_records,
                            load_interactions, prepare, read_dataset, split, write_dataset)
from graphhash.errors import DataError, ParseError, SchemaError


def write(tmp_path, text, name="in.tsv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestLoad:
    def test_dense_ids_follow_first_appearance(self, tmp_path):
        ds = load_interactions(write(tmp_path, "b\tx\na\ty\nb\ty\n"))
        assert ds.user_tokens == ["b", "a"]
        assert ds.item_tokens == ["x", "y"]
        assert ds.users.tolist() == [0, 1, 0]
        assert ds.items.tolist() == [0, 1, 1]

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        ds = load_interactions(write(tmp_path, "# header\n\nu1\ti1\n# more\nu2\ti1\n"))
        assert len(ds) == 2

    def test_duplicates_are_kept_as_records(self, tmp_path):
        ds = load_interactions(write(tmp_path, "u\ti\nu\ti\n"))
        assert len(ds) == 2 and ds.n_users == 1

    def test_malformed_line_reports_line_number(self, tmp_path):
        with pytest.raises(ParseError) as err:
            load_interactions(write(tmp_path, "u\ti\nonlyone\n"))
        assert err.value.line_no == 2

    def test_ctr_requires_label(self, tmp_path):
        with pytest.raises(SchemaError):
            load_interactions(write(tmp_path, "u\ti\t1\nu\tj\n"), mode="ctr")

    def test_ctr_rejects_non_binary_label(self, tmp_path):
        with pytest.raises(ParseError):
            load_interactions(write(tmp_path, "u\ti\t4\n"), mode="ctr")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_interactions(tmp_path / "nope.tsv")

    def test_bundled_toy_fixture(self, toy_path):
        ds = load_interactions(toy_path)
        assert len(ds) == 200


class TestBinarize:
    @pytest.mark.parametrize("rating,label", [(5, 1), (4, 1), (3.5, 1), (3, None), (2, 0), (1, 0)])
    def test_rule(self, rating, label):
        assert binarize_rating(rating) == label

    def test_threes_dropped_on_load(self, tmp_path):
        ds = load_interactions(write(tmp_path, "a\tx\t5\nb\tx\t3\nc\ty\t1\n"), mode="ctr", binarize=True)
        assert ds.labels.tolist() == [1, 0]
        assert ds.user_tokens == ["a", "c"]


class TestSplit:
    def test_every_record_in_exactly_one_split(self, toy_path):
        ds = split(load_interactions(toy_path), (0.8, 0.1, 0.1), seed=3)
        assert not (ds.split == UNSPLIT).any()
        sizes = ds.split_sizes()
        assert sum(sizes.values()) == 200
        assert sizes == {"train": 160, "val": 20, "test": 20}

    def test_seeded(self, toy_path):
        base = load_interactions(toy_path)
        a, b = split(base, seed=7), split(base, seed=7)
        assert np.array_equal(a.split, b.split)
        assert not np.array_equal(a.split, split(base, seed=8).split)

    @pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.8, 0.1, 0.2), (0.0, 0.5, 0.5), (1.1, -0.1, 0.0)])
    def test_bad_ratios(self, toy_path, ratios):
        with pytest.raises(DataError):
            split(load_interactions(toy_path), ratios)


class TestTransductive:
    def test_unseen_entities_dropped(self):
        ds = from_records(["a", "b", "c", "a"], ["x", "y", "x", "z"])
        ds = ds.replace(split=np.array([TRAIN, TRAIN, TEST, VAL], dtype=np.int8))
        out, report = enforce_transductive(ds)
        assert report == {"dropped_val": 1, "dropped_test": 1, "dropped_users": 1, "dropped_items": 1}
        assert out.user_tokens == ["a", "b"] and out.item_tokens == ["x", "y"]
        assert out.n_users == 2 and out.n_items == 2 and len(out) == 2

    def test_eval_entities_subset_of_train(self, toy_ds):
        tr_u = set(toy_ds.records(TRAIN)[0].tolist())
        tr_i = set(toy_ds.records(TRAIN)[1].tolist())
        for which in (VAL, TEST):
            u, i, _ = toy_ds.records(which)
            assert set(u.tolist()) <= tr_u and set(i.tolist()) <= tr_i

    def test_ids_stay_dense(self, toy_ds):
        assert set(toy_ds.users.tolist()) == set(range(toy_ds.n_users))
        assert set(toy_ds.items.tolist()) == set(range(toy_ds.n_items))

    def test_requires_split(self, toy_path):
        with pytest.raises(DataError):
            enforce_transductive(load_interactions(toy_path))


class TestFrequencies:
    def test_train_only(self):
        ds = from_records(["a", "a", "b"], ["x", "y", "x"]).replace(
            split=np.array([TRAIN, TEST, TRAIN], dtype=np.int8))
        assert ds.user_freq.tolist() == [1, 1]
        assert ds.item_freq.tolist() == [2, 0]


class TestSerialization:
    def test_round_trip(self, toy_ds, tmp_path):
        write_dataset(toy_ds, tmp_path / "d")
        back = read_dataset(tmp_path / "d")
        # records come back grouped by split file, in file order within each
        for which in (TRAIN, VAL, TEST):
            for a, b in zip(back.records(which)[:2], toy_ds.records(which)[:2]):
                assert np.array_equal(a, b)
        assert back.user_tokens == toy_ds.user_tokens
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest["split_sizes"] == toy_ds.split_sizes()
        assert manifest["seed"] == 0

    def test_id_map_format(self, toy_ds, tmp_path):
        write_dataset(toy_ds, tmp_path)
        first = (tmp_path / "user_map.tsv").read_text().splitlines()[0]
        assert first == f"{toy_ds.user_tokens[0]}\t0"

    def test_ctr_round_trip(self, tmp_path):
        p = write(tmp_path, "".join(f"u{k % 5}\ti{k % 7}\t{k % 2}\n" for k in range(60)))
        ds, _ = prepare(p, mode="ctr", seed=1)
        write_dataset(ds, tmp_path / "d")
        back = read_dataset(tmp_path / "d")
        for which in (TRAIN, VAL, TEST):
            assert np.array_equal(back.records(which)[2], ds.records(which)[2])

    def test_byte_identical_rerun(self, toy_path, tmp_path):
        for name in ("a", "b"):
            ds, _ = prepare(toy_path, seed=5)
            write_dataset(ds, tmp_path / name)
        for f in ("manifest.json", "train.tsv", "val.tsv", "test.tsv", "user_map.tsv", "item_map.tsv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
