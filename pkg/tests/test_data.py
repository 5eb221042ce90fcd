"""Dataset pipeline tests.

The split construction is checked against a deliberately slow
per-row reimplementation that never touches numpy indexing tricks,
so an off-by-one in the vectorised path has something to disagree
with.
"""

import time
from collections import Counter

import numpy as np
import pytest

from velf import data
from velf.data import (GENRE_COUNT_BUCKETS, SPLIT_NAMES, YEAR_BUCKETS,
                       Field, FieldSchema, Instances, ParseError, Vocabulary,
                       batch_iterator, binarize_labels, build_frequency_table,
                       build_splits, genre_count_bucket, hour_bucket,
                       load_split_dir, parse_movielens, synth_coldstart,
                       write_split_dir, year_bucket)
from conftest import AGES, GENRES, write_fake_movielens


class TestConstants:
    def test_split_names(self):
        assert SPLIT_NAMES == ("train", "test_all", "test_new_user",
                               "test_new_item", "test_infreq_user",
                               "test_infreq_item")

    def test_buckets_frozen(self):
        assert YEAR_BUCKETS == ("pre1950", "1950s", "1960s", "1970s",
                                "1980s", "1990-1994", "1995plus")
        assert GENRE_COUNT_BUCKETS == ("1", "2", "3plus")

    def test_thresholds(self):
        assert data.NEW_ITEM_YEAR == 1997
        assert data.NEW_USER_MAX == 30
        assert data.POSITIVE_THRESHOLD == 4


# -- parsing ------------------------------------------------------------

@pytest.fixture(scope="module")
def raw(ml_dir):
    return parse_movielens(ml_dir)


class TestParse:
    def test_populations(self, raw):
        assert len(raw.users) == 16
        assert len(raw.movies) == 32
        n = raw.user.size
        assert raw.movie.size == raw.rating.size == raw.timestamp.size == n

    def test_user_record(self, raw):
        # uid 3: gender F (3 % 3 == 0), age AGES[3], occupation 3
        assert raw.users[3] == ("F", AGES[3], 3)
        assert raw.users[4] == ("M", AGES[4], 4)

    def test_movie_record(self, raw):
        year, genres = raw.movies[5]
        assert year == 1930 + (5 * 7) % 68
        assert genres == tuple(GENRES[(5 + j) % len(GENRES)]
                               for j in range(1 + 5 % 3))

    def test_rating_bounds(self, raw):
        assert raw.rating.min() >= 1 and raw.rating.max() <= 5

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="users.dat"):
            parse_movielens(tmp_path)

    def test_bad_field_count(self, tmp_path):
        write_fake_movielens(tmp_path)
        path = tmp_path / "users.dat"
        lines = path.read_text(encoding="latin-1").splitlines()
        lines[2] = "99::M::25"
        path.write_text("\n".join(lines) + "\n", encoding="latin-1")
        with pytest.raises(ParseError, match="expected 5") as ei:
            parse_movielens(tmp_path)
        assert ei.value.line_no == 3
        assert ei.value.path.endswith("users.dat")

    def test_rating_out_of_range(self, tmp_path):
        write_fake_movielens(tmp_path)
        with open(tmp_path / "ratings.dat", "a", encoding="latin-1") as fh:
            fh.write("1::1::6::956700001\n")
        with pytest.raises(ParseError, match="outside 1..5"):
            parse_movielens(tmp_path)

    def test_unknown_user_reference(self, tmp_path):
        write_fake_movielens(tmp_path)
        with open(tmp_path / "ratings.dat", "a", encoding="latin-1") as fh:
            fh.write("999::1::4::956700001\n")
        with pytest.raises(ParseError, match="unknown user 999"):
            parse_movielens(tmp_path)

    def test_unknown_movie_reference(self, tmp_path):
        write_fake_movielens(tmp_path)
        with open(tmp_path / "ratings.dat", "a", encoding="latin-1") as fh:
            fh.write("1::999::4::956700001\n")
        with pytest.raises(ParseError, match="unknown movie 999"):
            parse_movielens(tmp_path)

    def test_title_without_year(self, tmp_path):
        write_fake_movielens(tmp_path)
        with open(tmp_path / "movies.dat", "a", encoding="latin-1") as fh:
            fh.write("999::No Year Here::Drama\n")
        with pytest.raises(ParseError, match="lacks a trailing"):
            parse_movielens(tmp_path)

    def test_non_integer_record(self, tmp_path):
        write_fake_movielens(tmp_path)
        with open(tmp_path / "users.dat", "a", encoding="latin-1") as fh:
            fh.write("abc::M::25::0::55999\n")
        with pytest.raises(ParseError, match="bad user record"):
            parse_movielens(tmp_path)

    def test_latin1_bytes(self, tmp_path):
        # the real files carry latin-1 titles; utf-8 decoding would choke
        write_fake_movielens(tmp_path)
        with open(tmp_path / "movies.dat", "ab") as fh:
            fh.write("999::Am\xe9lie (1995)::Romance\n".encode("latin-1"))
        raw = parse_movielens(tmp_path)
        assert raw.movies[999] == (1995, ("Romance",))

    def test_blank_lines_and_crlf(self, tmp_path):
        write_fake_movielens(tmp_path)
        path = tmp_path / "users.dat"
        text = path.read_text(encoding="latin-1")
        path.write_text(text.replace("\n", "\r\n") + "\r\n\r\n",
                        encoding="latin-1")
        assert len(parse_movielens(tmp_path).users) == 16


class TestBuckets:
    @pytest.mark.parametrize("year,bucket", [
        (1919, "pre1950"), (1949, "pre1950"),
        (1950, "1950s"), (1959, "1950s"),
        (1960, "1960s"), (1969, "1960s"),
        (1970, "1970s"), (1979, "1970s"),
        (1980, "1980s"), (1989, "1980s"),
        (1990, "1990-1994"), (1994, "1990-1994"),
        (1995, "1995plus"), (1997, "1995plus"), (2000, "1995plus"),
    ])
    def test_year_boundaries(self, year, bucket):
        assert year_bucket(year) == bucket

    def test_year_always_in_vocab(self):
        for y in range(1900, 2011):
            assert year_bucket(y) in YEAR_BUCKETS

    def test_genre_count(self):
        assert genre_count_bucket(1) == "1"
        assert genre_count_bucket(2) == "2"
        assert genre_count_bucket(3) == "3plus"
        assert genre_count_bucket(11) == "3plus"

    def test_hour_is_utc(self):
        # gmtime and integer arithmetic must agree; the split builder
        # uses the arithmetic form
        rng = np.random.default_rng(11)
        for ts in rng.integers(0, 2**31, size=200):
            ts = int(ts)
            assert hour_bucket(ts) == str((ts // 3600) % 24)
            assert hour_bucket(ts) == str(time.gmtime(ts).tm_hour)


class TestBinarize:
    def test_mapping(self):
        out = binarize_labels([1, 2, 3, 4, 5])
        assert out.tolist() == [0, 0, 0, 1, 1]
        assert out.dtype == np.int64

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="1..5"):
            binarize_labels([0, 4])
        with pytest.raises(ValueError, match="1..5"):
            binarize_labels([4, 6])

    def test_empty(self):
        assert binarize_labels([]).size == 0


class TestVocabulary:
    def test_attr_field_reserves_oov(self):
        v = Vocabulary.build({"color": ["red", "blue"]}, id_fields=())
        assert v.encode("color", "red") == 1
        assert v.encode("color", "blue") == 2
        assert v.encode("color", "green") == 0
        assert v.size("color") == 3
        assert v.decode("color") == [data.OOV, "red", "blue"]

    def test_id_field_has_no_oov(self):
        v = Vocabulary.build({"user_id": ["1", "2"]}, id_fields=("user_id",))
        assert v.encode("user_id", "1") == 0
        assert v.size("user_id") == 2
        with pytest.raises(KeyError, match="unknown user_id"):
            v.encode("user_id", "3")

    def test_duplicates_collapse(self):
        v = Vocabulary.build({"g": ["a", "b", "a"]}, id_fields=())
        assert v.size("g") == 3

    def test_encode_coerces_to_str(self):
        v = Vocabulary.build({"age": ["18", "25"]}, id_fields=())
        assert v.encode("age", 25) == 2

    def test_decode_inverts_encode(self):
        v = Vocabulary.build({"g": list("wxyz")}, id_fields=())
        dec = v.decode("g")
        for raw in "wxyz":
            assert dec[v.encode("g", raw)] == raw


# -- schema and instance containers -------------------------------------

class TestContainers:
    def test_schema_validation(self):
        u = Field("u", "user_id", 3)
        i = Field("i", "item_id", 4)
        FieldSchema((u, i))
        with pytest.raises(ValueError, match="duplicate"):
            FieldSchema((u, Field("u", "item_id", 2)))
        with pytest.raises(ValueError, match="exactly one item_id"):
            FieldSchema((u,))
        with pytest.raises(ValueError, match="exactly one user_id"):
            FieldSchema((u, i, Field("u2", "user_id", 2)))
        with pytest.raises(ValueError, match="unknown kind"):
            Field("x", "mystery", 2)
        with pytest.raises(ValueError, match="size"):
            Field("x", "context", 0)

    def test_instances_shape_checks(self):
        with pytest.raises(ValueError, match="column 'a'"):
            Instances({"a": np.zeros(3, dtype=np.int64)}, np.zeros(2))
        with pytest.raises(ValueError, match="labels must be 0/1"):
            Instances({"a": np.zeros(2, dtype=np.int64)}, np.array([0, 2]))

    def test_take_and_concat(self):
        a = Instances({"f": np.arange(5)}, np.array([0, 1, 0, 1, 1]))
        sub = a.take([4, 0])
        assert sub.columns["f"].tolist() == [4, 0]
        assert sub.labels.tolist() == [1, 0]
        both = Instances.concat([a, sub])
        assert len(both) == 7
        assert both.columns["f"].tolist() == [0, 1, 2, 3, 4, 4, 0]
        empty = Instances.empty(("f",))
        assert len(empty) == 0

    def test_movielens_instance(self, ml_ingest):
        inst = data.movielens_instance(ml_ingest.splits.train, 0)
        tr = ml_ingest.splits.train
        assert inst.user_id == int(tr.columns["user_id"][0])
        assert inst.label == int(tr.labels[0])
        assert isinstance(inst.hour, int)


# -- split construction vs a slow reimplementation ----------------------

def slow_splits(raw, infreq_frac=0.2):
    """Per-row rebuild of the split logic, decoded space throughout.

    Returns (uid, mid, label) tuple lists per split, in the same
    deterministic order the builder promises: users ascending, each
    user's rows by (timestamp, movie).
    """
    rows = list(zip(raw.user.tolist(), raw.movie.tolist(),
                    raw.rating.tolist(), raw.timestamp.tolist()))
    by_user = {}
    for idx, (u, m, r, t) in enumerate(rows):
        by_user.setdefault(u, []).append((t, m, idx))

    def tup(idx):
        u, m, r, _ = rows[idx]
        return (u, m, int(r >= 4))

    train, test, new_user_pos = [], [], []
    for uid in sorted(raw.users):
        ordered = [idx for _, _, idx in sorted(by_user.get(uid, []))]
        if not ordered:
            continue
        if len(ordered) < data.NEW_USER_MAX:
            for idx in ordered:
                new_user_pos.append(len(test))
                test.append(idx)
            continue
        old = [idx for idx in ordered
               if raw.movies[rows[idx][1]][0] <= data.NEW_ITEM_YEAR]
        new = [idx for idx in ordered
               if raw.movies[rows[idx][1]][0] > data.NEW_ITEM_YEAR]
        cut = (4 * len(old)) // 5
        train.extend(old[:cut])
        test.extend(old[cut:])
        test.extend(new)

    new_item_pos = [p for p, idx in enumerate(test)
                    if raw.movies[rows[idx][1]][0] > data.NEW_ITEM_YEAR]

    def bottom(entity):
        counts = Counter(rows[idx][0 if entity == "user" else 1]
                         for idx in train)
        seen = sorted(counts)
        ranked = sorted(seen, key=lambda e: (counts[e], e))
        return set(ranked[:int(len(ranked) * infreq_frac)])

    infreq_u, infreq_i = bottom("user"), bottom("item")
    out = {
        "train": [tup(i) for i in train],
        "test_all": [tup(i) for i in test],
        "test_new_user": [tup(test[p]) for p in new_user_pos],
        "test_new_item": [tup(test[p]) for p in new_item_pos],
        "test_infreq_user": [tup(i) for i in test
                             if rows[i][0] in infreq_u],
        "test_infreq_item": [tup(i) for i in test
                             if rows[i][1] in infreq_i],
    }
    return out


def decode_split(ing, insts):
    uid_of = [int(s) for s in ing.vocab.decode("user_id")]
    mid_of = [int(s) for s in ing.vocab.decode("item_id")]
    return [(uid_of[u], mid_of[m], int(y))
            for u, m, y in zip(insts.columns["user_id"],
                               insts.columns["item_id"], insts.labels)]


class TestBuildSplits:
    def test_matches_slow_reimplementation(self, raw, ml_ingest):
        want = slow_splits(raw)
        for name, insts in ml_ingest.splits.items():
            assert decode_split(ml_ingest, insts) == want[name], name

    def test_every_split_populated_with_both_classes(self, ml_ingest):
        # the fixtures are tuned for this; tests downstream rely on it
        for name, insts in ml_ingest.splits.items():
            assert len(insts) > 0, name
            assert 0 < insts.labels.sum() < len(insts), name

    def test_train_excludes_carveouts(self, raw, ml_ingest):
        mid_of = [int(s) for s in ml_ingest.vocab.decode("item_id")]
        uid_of = [int(s) for s in ml_ingest.vocab.decode("user_id")]
        tr = ml_ingest.splits.train
        rating_count = Counter(raw.user.tolist())
        for code in tr.columns["item_id"]:
            assert raw.movies[mid_of[code]][0] <= data.NEW_ITEM_YEAR
        for code in tr.columns["user_id"]:
            assert rating_count[uid_of[code]] >= data.NEW_USER_MAX

    def test_per_user_cut(self, raw, ml_ingest):
        uid_of = [int(s) for s in ml_ingest.vocab.decode("user_id")]
        train_users = Counter(uid_of[c]
                              for c in ml_ingest.splits.train.columns["user_id"])
        old_counts = Counter()
        for u, m in zip(raw.user.tolist(), raw.movie.tolist()):
            if raw.movies[m][0] <= data.NEW_ITEM_YEAR:
                old_counts[u] += 1
        for uid, n_train in train_users.items():
            assert n_train == (4 * old_counts[uid]) // 5

    def test_attribute_columns_are_entity_constant(self, raw, ml_ingest):
        vocab = ml_ingest.vocab
        uid_of = [int(s) for s in vocab.decode("user_id")]
        mid_of = [int(s) for s in vocab.decode("item_id")]
        for _, insts in ml_ingest.splits.items():
            c = insts.columns
            for i in range(len(insts)):
                g, a, o = raw.users[uid_of[c["user_id"][i]]]
                assert c["gender"][i] == vocab.encode("gender", g)
                assert c["age"][i] == vocab.encode("age", a)
                assert c["occupation"][i] == vocab.encode("occupation", o)
                year, genres = raw.movies[mid_of[c["item_id"][i]]]
                assert c["year"][i] == vocab.encode("year", year_bucket(year))
                assert c["genre"][i] == vocab.encode("genre", genres[0])
                assert c["genre_count"][i] == vocab.encode(
                    "genre_count", genre_count_bucket(len(genres)))

    def test_hour_column_tracks_timestamps(self, raw, ml_ingest):
        # rebuild (user, item, label) -> hour from the raw log; pairs are
        # unique per user in the fake corpus so the join is well defined
        hour_at = {}
        for u, m, r, t in zip(raw.user.tolist(), raw.movie.tolist(),
                              raw.rating.tolist(), raw.timestamp.tolist()):
            hour_at[(u, m)] = (int(t) // 3600) % 24
        vocab = ml_ingest.vocab
        uid_of = [int(s) for s in vocab.decode("user_id")]
        mid_of = [int(s) for s in vocab.decode("item_id")]
        tr = ml_ingest.splits.train
        for i in range(len(tr)):
            key = (uid_of[tr.columns["user_id"][i]],
                   mid_of[tr.columns["item_id"][i]])
            assert tr.columns["hour"][i] == vocab.encode("hour",
                                                         str(hour_at[key]))

    def test_schema_sizes(self, ml_ingest):
        sizes = ml_ingest.schema.sizes()
        assert sizes["user_id"] == 16
        assert sizes["item_id"] == 32
        assert sizes["year"] == 1 + len(YEAR_BUCKETS)
        assert sizes["genre_count"] == 1 + len(GENRE_COUNT_BUCKETS)
        assert sizes["hour"] == 25
        for f in ml_ingest.schema.fields:
            assert f.size == len(ml_ingest.vocab.decode(f.name))

    def test_stats(self, ml_ingest):
        st = ml_ingest.stats
        assert st["counts"] == ml_ingest.splits.counts()
        assert st["n_users"] == 16
        assert st["n_items"] == 32
        assert st["infreq_user_frac"] == 0.2
        n_seen_users = len(set(ml_ingest.splits.train.columns["user_id"]))
        assert st["n_infreq_users"] == int(n_seen_users * 0.2)

    def test_infreq_ranking_breaks_ties_by_code(self, raw):
        ing = build_splits(raw, infreq_item_frac=0.5)
        want = slow_splits(raw, infreq_frac=0.5)
        assert decode_split(ing, ing.splits.test_infreq_item) == \
            want["test_infreq_item"]

    def test_frac_zero_empties_infreq(self, raw):
        ing = build_splits(raw, infreq_user_frac=0.0, infreq_item_frac=0.0)
        assert len(ing.splits.test_infreq_user) == 0
        assert len(ing.splits.test_infreq_item) == 0

    def test_frac_validation(self, raw):
        with pytest.raises(ValueError, match="infreq_user_frac"):
            build_splits(raw, infreq_user_frac=1.5)
        with pytest.raises(ValueError, match="infreq_item_frac"):
            build_splits(raw, infreq_item_frac=-0.1)


class TestFrequencyTable:
    def test_counts_match_counter(self, ml_ingest):
        uf, itf = build_frequency_table(ml_ingest.splits.train,
                                        ml_ingest.schema)
        tr = ml_ingest.splits.train
        for table, col, size in ((uf, "user_id", 16), (itf, "item_id", 32)):
            counts = Counter(tr.columns[col].tolist())
            assert table.counts.shape == (size,)
            for code in range(size):
                assert table.counts[code] == counts.get(code, 0)

    def test_kinds(self, ml_ingest):
        uf, itf = build_frequency_table(ml_ingest.splits.train,
                                        ml_ingest.schema)
        assert uf.kind == "user" and itf.kind == "item"


# -- split-dir round trip -----------------------------------------------

class TestSplitDirIO:
    def test_round_trip(self, ml_ingest, tmp_path):
        write_split_dir(tmp_path, ml_ingest)
        back = load_split_dir(tmp_path)
        for name, insts in ml_ingest.splits.items():
            got = getattr(back.splits, name)
            assert got.labels.tolist() == insts.labels.tolist(), name
            for col in insts.columns:
                assert np.array_equal(got.columns[col], insts.columns[col])
        assert back.vocab.tables == ml_ingest.vocab.tables
        assert back.schema == ml_ingest.schema
        assert back.stats == ml_ingest.stats

    def test_output_bytes_deterministic(self, ml_ingest, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        write_split_dir(a, ml_ingest)
        write_split_dir(b, ml_ingest)
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_tampered_header(self, ml_ingest, tmp_path):
        write_split_dir(tmp_path, ml_ingest)
        path = tmp_path / "train.tsv"
        lines = path.read_text().splitlines()
        lines[0] = lines[0].replace("user_id", "uid")
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="header"):
            load_split_dir(tmp_path)

    def test_short_row(self, ml_ingest, tmp_path):
        write_split_dir(tmp_path, ml_ingest)
        with open(tmp_path / "test_all.tsv", "a") as fh:
            fh.write("1\t2\t3\n")
        with pytest.raises(ParseError, match="columns"):
            load_split_dir(tmp_path)

    def test_non_integer_cell(self, ml_ingest, tmp_path):
        write_split_dir(tmp_path, ml_ingest)
        with open(tmp_path / "test_new_user.tsv", "a") as fh:
            fh.write("\t".join(["x"] * 10) + "\n")
        with pytest.raises(ParseError, match="non-integer"):
            load_split_dir(tmp_path)

    def test_bad_vocab_line(self, ml_ingest, tmp_path):
        write_split_dir(tmp_path, ml_ingest)
        with open(tmp_path / "vocab.tsv", "a") as fh:
            fh.write("onlytwo\tfields\n")
        with pytest.raises(ParseError, match="vocab"):
            load_split_dir(tmp_path)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_split_dir(tmp_path / "nope")


# -- synthetic corpus ---------------------------------------------------

class TestSynth:
    def test_weight_matrix_doubly_centred(self, tiny_synth):
        w = tiny_synth.weights
        assert np.abs(w.mean(axis=0)).max() < 1e-12
        assert np.abs(w.mean(axis=1)).max() < 1e-12

    def test_item_holdout(self, tiny_synth):
        seen_pool = 30 - 30 // 5
        assert tiny_synth.splits.train.columns["item_id"].max() < seen_pool
        new = tiny_synth.splits.test_new_item.columns["item_id"]
        assert new.min() >= seen_pool
        train_items = set(tiny_synth.splits.train.columns["item_id"].tolist())
        assert not train_items & set(new.tolist())

    def test_attr_columns_follow_assignment(self, tiny_synth):
        for _, s in tiny_synth.splits.items():
            if not len(s):
                continue
            u, i = s.columns["user_id"], s.columns["item_id"]
            assert np.array_equal(s.columns["user_attr"],
                                  tiny_synth.user_attr[u])
            assert np.array_equal(s.columns["item_attr"],
                                  tiny_synth.item_attr[i])

    def test_oracle_scores_are_weight_lookups(self, tiny_synth):
        s = tiny_synth.splits.test_new_item
        want = tiny_synth.weights[s.columns["user_attr"],
                                  s.columns["item_attr"]]
        assert np.array_equal(tiny_synth.oracle_scores["test_new_item"], want)

    def test_oracle_stays_strong_on_new_items(self, tiny_synth):
        # attributes fully determine propensity, so the oracle should be
        # far from chance even on held-out items
        assert tiny_synth.oracle_auc["test_new_item"] > 0.85
        assert tiny_synth.oracle_auc["train"] > 0.85

    def test_unused_splits_empty(self, tiny_synth):
        assert len(tiny_synth.splits.test_new_user) == 0
        assert len(tiny_synth.splits.test_infreq_user) == 0
        assert len(tiny_synth.splits.test_infreq_item) == 0

    def test_both_classes_in_train(self, tiny_synth):
        y = tiny_synth.splits.train.labels
        assert 0 < y.sum() < y.size

    def test_deterministic(self):
        a = synth_coldstart(seed=5, n_users=10, n_items=10, n_attrs=3,
                            n_train=50, n_test_new_items=20, n_test_seen=20)
        b = synth_coldstart(seed=5, n_users=10, n_items=10, n_attrs=3,
                            n_train=50, n_test_new_items=20, n_test_seen=20)
        assert np.array_equal(a.splits.train.columns["user_id"],
                              b.splits.train.columns["user_id"])
        assert np.array_equal(a.splits.train.labels, b.splits.train.labels)
        assert np.array_equal(a.weights, b.weights)

    def test_validation(self):
        with pytest.raises(ValueError, match="too small"):
            synth_coldstart(seed=0, n_attrs=1)
        with pytest.raises(ValueError, match="too small"):
            synth_coldstart(seed=0, n_train=0)


class TestBatchIterator:
    def test_covers_every_index_once(self):
        rng = np.random.default_rng(0)
        batches = list(batch_iterator(103, 10, rng))
        assert [b.size for b in batches] == [10] * 10 + [3]
        assert sorted(np.concatenate(batches).tolist()) == list(range(103))

    def test_deterministic_for_fixed_rng(self):
        a = list(batch_iterator(50, 7, np.random.default_rng(3)))
        b = list(batch_iterator(50, 7, np.random.default_rng(3)))
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_shuffles(self):
        a = np.concatenate(list(batch_iterator(100, 10,
                                               np.random.default_rng(1))))
        b = np.concatenate(list(batch_iterator(100, 10,
                                               np.random.default_rng(2))))
        assert not np.array_equal(a, b)

    def test_oversized_batch(self):
        batches = list(batch_iterator(5, 100, np.random.default_rng(0)))
        assert len(batches) == 1 and batches[0].size == 5

    def test_validation(self):
        with pytest.raises(ValueError):
            list(batch_iterator(0, 10, np.random.default_rng(0)))
        with pytest.raises(ValueError):
            list(batch_iterator(10, 0, np.random.default_rng(0)))
