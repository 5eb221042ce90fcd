"""Shared fixtures: a small fake rating log in the MovieLens file format.

The generator is tuned so every split the ingest produces is non-empty
(test_data pins that property): a dozen heavy raters plus a handful of
sparse ones, mostly pre-1998 movies plus a few later releases that can
only ever appear in test.
"""

import numpy as np
import pytest

GENRES = ("Action", "Comedy", "Drama", "Thriller", "Romance", "Sci-Fi",
          "Horror", "Animation")
AGES = (1, 18, 25, 35, 45, 50, 56)


def write_fake_movielens(root, seed=7, n_old_users=12, n_new_users=4,
                         n_old_movies=26, n_new_movies=6):
    rng = np.random.default_rng(seed)
    n_users = n_old_users + n_new_users
    n_movies = n_old_movies + n_new_movies

    users = []
    for uid in range(1, n_users + 1):
        gender = "F" if uid % 3 == 0 else "M"
        age = AGES[uid % len(AGES)]
        occ = uid % 21
        users.append(f"{uid}::{gender}::{age}::{occ}::55{uid:03d}")
    (root / "users.dat").write_text("\n".join(users) + "\n", encoding="latin-1")

    movies = []
    for mid in range(1, n_movies + 1):
        if mid <= n_old_movies:
            year = 1930 + (mid * 7) % 68  # spread over 1930..1997
        else:
            year = 1998 + (mid % 3)
        k = 1 + mid % 3
        genre = "|".join(GENRES[(mid + j) % len(GENRES)] for j in range(k))
        movies.append(f"{mid}::Film No. {mid} ({year})::{genre}")
    (root / "movies.dat").write_text("\n".join(movies) + "\n",
                                     encoding="latin-1")

    rows = []
    base_ts = 956_700_000
    for uid in range(1, n_users + 1):
        heavy = uid <= n_old_users
        count = int(rng.integers(32, 44)) if heavy else int(rng.integers(4, 8))
        count = min(count, n_movies)
        mids = 1 + rng.permutation(n_movies)[:count]
        ts = base_ts + uid * 50_000 + np.sort(rng.integers(0, 3_000_000,
                                                           size=count))
        for j in range(count):
            rating = int(rng.integers(1, 6))
            rows.append(f"{mids[j]}::{uid}::{rating}::{ts[j]}")
    # file stores UserID::MovieID::Rating::Timestamp
    rows = [r.split("::") for r in rows]
    lines = [f"{u}::{m}::{r}::{t}" for m, u, r, t in rows]
    (root / "ratings.dat").write_text("\n".join(lines) + "\n",
                                      encoding="latin-1")
    return root


@pytest.fixture(scope="session")
def ml_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("fakeml")
    return write_fake_movielens(root)


@pytest.fixture(scope="session")
def ml_ingest(ml_dir):
    from velf import data
    return data.build_splits(data.parse_movielens(ml_dir))


@pytest.fixture(scope="session")
def tiny_synth():
    from velf import data
    return data.synth_coldstart(seed=3, n_users=40, n_items=30, n_attrs=4,
                                n_train=1500, n_test_new_items=300,
                                n_test_seen=300)
