"""Dataset pipeline: raw rating logs to coded, split instance tables.

The MovieLens path parses the three "::"-separated files, binarises
ratings at >= 4, and builds the evaluation splits: a per-user temporal
80/20, with carve-outs that never reach train at all: movies released
after 1997 (new items) and users with fewer than 30 ratings (new users),
plus low-frequency tails ranked on train counts.  Attribute vocabularies
come from the metadata files, so a cold-start entity still encodes; ID
codes cover every known entity while "seen" is decided by train
frequency.

The synthetic corpus exists to isolate cold-start behaviour: labels are
generated from a doubly-centred attribute-pair weight matrix, so item
identity carries no signal beyond its attribute and a memorised-ID model
has nothing to say about held-out items.
"""

import json
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation

FIELD_KINDS = ("user_id", "item_id", "user_attr", "item_attr", "context")

SPLIT_NAMES = ("train", "test_all", "test_new_user", "test_new_item",
               "test_infreq_user", "test_infreq_item")

OOV = "<oov>"

NEW_ITEM_YEAR = 1997     # released after this -> never in train
NEW_USER_MAX = 30        # fewer ratings than this -> user wholly in test
POSITIVE_THRESHOLD = 4

YEAR_BUCKETS = ("pre1950", "1950s", "1960s", "1970s", "1980s",
                "1990-1994", "1995plus")
GENRE_COUNT_BUCKETS = ("1", "2", "3plus")


class ParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {msg}")


@dataclass(frozen=True)
class Field:
    name: str
    kind: str
    size: int

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"field {self.name!r}: unknown kind {self.kind!r}")
        if self.size < 1:
            raise ValueError(f"field {self.name!r}: size must be >= 1")


@dataclass(frozen=True)
class FieldSchema:
    fields: tuple[Field, ...]

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"schema: duplicate field names in {names}")
        for kind in ("user_id", "item_id"):
            if sum(f.kind == kind for f in self.fields) != 1:
                raise ValueError(f"schema: exactly one {kind} field required")

    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def field(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(f"schema has no field {name!r}")

    def by_kind(self, kind: str) -> tuple[Field, ...]:
        return tuple(f for f in self.fields if f.kind == kind)

    @property
    def user_id(self) -> Field:
        return self.by_kind("user_id")[0]

    @property
    def item_id(self) -> Field:
        return self.by_kind("item_id")[0]

    def sizes(self) -> dict[str, int]:
        return {f.name: f.size for f in self.fields}


class Instances:
    """Columnar instance store: one int-code column per field plus labels."""

    def __init__(self, columns: dict[str, np.ndarray], labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.int64)
        n = labels.size
        cols = {}
        for name, c in columns.items():
            c = np.asarray(c, dtype=np.int64)
            if c.shape != (n,):
                raise ValueError(
                    f"instances: column {name!r} has shape {c.shape}, "
                    f"labels have {labels.shape}")
            cols[name] = c
        if np.any((labels != 0) & (labels != 1)):
            raise ValueError("instances: labels must be 0/1")
        self.columns = cols
        self.labels = labels

    @classmethod
    def empty(cls, names) -> "Instances":
        z = np.zeros(0, dtype=np.int64)
        return cls({n: z.copy() for n in names}, z.copy())

    def __len__(self) -> int:
        return self.labels.size

    def take(self, idx) -> "Instances":
        idx = np.asarray(idx)
        return Instances({n: c[idx] for n, c in self.columns.items()},
                         self.labels[idx])

    @staticmethod
    def concat(parts: list["Instances"]) -> "Instances":
        names = parts[0].columns.keys()
        return Instances(
            {n: np.concatenate([p.columns[n] for p in parts]) for n in names},
            np.concatenate([p.labels for p in parts]))


@dataclass(frozen=True)
class Instance:
    """One MovieLens instance, all fields integer-coded."""

    user_id: int
    gender: int
    age: int
    occupation: int
    item_id: int
    year: int
    genre: int
    genre_count: int
    hour: int
    label: int


MOVIELENS_FIELD_KINDS = (
    ("user_id", "user_id"),
    ("gender", "user_attr"),
    ("age", "user_attr"),
    ("occupation", "user_attr"),
    ("item_id", "item_id"),
    ("year", "item_attr"),
    ("genre", "item_attr"),
    ("genre_count", "item_attr"),
    ("hour", "context"),
)


def movielens_instance(insts: Instances, i: int) -> Instance:
    return Instance(**{n: int(insts.columns[n][i])
                       for n, _ in MOVIELENS_FIELD_KINDS},
                    label=int(insts.labels[i]))


@dataclass
class SplitSet:
    train: Instances
    test_all: Instances
    test_new_user: Instances
    test_new_item: Instances
    test_infreq_user: Instances
    test_infreq_item: Instances

    def items(self):
        for name in SPLIT_NAMES:
            yield name, getattr(self, name)

    def counts(self) -> dict[str, int]:
        return {name: len(s) for name, s in self.items()}


# -- parsing ------------------------------------------------------------

@dataclass
class MovieLensRaw:
    user: np.ndarray
    movie: np.ndarray
    rating: np.ndarray
    timestamp: np.ndarray
    users: dict[int, tuple[str, int, int]]          # uid -> gender, age, occ
    movies: dict[int, tuple[int, tuple[str, ...]]]  # mid -> year, genres


_TITLE_YEAR = re.compile(r"\((\d{4})\)\s*$")


def _read_lines(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"missing dataset file: {path}")
    with open(path, encoding="latin-1") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line:
                yield line_no, line


def _split_fields(path, line_no, line, n):
    parts = line.split("::")
    if len(parts) != n:
        raise ParseError(path, line_no,
                         f"expected {n} '::'-separated fields, got {len(parts)}")
    return parts


def parse_movielens(data_dir) -> MovieLensRaw:
    """Read ratings.dat, users.dat, movies.dat from ``data_dir``."""
    data_dir = Path(data_dir)
    users = {}
    path = data_dir / "users.dat"
    for line_no, line in _read_lines(path):
        uid, gender, age, occ, _zip = _split_fields(path, line_no, line, 5)
        try:
            users[int(uid)] = (gender, int(age), int(occ))
        except ValueError:
            raise ParseError(path, line_no, f"bad user record {line!r}") from None

    movies = {}
    path = data_dir / "movies.dat"
    for line_no, line in _read_lines(path):
        mid, title, genres = _split_fields(path, line_no, line, 3)
        m = _TITLE_YEAR.search(title)
        if m is None:
            raise ParseError(path, line_no,
                             f"title {title!r} lacks a trailing (year)")
        try:
            movies[int(mid)] = (int(m.group(1)),
                                tuple(genres.strip().split("|")))
        except ValueError:
            raise ParseError(path, line_no, f"bad movie record {line!r}") from None

    rows = []
    path = data_dir / "ratings.dat"
    for line_no, line in _read_lines(path):
        parts = _split_fields(path, line_no, line, 4)
        try:
            rows.append(tuple(int(p) for p in parts))
        except ValueError:
            raise ParseError(path, line_no, f"bad rating record {line!r}") from None
        uid, mid, rating, _ts = rows[-1]
        if not 1 <= rating <= 5:
            raise ParseError(path, line_no, f"rating {rating} outside 1..5")
        if uid not in users:
            raise ParseError(path, line_no, f"rating references unknown user {uid}")
        if mid not in movies:
            raise ParseError(path, line_no, f"rating references unknown movie {mid}")
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return MovieLensRaw(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3],
                        users, movies)


def binarize_labels(ratings) -> np.ndarray:
    """Ratings >= 4 become positives."""
    r = np.asarray(ratings)
    if r.size and (r.min() < 1 or r.max() > 5):
        raise ValueError("ratings must lie in 1..5")
    return (r >= POSITIVE_THRESHOLD).astype(np.int64)


def year_bucket(year: int) -> str:
    if year < 1950:
        return "pre1950"
    if year < 1990:
        return f"{(year // 10) * 10}s"
    if year < 1995:
        return "1990-1994"
    return "1995plus"


def genre_count_bucket(n: int) -> str:
    return "3plus" if n >= 3 else str(n)


def hour_bucket(ts: int) -> str:
    return str(time.gmtime(ts).tm_hour)


# -- vocabularies -------------------------------------------------------

class Vocabulary:
    """Per-field raw-string -> code maps.

    Attribute and context fields reserve code 0 for out-of-vocabulary
    values; ID fields enumerate the full entity population instead and
    treat an unknown raw ID as an error.
    """

    def __init__(self, tables: dict[str, dict[str, int]],
                 id_fields: frozenset[str]):
        self.tables = tables
        self.id_fields = frozenset(id_fields)

    @classmethod
    def build(cls, values: dict[str, list[str]],
              id_fields) -> "Vocabulary":
        id_fields = frozenset(id_fields)
        tables = {}
        for name, vals in values.items():
            table = {}
            if name not in id_fields:
                table[OOV] = 0
            for v in vals:
                if v not in table:
                    table[v] = len(table)
            tables[name] = table
        return cls(tables, id_fields)

    def size(self, name: str) -> int:
        return len(self.tables[name])

    def encode(self, name: str, raw) -> int:
        raw = str(raw)
        table = self.tables[name]
        if raw in table:
            return table[raw]
        if name in self.id_fields:
            raise KeyError(f"unknown {name} value {raw!r}")
        return 0

    def decode(self, name: str) -> list[str]:
        table = self.tables[name]
        out = [None] * len(table)
        for raw, code in table.items():
            out[code] = raw
        return out


def _sorted_numeric(values) -> list[str]:
    return [str(v) for v in sorted(values)]


# -- split construction -------------------------------------------------

@dataclass
class IngestResult:
    schema: FieldSchema
    vocab: Vocabulary
    splits: SplitSet
    stats: dict


def movielens_schema(vocab: Vocabulary) -> FieldSchema:
    return FieldSchema(tuple(
        Field(name, kind, vocab.size(name))
        for name, kind in MOVIELENS_FIELD_KINDS))


def build_splits(raw: MovieLensRaw, infreq_user_frac: float = 0.2,
                 infreq_item_frac: float = 0.2) -> IngestResult:
    """Carve the rating log into train and the overlapping test views.

    Per user, instances sort by timestamp (movie id breaking ties); the
    first 80% of the pre-cutoff ones train, the rest test.  Post-cutoff
    movies and whole short-history users go entirely to test.  The
    infrequent views rank seen entities by train count afterwards.
    """
    for frac, label in ((infreq_user_frac, "user"), (infreq_item_frac, "item")):
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"infreq_{label}_frac must lie in [0, 1]")

    vocab = Vocabulary.build({
        "user_id": _sorted_numeric(raw.users),
        "gender": sorted({g for g, _, _ in raw.users.values()}),
        "age": _sorted_numeric({a for _, a, _ in raw.users.values()}),
        "occupation": _sorted_numeric({o for _, _, o in raw.users.values()}),
        "item_id": _sorted_numeric(raw.movies),
        "year": list(YEAR_BUCKETS),
        "genre": sorted({g[0] for _, g in raw.movies.values() if g}),
        "genre_count": list(GENRE_COUNT_BUCKETS),
        "hour": [str(h) for h in range(24)],
    }, id_fields=("user_id", "item_id"))
    schema = movielens_schema(vocab)

    labels = binarize_labels(raw.rating)
    # ID codes are ranks in the numerically sorted populations, which is
    # exactly what Vocabulary.build produced; searchsorted recovers them
    # without a per-row dict walk
    uid_sorted = np.array(sorted(raw.users), dtype=np.int64)
    mid_sorted = np.array(sorted(raw.movies), dtype=np.int64)
    user_code = np.searchsorted(uid_sorted, raw.user)
    item_code = np.searchsorted(mid_sorted, raw.movie)

    # per-entity attribute codes, indexed by entity code
    g_codes = np.array([vocab.encode("gender", raw.users[int(u)][0])
                        for u in uid_sorted])
    a_codes = np.array([vocab.encode("age", raw.users[int(u)][1])
                        for u in uid_sorted])
    o_codes = np.array([vocab.encode("occupation", raw.users[int(u)][2])
                        for u in uid_sorted])
    y_codes = np.array([vocab.encode("year", year_bucket(raw.movies[int(m)][0]))
                        for m in mid_sorted])

    def _genre_code(genres):
        return vocab.encode("genre", genres[0] if genres else OOV)

    gen_codes = np.array([_genre_code(raw.movies[int(m)][1])
                          for m in mid_sorted])
    gc_codes = np.array([vocab.encode("genre_count",
                                      genre_count_bucket(len(raw.movies[int(m)][1])))
                         for m in mid_sorted])
    hour_lut = np.array([vocab.encode("hour", str(h)) for h in range(24)])
    hour_codes = hour_lut[(raw.timestamp // 3600) % 24]

    # per-user ordered instance lists
    by_user: dict[int, list[int]] = {}
    order = np.lexsort((raw.movie, raw.timestamp))
    for i in order:
        by_user.setdefault(int(raw.user[i]), []).append(int(i))

    is_new_movie = {mid: year > NEW_ITEM_YEAR
                    for mid, (year, _) in raw.movies.items()}
    new_by_code = np.array([is_new_movie[int(m)] for m in mid_sorted],
                           dtype=bool)

    train_idx: list[int] = []
    test_idx: list[int] = []
    new_user_rows: list[int] = []   # positions within test_idx
    skipped_users = 0
    for uid in sorted(raw.users):
        rows = by_user.get(uid)
        if not rows:
            skipped_users += 1
            continue
        if len(rows) < NEW_USER_MAX:
            for i in rows:
                new_user_rows.append(len(test_idx))
                test_idx.append(i)
            continue
        old = [i for i in rows if not is_new_movie[int(raw.movie[i])]]
        new = [i for i in rows if is_new_movie[int(raw.movie[i])]]
        cut = (4 * len(old)) // 5
        train_idx.extend(old[:cut])
        test_idx.extend(old[cut:])
        test_idx.extend(new)

    train_idx = np.array(train_idx, dtype=np.int64)
    test_idx = np.array(test_idx, dtype=np.int64)

    def encode_rows(idx: np.ndarray) -> Instances:
        uc, ic = user_code[idx], item_code[idx]
        cols = {
            "user_id": uc,
            "gender": g_codes[uc],
            "age": a_codes[uc],
            "occupation": o_codes[uc],
            "item_id": ic,
            "year": y_codes[ic],
            "genre": gen_codes[ic],
            "genre_count": gc_codes[ic],
            "hour": hour_codes[idx],
        }
        return Instances(cols, labels[idx])

    train = encode_rows(train_idx)
    test_all = encode_rows(test_idx)

    new_user_mask = np.zeros(test_idx.size, dtype=bool)
    if new_user_rows:
        new_user_mask[np.array(new_user_rows, dtype=np.int64)] = True
    new_item_mask = new_by_code[item_code[test_idx]]

    def bottom_codes(codes: np.ndarray, frac: float) -> np.ndarray:
        counts = np.bincount(codes)
        seen = np.flatnonzero(counts)
        ranked = seen[np.lexsort((seen, counts[seen]))]  # count asc, code asc
        k = int(len(ranked) * frac)
        return ranked[:k]

    infreq_users = bottom_codes(train.columns["user_id"], infreq_user_frac)
    infreq_items = bottom_codes(train.columns["item_id"], infreq_item_frac)
    infreq_user_mask = np.isin(test_all.columns["user_id"], infreq_users)
    infreq_item_mask = np.isin(test_all.columns["item_id"], infreq_items)

    splits = SplitSet(
        train=train,
        test_all=test_all,
        test_new_user=test_all.take(np.flatnonzero(new_user_mask)),
        test_new_item=test_all.take(np.flatnonzero(new_item_mask)),
        test_infreq_user=test_all.take(np.flatnonzero(infreq_user_mask)),
        test_infreq_item=test_all.take(np.flatnonzero(infreq_item_mask)),
    )
    stats = {
        "counts": splits.counts(),
        "n_users": len(raw.users),
        "n_items": len(raw.movies),
        "skipped_users": skipped_users,
        "infreq_user_frac": infreq_user_frac,
        "infreq_item_frac": infreq_item_frac,
        "n_infreq_users": int(infreq_users.size),
        "n_infreq_items": int(infreq_items.size),
    }
    return IngestResult(schema, vocab, splits, stats)


def build_frequency_table(train: Instances, schema: FieldSchema):
    """(user, item) training occurrence counts, dense over the vocab."""
    from .varembed import FrequencyTable
    u = schema.user_id
    i = schema.item_id
    return (FrequencyTable.from_codes(train.columns[u.name], u.size, kind="user"),
            FrequencyTable.from_codes(train.columns[i.name], i.size, kind="item"))


# -- synthetic cold-start corpus ----------------------------------------

@dataclass
class SynthData:
    schema: FieldSchema
    splits: SplitSet
    oracle_scores: dict[str, np.ndarray]
    oracle_auc: dict[str, float]
    user_attr: np.ndarray
    item_attr: np.ndarray
    weights: np.ndarray


def synth_coldstart(seed: int, n_users: int = 2000, n_items: int = 2000,
                    n_attrs: int = 8, n_train: int = 100_000,
                    n_test_new_items: int = 20_000, n_test_seen: int = 20_000,
                    label_scale: float = 4.0) -> SynthData:
    """Corpus where attributes fully determine click propensity.

    The attribute-pair weight matrix is doubly centred, so no user, item,
    or single attribute carries marginal signal: a model that memorises
    IDs scores near chance on items held out of training, while the
    attribute oracle stays strong.  A fifth of the items never appear in
    train and form the new-item test; the seen-item test draws from the
    train population.
    """
    if min(n_users, n_items, n_attrs) < 2 or min(n_train, n_test_new_items,
                                                 n_test_seen) < 1:
        raise ValueError("synth: population and sample sizes too small")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    user_attr = rng.integers(0, n_attrs, size=n_users)
    item_attr = rng.integers(0, n_attrs, size=n_items)
    w = rng.standard_normal((n_attrs, n_attrs))
    w = w - w.mean(axis=1, keepdims=True)
    w = w - w.mean(axis=0, keepdims=True)
    w = w * label_scale

    n_new = n_items // 5
    seen_pool = n_items - n_new

    def draw(n: int, lo: int, hi: int) -> Instances:
        u = rng.integers(0, n_users, size=n)
        i = rng.integers(lo, hi, size=n)
        logits = w[user_attr[u], item_attr[i]]
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.int64)
        return Instances({
            "user_id": u, "item_id": i,
            "user_attr": user_attr[u], "item_attr": item_attr[i],
        }, y)

    train = draw(n_train, 0, seen_pool)
    test_seen = draw(n_test_seen, 0, seen_pool)
    test_new = draw(n_test_new_items, seen_pool, n_items)
    test_all = Instances.concat([test_seen, test_new])

    names = ("user_id", "item_id", "user_attr", "item_attr")
    splits = SplitSet(
        train=train, test_all=test_all, test_new_user=Instances.empty(names),
        test_new_item=test_new, test_infreq_user=Instances.empty(names),
        test_infreq_item=Instances.empty(names),
    )
    schema = FieldSchema((
        Field("user_id", "user_id", n_users),
        Field("item_id", "item_id", n_items),
        Field("user_attr", "user_attr", n_attrs),
        Field("item_attr", "item_attr", n_attrs),
    ))

    def oracle(s: Instances) -> np.ndarray:
        return w[s.columns["user_attr"], s.columns["item_attr"]].astype(
            np.float64)

    oracle_scores = {name: oracle(s) for name, s in splits.items()}
    oracle_auc = {}
    for name, s in splits.items():
        if len(s) and 0 < s.labels.sum() < len(s):
            oracle_auc[name] = evaluation.auc(oracle_scores[name], s.labels)
    return SynthData(schema, splits, oracle_scores, oracle_auc,
                     user_attr, item_attr, w)


# -- batching -----------------------------------------------------------

def batch_iterator(n: int, batch_size: int, rng):
    """Yield index arrays covering one shuffled epoch; the final short
    batch is kept."""
    if n < 1 or batch_size < 1:
        raise ValueError("batch_iterator: n and batch_size must be >= 1")
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


# -- split-dir round trip -----------------------------------------------

def write_split_dir(out_dir, result: IngestResult) -> None:
    """Materialise an IngestResult: one TSV per split, vocab sidecar,
    stats.json.  Output bytes are a pure function of the input."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = result.schema.names()
    for split, insts in result.splits.items():
        with open(out / f"{split}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\t".join(names + ("label",)) + "\n")
            cols = [insts.columns[n] for n in names]
            for i in range(len(insts)):
                row = [str(int(c[i])) for c in cols]
                row.append(str(int(insts.labels[i])))
                fh.write("\t".join(row) + "\n")
    with open(out / "vocab.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for name in names:
            for code, raw in enumerate(result.vocab.decode(name)):
                fh.write(f"{name}\t{raw}\t{code}\n")
    with open(out / "stats.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result.stats, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_split_dir(split_dir) -> IngestResult:
    """Read back what write_split_dir produced."""
    d = Path(split_dir)
    path = d / "vocab.tsv"
    tables: dict[str, dict[str, int]] = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(path, line_no, "expected field\\traw\\tcode")
        name, raw, code = parts
        table = tables.setdefault(name, {})
        try:
            table[raw] = int(code)
        except ValueError:
            raise ParseError(path, line_no, f"bad code {code!r}") from None
    vocab = Vocabulary(tables, id_fields=("user_id", "item_id"))
    schema = movielens_schema(vocab)
    names = schema.names()

    def read_split(split: str) -> Instances:
        path = d / f"{split}.tsv"
        expect = "\t".join(names + ("label",))
        rows = []
        header = None
        for line_no, line in _read_lines(path):
            if header is None:
                header = line
                if header != expect:
                    raise ParseError(path, line_no,
                                     f"header {header!r} != {expect!r}")
                continue
            parts = line.split("\t")
            if len(parts) != len(names) + 1:
                raise ParseError(path, line_no,
                                 f"expected {len(names) + 1} columns")
            try:
                rows.append([int(p) for p in parts])
            except ValueError:
                raise ParseError(path, line_no, "non-integer value") from None
        arr = np.array(rows, dtype=np.int64).reshape(-1, len(names) + 1)
        cols = {n: arr[:, j] for j, n in enumerate(names)}
        return Instances(cols, arr[:, -1])

    splits = SplitSet(**{name: read_split(name) for name in SPLIT_NAMES})
    stats_path = d / "stats.json"
    stats = {}
    if stats_path.is_file():
        stats = json.loads(stats_path.read_text(encoding="utf-8"))
    return IngestResult(schema, vocab, splits, stats)
