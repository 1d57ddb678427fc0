"""Synthetic reasoning-tagged corpus generation and analytical/descriptive filtering.

The generator emits table/sentence pairs whose category labels are exact by
construction: every reference is instantiated from a per-category template
whose claim is re-derivable from the table by brute force (argmax for
superlatives, column reductions for numeric claims, year arithmetic for
durations, a built-in alias lexicon for entity surface forms).

Two table archetypes cover the six categories: a "climate" table (months and
a daily-mean column, used for superlative/numeric/count/restate claims) and a
club "roster" table (members with a numeric attribute and first/last active
years, which additionally supports duration and alias claims).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .errors import ConfigError, DataError
from .numerics.rng import RngStream
from .tables import Instance, Table, canonical_categories, tokenize

# -- lexicons -------------------------------------------------------------------

MONTHS = (
    "january", "february", "march", "april", "may", "june",
    "july", "august", "september", "october", "november", "december",
)

SURNAMES = (
    "adler", "barnes", "cole", "dawson", "ellis", "farley", "gibson", "hale",
    "ibarra", "jensen", "keller", "lowe", "mercer", "nolan", "okafor", "perez",
    "quinn", "reyes", "sutton", "tanaka", "usher", "vance", "walsh", "xu",
    "yates", "zhou", "abbott", "briggs", "cruz", "dalton",
)

_CITIES = (
    "ashford", "brayton", "calder", "denholm", "eastvale", "farrow", "glenbrook",
    "harwick", "ivydale", "jarrow", "kelsey", "larkfield", "midhurst", "norbury",
    "oakden", "pelham", "quarfield", "redbrook", "selwyn", "thornbury", "ulverton",
    "verlane", "westcliff", "yarrow", "zeltham",
)

_CLUB_KINDS = (("rowing club", "rc"), ("cricket club", "cc"), ("athletics club", "ac"), ("football club", "fc"))

# full organization name (used as table title) -> short alias (used in references)
ALIAS_LEXICON: dict[str, str] = {
    f"{city} {kind}": f"{city} {abbr}" for city in _CITIES for kind, abbr in _CLUB_KINDS
}

# metric column name -> (word for the column maximum, word for the minimum)
SUPERLATIVE_FLAVORS = {
    "age": ("oldest", "youngest"),
    "height": ("tallest", "shortest"),
    "speed": ("fastest", "slowest"),
    "weight": ("heaviest", "lightest"),
    "daily mean": ("warmest", "coolest"),
}


# -- generator configuration ------------------------------------------------------

DEFAULT_MIX: dict[str, float] = {
    "descriptive": 0.22,
    "tabular": 0.10,
    "numerical": 0.10,
    "temporal": 0.10,
    "commonsense": 0.10,
    "entity": 0.10,
    "numerical+commonsense": 0.07,
    "tabular+numerical": 0.07,
    "temporal+commonsense": 0.06,
    "numerical+temporal+commonsense": 0.08,
}


def _parse_mix_key(key: str) -> frozenset[str]:
    try:
        return frozenset(canonical_categories(key.split("+")))
    except DataError as exc:
        raise ConfigError(f"bad category mix key {key!r}: {exc}") from None


def mix_key(categories: Iterable[str]) -> str:
    return "+".join(canonical_categories(categories))


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the synthetic corpus: category mix, table sizes, value ranges."""

    mix: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    rows_range: tuple[int, int] = (3, 6)
    value_range: tuple[int, int] = (5, 30)
    year_range: tuple[int, int] = (1962, 1996)
    duration_range: tuple[int, int] = (2, 25)
    seed: int = 0

    def __post_init__(self):
        if not self.mix:
            raise ConfigError("category mix must be non-empty")
        total = 0.0
        for key, p in self.mix.items():
            _parse_mix_key(key)
            if p < 0:
                raise ConfigError(f"mix probability for {key!r} is negative")
            total += p
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mix probabilities sum to {total}, expected 1")
        for name in ("rows_range", "value_range", "year_range", "duration_range"):
            lo, hi = getattr(self, name)
            if lo >= hi:
                raise ConfigError(f"{name} ({lo}, {hi}) is degenerate")
        if self.rows_range[0] < 2:
            raise ConfigError("tables need at least 2 rows for comparative claims")


# -- clause generators --------------------------------------------------------------
#
# Each clause returns (text, highlight set). Claims stay within the template
# family so the test-side brute-force checker can re-derive every one.


def _column_values(table: Table, col: int) -> list[int]:
    return [int(row[col]) for row in table.rows]


def _clause_descriptive(table: Table, col: int, row: int) -> tuple[str, set]:
    label_word = "in" if table.headers[0] == "month" else "of"
    return (
        f"the {table.headers[col]} {label_word} {table.rows[row][0]} is {table.rows[row][col]}",
        {(row, 0), (row, col)},
    )


def _clause_numerical(table: Table, col: int, op: str) -> tuple[str, set]:
    values = _column_values(table, col)
    header = table.headers[col]
    hl = {(r, col) for r in range(len(table.rows))}
    if op == "highest":
        return f"the highest {header} is {max(values)}", hl
    if op == "lowest":
        return f"the lowest {header} is {min(values)}", hl
    if op == "total":
        return f"the total {header} is {sum(values)}", hl
    return f"the gap between the highest and lowest {header} is {max(values) - min(values)}", hl


def _clause_commonsense(table: Table, col: int, want_max: bool) -> tuple[str, set]:
    values = _column_values(table, col)
    row = values.index(max(values)) if want_max else values.index(min(values))
    hi_word, lo_word = SUPERLATIVE_FLAVORS[table.headers[col]]
    word = hi_word if want_max else lo_word
    noun = "month" if table.headers[0] == "month" else "member"
    return f"the {word} {noun} is {table.rows[row][0]}", {(row, 0), (row, col)}


def _clause_tabular(table: Table, col: int, threshold: int) -> tuple[str, set]:
    values = _column_values(table, col)
    k = sum(1 for v in values if v > threshold)
    noun = "months" if table.headers[0] == "month" else "members"
    example = next(r for r, v in enumerate(values) if v > threshold)
    return (
        f"{k} of the {len(values)} {noun} have a {table.headers[col]} above {threshold}",
        {(example, 0), (example, col)},
    )


def _clause_temporal(table: Table, row: int) -> tuple[str, set]:
    first = int(table.rows[row][2])
    last = int(table.rows[row][3])
    return f"{table.rows[row][0]} was active for {last - first} years", {(row, 2), (row, 3)}


def _clause_entity(table: Table, row: int) -> tuple[str, set]:
    alias = ALIAS_LEXICON[table.title]
    return f"{table.rows[row][0]} is a member of {alias}", {(row, 0)}


# -- table archetypes -----------------------------------------------------------------


def _distinct_ints(rng: RngStream, lo: int, hi: int, n: int) -> list[int]:
    pool = list(range(lo, hi + 1))
    if n > len(pool):
        raise ConfigError(f"value range ({lo}, {hi}) too narrow for {n} distinct values")
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[int(i)] for i in idx]


def _make_climate_table(spec: GeneratorSpec, rng: RngStream, table_id: str) -> Table:
    n = int(rng.integers(spec.rows_range[0], spec.rows_range[1] + 1))
    n = min(n, len(MONTHS))
    month_idx = sorted(int(i) for i in rng.choice(len(MONTHS), size=n, replace=False))
    temps = _distinct_ints(rng, spec.value_range[0], spec.value_range[1], n)
    city = _CITIES[int(rng.integers(0, len(_CITIES)))]
    rows = tuple((MONTHS[m], str(t)) for m, t in zip(month_idx, temps))
    return Table(id=table_id, title=city, section_title="climate", headers=("month", "daily mean"), rows=rows)


def _make_roster_table(spec: GeneratorSpec, rng: RngStream, table_id: str) -> Table:
    n = int(rng.integers(spec.rows_range[0], spec.rows_range[1] + 1))
    metric = ("age", "height", "speed", "weight")[int(rng.integers(0, 4))]
    names_idx = rng.choice(len(SURNAMES), size=n, replace=False)
    values = _distinct_ints(rng, spec.value_range[0], spec.value_range[1], n)
    title = list(ALIAS_LEXICON)[int(rng.integers(0, len(ALIAS_LEXICON)))]
    rows = []
    for i in range(n):
        first = int(rng.integers(spec.year_range[0], spec.year_range[1] + 1))
        last = first + int(rng.integers(spec.duration_range[0], spec.duration_range[1] + 1))
        rows.append((SURNAMES[int(names_idx[i])], str(values[i]), str(first), str(last)))
    return Table(
        id=table_id,
        title=title,
        section_title="roster",
        headers=("name", metric, "first year", "last year"),
        rows=tuple(rows),
    )


def _generate_instance(spec: GeneratorSpec, categories: frozenset[str], rng: RngStream, table_id: str) -> Instance:
    needs_roster = bool(categories & {"temporal", "entity"})
    if categories == {"descriptive"}:
        needs_roster = bool(rng.integers(0, 2))
    if needs_roster:
        table = _make_roster_table(spec, rng, table_id)
        metric_col = 1
    else:
        table = _make_climate_table(spec, rng, table_id)
        metric_col = 1

    values = _column_values(table, metric_col)
    clauses: list[tuple[str, set]] = []
    for cat in canonical_categories(categories):
        if cat == "descriptive":
            clauses.append(_clause_descriptive(table, metric_col, int(rng.integers(0, len(table.rows)))))
        elif cat == "numerical":
            op = ("highest", "lowest", "total", "gap")[int(rng.integers(0, 4))]
            clauses.append(_clause_numerical(table, metric_col, op))
        elif cat == "commonsense":
            clauses.append(_clause_commonsense(table, metric_col, want_max=bool(rng.integers(0, 2))))
        elif cat == "tabular":
            between = sorted(values)
            pick = int(rng.integers(0, len(between) - 1))
            threshold = between[pick]  # at least one value above, at least one not
            clauses.append(_clause_tabular(table, metric_col, threshold))
        elif cat == "temporal":
            clauses.append(_clause_temporal(table, int(rng.integers(0, len(table.rows)))))
        elif cat == "entity":
            clauses.append(_clause_entity(table, int(rng.integers(0, len(table.rows)))))

    reference = " and ".join(text for text, _ in clauses)
    highlights: set = set()
    for _, hl in clauses:
        highlights |= hl
    return Instance(
        table=table,
        highlights=tuple(sorted(highlights)),
        reference=reference,
        categories=categories,
        split="train",
    )


def synth_generate(spec: GeneratorSpec, n: int) -> list[Instance]:
    """Generate ``n`` instances following the category mix of ``spec``.

    Category sets are allocated by largest-remainder rounding of ``n * p`` and
    then shuffled, so realized frequencies track the mix to within rounding.
    Deterministic in (spec, n); per-instance randomness comes from split
    streams, so shards can be generated independently.
    """
    if n <= 0:
        raise ConfigError(f"instance count must be positive, got {n}")
    sets = [(_parse_mix_key(k), p) for k, p in spec.mix.items()]
    sets.sort(key=lambda item: mix_key(item[0]))
    counts = [math.floor(n * p) for _, p in sets]
    remainders = [(n * p - c, i) for i, ((_, p), c) in enumerate(zip(sets, counts))]
    remainders.sort(key=lambda item: (-item[0], item[1]))
    for _, i in remainders[: n - sum(counts)]:
        counts[i] += 1

    schedule: list[frozenset[str]] = []
    for (cats, _), c in zip(sets, counts):
        schedule.extend([cats] * c)
    root = RngStream(spec.seed, ("corpus",))
    order = root.child("order").permutation(len(schedule))
    instances = []
    for i, j in enumerate(order):
        cats = schedule[int(j)]
        instances.append(_generate_instance(spec, cats, root.child(f"inst{i}"), table_id=f"syn-{spec.seed}-{i}"))
    return instances


# -- fuzzy matching and the analytical/descriptive heuristic ----------------------------

STOPWORDS = frozenset(
    "a an the and or but if then is are was were be been being to of in on at by for with "
    "from as it its this that these those he she they his her their we you i not no do does "
    "did has have had will would".split()
)

_SIGNAL_WORDS = frozenset("most least first second third best worst more fewer over under".split())


def _content_tokens(text: str) -> list[str]:
    return [t for t in tokenize(text) if any(ch.isalnum() for ch in t)]


def _levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, tok_a in enumerate(a, start=1):
        cur = [i]
        for j, tok_b in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (tok_a != tok_b)))
        prev = cur
    return prev[-1]


def fuzzy_ratio(a: str, b: str) -> int:
    """Token-level similarity in 0..100 on lowercased, punctuation-free tokens.

    100 * (1 - edit_distance / max(len_a, len_b)), rounded half up. Two empty
    strings are identical (100); empty against non-empty is 0.
    """
    ta, tb = _content_tokens(a), _content_tokens(b)
    if not ta and not tb:
        return 100
    if not ta or not tb:
        return 0
    dist = _levenshtein(ta, tb)
    return int(math.floor(100.0 * (1.0 - dist / max(len(ta), len(tb))) + 0.5))


def has_reasoning_signal(text: str) -> bool:
    """Superlative, comparative, or numeric token present."""
    for tok in _content_tokens(text):
        if tok in _SIGNAL_WORDS:
            return True
        if any(ch.isdigit() for ch in tok):
            return True
        if len(tok) >= 4 and tok.isalpha() and (tok.endswith("est") or tok.endswith("er")):
            return True
    return False


@dataclass(frozen=True)
class HeuristicVerdict:
    label: str  # analytical-candidate | descriptive-candidate | unlabeled
    ratio: int
    triggers: tuple[str, ...]


def classify_heuristic(reference: str, table_text: str, style: str) -> HeuristicVerdict:
    """Fuzzy-match filter marking likely-analytical (and, for infotabs, likely-descriptive) sentences.

    totto: analytical when the reference has a non-stopword missing from the
    table text, or ratio < 80, or ratio < 85 alongside a superlative /
    comparative / numeric token. infotabs: analytical below 75, descriptive
    above 80, unlabeled in between.
    """
    if style not in ("totto", "infotabs"):
        raise ConfigError(f"unknown filter style {style!r}")
    ratio = fuzzy_ratio(reference, table_text)
    triggers: list[str] = []
    if style == "totto":
        table_tokens = set(_content_tokens(table_text))
        if any(t not in table_tokens for t in _content_tokens(reference) if t not in STOPWORDS):
            triggers.append("non-stopword-missing-from-table")
        if ratio < 80:
            triggers.append("ratio<80")
        if ratio < 85 and has_reasoning_signal(reference):
            triggers.append("ratio<85-with-signal")
        label = "analytical-candidate" if triggers else "unlabeled"
        return HeuristicVerdict(label=label, ratio=ratio, triggers=tuple(triggers))
    if ratio < 75:
        return HeuristicVerdict(label="analytical-candidate", ratio=ratio, triggers=("ratio<75",))
    if ratio > 80:
        return HeuristicVerdict(label="descriptive-candidate", ratio=ratio, triggers=("ratio>80",))
    return HeuristicVerdict(label="unlabeled", ratio=ratio, triggers=())


def highlight_text(instance: Instance) -> str:
    """Highlighted cell values plus table metadata, as one matchable string."""
    cells = [instance.table.rows[r][c] for r, c in instance.highlights]
    if not instance.highlights:
        cells = [cell for row in instance.table.rows for cell in row]
    parts = [instance.table.title, instance.table.section_title, *instance.table.headers, *cells]
    return " ".join(parts)


# -- train/valid/test partitioning --------------------------------------------------------


def split(instances: Sequence[Instance], fractions: tuple[float, float, float], seed: int) -> list[Instance]:
    """Seeded shuffle followed by a contiguous train/valid/test partition.

    valid and test take floor(n * fraction) instances each; the remainder
    goes to train.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {sum(fractions)}, expected 1")
    if any(f < 0 for f in fractions):
        raise ConfigError("split fractions must be non-negative")
    n = len(instances)
    n_valid = math.floor(n * fractions[1])
    n_test = math.floor(n * fractions[2])
    n_train = n - n_valid - n_test
    order = RngStream(seed, ("split",)).permutation(n)
    out = []
    for pos, idx in enumerate(order):
        name = "train" if pos < n_train else ("valid" if pos < n_train + n_valid else "test")
        out.append(replace(instances[int(idx)], split=name))
    return out
