"""Yearly trade-network ingestion, preprocessing, and window building.

Two CSV formats are the data interface:

  edges.csv     header ``year,exporter_iso3,importer_iso3,tonnes``
  features.csv  header ``year,iso3,gdp,agri_employment_ratio,population,production``
                (an empty cell marks a missing value)

The country universe is the sorted union of all codes seen in the edge
file; countries absent in a given year are isolated nodes.  Features
are linearly interpolated over time (flat at the boundaries) and then
z-scored per year across countries.  `synth_generate` produces a
hermetic stand-in dataset with a persistent backbone plus transient
churn, fully determined by its seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tape import Mat

__all__ = [
    "ParseError",
    "ConfigError",
    "CountryIndex",
    "GraphSnapshot",
    "TemporalDataset",
    "WindowSample",
    "FeatureTable",
    "EDGE_HEADER",
    "FEATURE_HEADER",
    "FEATURE_NAMES",
    "load_edges",
    "load_features",
    "interpolate_missing",
    "normalize_per_year",
    "load_dataset",
    "build_windows",
    "synth_generate",
    "write_edges_csv",
    "write_features_csv",
    "edge_persistence",
]

EDGE_HEADER = ["year", "exporter_iso3", "importer_iso3", "tonnes"]
FEATURE_HEADER = ["year", "iso3", "gdp", "agri_employment_ratio", "population", "production"]
FEATURE_NAMES = tuple(FEATURE_HEADER[2:])
N_FEATURES = len(FEATURE_NAMES)

# a constant column is zero-signal; treat its std as zero below this
_STD_FLOOR = 1e-9


class ParseError(ValueError):
    """Malformed input row; message carries the 1-based line number."""


class ConfigError(ValueError):
    """Infeasible run configuration (window length, snapshot count, flags)."""


class CountryIndex:
    """Ordered, unique ISO alpha-3 codes with a bidirectional code<->index map."""

    def __init__(self, codes) -> None:
        codes = list(codes)
        if len(set(codes)) != len(codes):
            raise ValueError("country codes must be unique")
        self.codes: tuple[str, ...] = tuple(codes)
        self._to_idx = {c: i for i, c in enumerate(self.codes)}

    @classmethod
    def from_codes(cls, codes) -> "CountryIndex":
        """Canonical index: sorted distinct codes."""
        return cls(sorted(set(codes)))

    def __len__(self) -> int:
        return len(self.codes)

    def __contains__(self, code: str) -> bool:
        return code in self._to_idx

    def __eq__(self, other) -> bool:
        return isinstance(other, CountryIndex) and self.codes == other.codes

    def index_of(self, code: str) -> int:
        return self._to_idx[code]

    def code_of(self, i: int) -> str:
        return self.codes[i]


@dataclass
class GraphSnapshot:
    """One year of the network: binary adjacency, trade weights, node features."""

    year: int
    adj: Mat     # N x N binary, adj[i, j] = 1 iff i exported to j
    trade: Mat   # N x N nonnegative tonnes; trade > 0 iff adj = 1
    feats: Mat   # N x F country attributes (z-scored per year)

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    def validate(self) -> None:
        n = self.n
        assert self.adj.shape == (n, n) and self.trade.shape == (n, n)
        assert self.feats.shape[0] == n
        assert set(np.unique(self.adj)) <= {0.0, 1.0}
        assert np.all(np.diag(self.adj) == 0.0)
        assert ((self.trade > 0) == (self.adj == 1.0)).all()
        assert np.isfinite(self.feats).all()


@dataclass
class TemporalDataset:
    """Consecutive yearly snapshots over a shared country universe."""

    snapshots: list[GraphSnapshot]
    index: CountryIndex

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(s.year for s in self.snapshots)

    @property
    def n(self) -> int:
        return len(self.index)

    @property
    def feat_dim(self) -> int:
        return self.snapshots[0].feats.shape[1]

    def validate(self) -> None:
        assert self.snapshots, "dataset has no snapshots"
        years = self.years
        assert years == tuple(range(years[0], years[0] + len(years))), "years must be consecutive"
        for s in self.snapshots:
            assert s.n == self.n
            assert s.feats.shape[1] == self.feat_dim
            s.validate()


@dataclass
class WindowSample:
    """w consecutive input snapshots plus the next year's adjacency as target."""

    inputs: list[GraphSnapshot]
    target_adj: Mat
    target_year: int


@dataclass
class FeatureTable:
    """Per-(country, year) attribute values with explicit missing flags."""

    index: CountryIndex
    years: tuple[int, ...]
    values: np.ndarray   # (N, Y, F)
    missing: np.ndarray  # (N, Y, F) bool
    zero_filled: list[tuple[str, str]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _open_rows(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        yield from enumerate(csv.reader(fh), start=1)


def load_edges(path, index: CountryIndex | None = None):
    """Read the edge CSV into per-year (adjacency, trade) pairs.

    Returns (per_year, index, dropped_self_loops).  Duplicate
    (year, exporter, importer) rows are summed; self-loop rows are
    dropped and counted.  The returned index extends any given one
    with all codes seen in the file.
    """
    rows: list[tuple[int, str, str, float]] = []
    codes: set[str] = set(index.codes) if index is not None else set()
    dropped = 0
    for lineno, row in _open_rows(path):
        if lineno == 1:
            if [c.strip() for c in row] != EDGE_HEADER:
                raise ParseError(f"{path}:1: expected header {','.join(EDGE_HEADER)}")
            continue
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
        try:
            year = int(row[0])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad year {row[0]!r}") from None
        exporter, importer = row[1].strip(), row[2].strip()
        if not exporter or not importer:
            raise ParseError(f"{path}:{lineno}: empty country code")
        try:
            tonnes = float(row[3])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad tonnes {row[3]!r}") from None
        if not np.isfinite(tonnes) or tonnes < 0:
            raise ParseError(f"{path}:{lineno}: tonnes must be finite and >= 0, got {row[3]}")
        if exporter == importer:
            dropped += 1
            continue
        codes.add(exporter)
        codes.add(importer)
        rows.append((year, exporter, importer, tonnes))

    out_index = CountryIndex.from_codes(codes)
    n = len(out_index)
    per_year: dict[int, tuple[Mat, Mat]] = {}
    for year, exporter, importer, tonnes in rows:
        if year not in per_year:
            per_year[year] = (np.zeros((n, n)), np.zeros((n, n)))
        if tonnes > 0:
            a, t = per_year[year]
            i, j = out_index.index_of(exporter), out_index.index_of(importer)
            t[i, j] += tonnes
            a[i, j] = 1.0
    return per_year, out_index, dropped


def load_features(path, index: CountryIndex, years):
    """Read the feature CSV into a FeatureTable over the given index/years.

    Countries in the index but absent from the file stay fully missing;
    codes in the file but not in the index go into the returned skip
    report instead of failing.
    """
    years = tuple(years)
    year_pos = {y: k for k, y in enumerate(years)}
    n = len(index)
    values = np.zeros((n, len(years), N_FEATURES))
    missing = np.ones((n, len(years), N_FEATURES), dtype=bool)
    skipped: list[str] = []
    for lineno, row in _open_rows(path):
        if lineno == 1:
            if [c.strip() for c in row] != FEATURE_HEADER:
                raise ParseError(f"{path}:1: expected header {','.join(FEATURE_HEADER)}")
            continue
        if not row:
            continue
        if len(row) != len(FEATURE_HEADER):
            raise ParseError(f"{path}:{lineno}: expected {len(FEATURE_HEADER)} columns, got {len(row)}")
        try:
            year = int(row[0])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad year {row[0]!r}") from None
        code = row[1].strip()
        if code not in index:
            if code not in skipped:
                skipped.append(code)
            continue
        if year not in year_pos:
            continue
        i, k = index.index_of(code), year_pos[year]
        for a, cell in enumerate(row[2:]):
            cell = cell.strip()
            if cell == "":
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad {FEATURE_NAMES[a]} value {cell!r}") from None
            values[i, k, a] = v
            missing[i, k, a] = False
    return FeatureTable(index, years, values, missing), skipped


def interpolate_missing(table: FeatureTable) -> FeatureTable:
    """Fill gaps per (country, attribute) series.

    Interior gaps are linear between the nearest observed years;
    leading/trailing gaps take the nearest observed value; series with
    no observations become zero and are flagged in `zero_filled`.
    """
    values = table.values.copy()
    years = np.asarray(table.years, dtype=float)
    zero_filled: list[tuple[str, str]] = []
    for i in range(values.shape[0]):
        for a in range(values.shape[2]):
            miss = table.missing[i, :, a]
            if not miss.any():
                continue
            obs = ~miss
            if not obs.any():
                values[i, :, a] = 0.0
                zero_filled.append((table.index.code_of(i), FEATURE_NAMES[a]))
                continue
            values[i, :, a] = np.interp(years, years[obs], values[i, obs, a])
    return FeatureTable(table.index, table.years, values,
                        np.zeros_like(table.missing), zero_filled)


def normalize_per_year(table: FeatureTable) -> list[Mat]:
    """Z-score each attribute across countries, separately per year.

    Population standard deviation (denominator N); an attribute-year
    with (numerically) zero variance becomes an all-zero column.
    Interpolation must already have run (no missing values).
    """
    if table.missing.any():
        raise ValueError("normalize_per_year requires an interpolated table")
    out = []
    for k in range(len(table.years)):
        x = table.values[:, k, :].copy()
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        degenerate = std <= _STD_FLOOR * (1.0 + np.abs(mean))
        x -= mean
        x[:, degenerate] = 0.0
        x[:, ~degenerate] /= std[~degenerate]
        out.append(np.ascontiguousarray(x))
    return out


def _scan_features(path) -> tuple[set[str], set[int]]:
    codes: set[str] = set()
    years: set[int] = set()
    for lineno, row in _open_rows(path):
        if lineno == 1 or not row:
            continue
        if len(row) == len(FEATURE_HEADER) and row[1].strip():
            codes.add(row[1].strip())
            try:
                years.add(int(row[0]))
            except ValueError:
                continue
    return codes, years


def load_dataset(edges_path, features_path):
    """Compose the loaders into a validated TemporalDataset.

    The country universe is the union of codes seen in either file, so
    countries with features but no trade stay as isolated nodes; the
    year span likewise covers both files, and years with no edge rows
    become empty snapshots (no trade that year).  Returns the dataset
    plus a report dict (dropped self-loops, skipped feature codes,
    zero-filled series).
    """
    feat_codes, feat_years = _scan_features(features_path)
    per_year, index, dropped = load_edges(edges_path, CountryIndex.from_codes(feat_codes))
    if not per_year:
        raise ParseError(f"{edges_path}: no edge rows")
    all_years = set(per_year) | feat_years
    lo, hi = min(all_years), max(all_years)
    years = tuple(range(lo, hi + 1))
    table, skipped = load_features(features_path, index, years)
    table = interpolate_missing(table)
    feats = normalize_per_year(table)
    n = len(index)
    snapshots = []
    for k, year in enumerate(years):
        a, t = per_year.get(year, (np.zeros((n, n)), np.zeros((n, n))))
        snapshots.append(GraphSnapshot(year, a, t, feats[k]))
    ds = TemporalDataset(snapshots, index)
    ds.validate()
    report = {"dropped_self_loops": dropped, "skipped_feature_codes": skipped,
              "zero_filled_series": table.zero_filled}
    return ds, report


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

def build_windows(ds: TemporalDataset, w: int) -> list[WindowSample]:
    """All S - w sliding windows; the last one is the evaluation split."""
    s = len(ds.snapshots)
    if not 1 <= w < s:
        raise ConfigError(f"window length {w} infeasible for {s} snapshots (need 1 <= w < S)")
    samples = []
    for j in range(s - w):
        target = ds.snapshots[j + w]
        samples.append(WindowSample(ds.snapshots[j:j + w], target.adj, target.year))
    return samples


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _synth_codes(n: int) -> list[str]:
    """Deterministic ISO-alpha-3-style codes AAA, AAB, ..."""
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    codes = []
    for i in range(n):
        codes.append(letters[i // 676] + letters[(i // 26) % 26] + letters[i % 26])
    return codes


def synth_generate(rng: Rng, n: int = 60, s_years: int = 10,
                   p_backbone: float = 0.06, p_churn: float = 0.02,
                   feature_noise: float = 0.1, start_year: int = 2012) -> TemporalDataset:
    """Generate a dataset with a persistent backbone and transient churn.

    Country "activity" levels are heavy-tailed (log-normal) and backbone
    trade relationships form between active pairs (gravity style,
    calibrated to overall density `p_backbone`), in both directions with
    persistent log-normal weights.  Deletions are shock-driven: each
    year some countries have a shock year (never two in a row), and a
    shocked country suspends a slice of its relationships for exactly
    that year, resuming the next, with rates calibrated so the overall
    fraction of backbone edges out in any year is 4 * p_churn (capped
    at 1/2).  A single snapshot therefore systematically understates
    shocked countries while a window of history reveals them.
    Transient edges appear on plausible non-backbone pairs at a rate
    matching p_churn times the backbone size.  Year-over-year edge
    persistence stays high at the default churn.  Features are smooth
    per-country random walks, z-scored per year; the production feature
    starts at the country's log-activity.  Identical (seed, arguments)
    give an identical dataset.
    """
    if n < 4:
        raise ValueError(f"need n >= 4 nodes, got {n}")
    if s_years < 3:
        raise ValueError(f"need s_years >= 3, got {s_years}")
    for name, p in (("p_backbone", p_backbone), ("p_churn", p_churn)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {p}")
    if feature_noise < 0:
        raise ValueError(f"feature_noise must be >= 0, got {feature_noise}")

    index = CountryIndex(_synth_codes(n))
    upper = np.triu(np.ones((n, n)), k=1)
    activity = rng.child("activity").lognormal(0.0, 1.0, (n,))
    pull = np.outer(activity, activity)
    mean_pull = (pull * upper).sum() / upper.sum()
    pair_prob = np.minimum(p_backbone / mean_pull * pull, 1.0) if p_backbone > 0 else np.zeros((n, n))
    draw = rng.child("backbone-draw").random((n, n))
    backbone_pairs = (draw < pair_prob) * upper
    backbone = backbone_pairs + backbone_pairs.T  # trade relationships run both ways
    base_weights = backbone * rng.child("weights").lognormal(3.0, 1.0, (n, n))

    p_dip = min(0.5, 4.0 * p_churn)
    n_backbone_edges = backbone.sum()
    offdiag_nonbackbone = (1.0 - np.eye(n)) * (1.0 - backbone)
    # transient rate: expected count ~= p_churn * backbone size, biased
    # toward plausible (active) pairs
    if p_churn > 0 and n_backbone_edges > 0 and offdiag_nonbackbone.sum() > 0:
        trans_bias = pull / pull.max()
        trans_scale = p_churn * n_backbone_edges / (trans_bias * offdiag_nonbackbone).sum()
        p_transient = np.minimum(trans_scale * trans_bias, 1.0) * offdiag_nonbackbone
    else:
        p_transient = np.zeros((n, n))

    base = rng.child("feat-base").normal(n, N_FEATURES)
    base[:, 3] += np.log(activity)  # production tracks activity
    snapshots = []
    walk = base.copy()
    # dips are shock-driven: a country's shock year (never two running)
    # suspends a q-slice of its relationships for that year only; q is
    # calibrated so the marginal pair-dip rate equals p_dip
    p_shock = 0.15
    pair_affected = p_shock * (2.0 - p_shock)  # P(either endpoint shocked)
    q_dip = min(1.0, p_dip / pair_affected)
    shock_rate = p_shock / (1.0 - p_shock)
    shocked_prev = rng.child("pre-shock").bernoulli((n, 1), p_shock)
    for k in range(s_years):
        year_rng = rng.child("year", k)
        shocked = year_rng.child("shock").bernoulli((n, 1), shock_rate) * (1.0 - shocked_prev)
        shocked_prev = shocked
        endpoint_hit = np.maximum(shocked, shocked.T)  # either side shocked
        dip_draw = year_rng.child("drop").bernoulli((n, n), q_dip) * upper
        dipped = dip_draw * endpoint_hit
        keep_pairs = 1.0 - dipped
        keep = keep_pairs * keep_pairs.T  # both directions dip together
        np.fill_diagonal(keep, 0.0)
        transient = (year_rng.child("transient").random((n, n)) < p_transient) * 1.0
        adj = backbone * keep + transient
        trade = backbone * keep * base_weights \
            + transient * year_rng.child("tweights").lognormal(3.0, 1.0, (n, n))
        if k > 0:
            walk = walk + year_rng.child("feat-step").normal(n, N_FEATURES, std=feature_noise)
        snapshots.append((start_year + k, adj, trade, walk.copy()))

    table = FeatureTable(
        index,
        tuple(start_year + k for k in range(s_years)),
        np.stack([s[3] for s in snapshots], axis=1),
        np.zeros((n, s_years, N_FEATURES), dtype=bool),
    )
    feats = normalize_per_year(table)
    ds = TemporalDataset(
        [GraphSnapshot(year, adj, trade, feats[k])
         for k, (year, adj, trade, _) in enumerate(snapshots)],
        index,
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# writers (same formats the loaders read; full float precision)
# ---------------------------------------------------------------------------

def write_edges_csv(ds: TemporalDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EDGE_HEADER)
        for snap in ds.snapshots:
            src, dst = np.nonzero(snap.adj)
            for i, j in zip(src.tolist(), dst.tolist()):
                writer.writerow([snap.year, ds.index.code_of(i), ds.index.code_of(j),
                                 repr(float(snap.trade[i, j]))])


def write_features_csv(ds: TemporalDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_HEADER)
        for snap in ds.snapshots:
            for i in range(ds.n):
                writer.writerow([snap.year, ds.index.code_of(i)]
                                + [repr(float(v)) for v in snap.feats[i]])


def edge_persistence(ds: TemporalDataset) -> float:
    """Mean fraction of year-t edges still present in year t+1."""
    fracs = []
    for a, b in zip(ds.snapshots, ds.snapshots[1:]):
        count = a.adj.sum()
        if count > 0:
            fracs.append(float((a.adj * b.adj).sum() / count))
    return float(np.mean(fracs)) if fracs else 1.0
