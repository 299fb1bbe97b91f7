"""Distribution distances between sample sets and the significance tests
used to compare them."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import rel_entr

from .errors import ConfigError, DimensionError, DomainError


@dataclass
class SampleTable:
    """Named continuous and categorical columns with a shared row count."""

    continuous: dict = field(default_factory=dict)
    categorical: dict = field(default_factory=dict)

    def __post_init__(self):
        self.continuous = {k: np.asarray(v, dtype=float).reshape(-1) for k, v in self.continuous.items()}
        self.categorical = {k: np.asarray(v).reshape(-1) for k, v in self.categorical.items()}
        lengths = {len(v) for v in (*self.continuous.values(), *self.categorical.values())}
        if len(lengths) > 1:
            raise DimensionError(f"columns have different lengths: {sorted(lengths)}")
        for name, col in self.continuous.items():
            if not np.all(np.isfinite(col)):
                raise DomainError(f"column {name!r} has non-finite values")

    def __len__(self):
        for col in (*self.continuous.values(), *self.categorical.values()):
            return len(col)
        return 0

    def subset(self, idx):
        return SampleTable({k: v[idx] for k, v in self.continuous.items()},
                           {k: v[idx] for k, v in self.categorical.items()})

    def matrix(self, columns=None):
        columns = list(self.continuous) if columns is None else list(columns)
        return np.column_stack([self.continuous[c] for c in columns])

    @classmethod
    def from_records(cls, records, continuous, categorical=()):
        return cls({c: [r[c] for r in records] for c in continuous},
                   {c: [r[c] for r in records] for c in categorical})


def load_table(csv_path, schema_path):
    """Read a CSV whose columns are typed by a sidecar JSON schema
    ``{"continuous": [...], "categorical": [...]}``; other columns are ignored."""
    with open(schema_path) as fh:
        schema = json.load(fh)
    cont = list(schema.get("continuous", []))
    cat = list(schema.get("categorical", []))
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    header = set(rows[0]) if rows else set()
    missing = [c for c in cont + cat if c not in header]
    if rows and missing:
        raise ConfigError(f"columns missing from {csv_path}: {missing}")
    try:
        cont_cols = {c: [float(r[c]) for r in rows] for c in cont}
    except ValueError as exc:
        raise ConfigError(f"non-numeric continuous value: {exc}") from exc
    return SampleTable(cont_cols, {c: [r[c] for r in rows] for c in cat})


def write_table(table: SampleTable, csv_path, schema_path=None):
    names = list(table.continuous) + list(table.categorical)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        cols = [table.continuous[c] for c in table.continuous] + [table.categorical[c] for c in table.categorical]
        for row in zip(*cols):
            writer.writerow([repr(float(v)) if i < len(table.continuous) else v
                             for i, v in enumerate(row)])
    if schema_path is not None:
        with open(schema_path, "w") as fh:
            json.dump({"continuous": list(table.continuous),
                       "categorical": list(table.categorical)}, fh, indent=2)


# -- distances ------------------------------------------------------------------


def wasserstein1(a, b):
    """Exact 1-D Wasserstein-1 distance between two empirical distributions."""
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise DomainError("wasserstein1 needs nonempty samples")
    return float(stats.wasserstein_distance(a, b))


def jsd_categorical(p, q):
    """Jensen-Shannon divergence in nats between two probability vectors."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DimensionError(f"category counts differ: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0) or p.sum() <= 0 or q.sum() <= 0:
        raise DomainError("inputs must be nonnegative with positive mass")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    value = 0.5 * float(rel_entr(p, m).sum()) + 0.5 * float(rel_entr(q, m).sum())
    return min(max(value, 0.0), float(np.log(2)))


def label_frequencies(a, b):
    """Aligned frequency vectors of two label samples over their joint support."""
    labels = sorted(set(np.asarray(a).tolist()) | set(np.asarray(b).tolist()), key=str)
    index = {lab: i for i, lab in enumerate(labels)}
    p = np.bincount([index[x] for x in np.asarray(a).tolist()], minlength=len(labels))
    q = np.bincount([index[x] for x in np.asarray(b).tolist()], minlength=len(labels))
    return p / max(p.sum(), 1), q / max(q.sum(), 1)


def _edges(ref, bins):
    lo, hi = float(np.min(ref)), float(np.max(ref))
    if not hi > lo:
        raise DomainError("reference column has zero range")
    return np.linspace(lo, hi, bins + 1)


def _bin_index(values, edges):
    bins = len(edges) - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, bins - 1)


def jsd_histogram_1d(reference, other, bins=100):
    """JSD between 1-D histograms with edges from ``reference``; outliers clamp
    into the end bins."""
    edges = _edges(reference, bins)
    p = np.bincount(_bin_index(np.asarray(reference, float), edges), minlength=bins)
    q = np.bincount(_bin_index(np.asarray(other, float), edges), minlength=bins)
    return jsd_categorical(p / p.sum(), q / q.sum())


def jsd_joint_histogram(reference: SampleTable, other: SampleTable, columns, bins_per_dim=10):
    """JSD between joint histograms over ``columns``; edges come from ``reference``."""
    columns = list(columns)
    for c in columns:
        if c not in reference.continuous or c not in other.continuous:
            raise ConfigError(f"column {c!r} missing from one of the tables")
    flat_ref = np.zeros(len(reference), dtype=int)
    flat_oth = np.zeros(len(other), dtype=int)
    for c in columns:
        edges = _edges(reference.continuous[c], bins_per_dim)
        flat_ref = flat_ref * bins_per_dim + _bin_index(reference.continuous[c], edges)
        flat_oth = flat_oth * bins_per_dim + _bin_index(other.continuous[c], edges)
    size = bins_per_dim ** len(columns)
    p = np.bincount(flat_ref, minlength=size)
    q = np.bincount(flat_oth, minlength=size)
    return jsd_categorical(p / p.sum(), q / q.sum())


def _psd_sqrt(mat):
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def frechet_gaussian(a, b):
    """Fréchet distance between Gaussians fitted to two feature matrices.

    The cross term ``Tr((S_a S_b)^{1/2})`` is evaluated as the trace of the
    symmetric root of ``S_a^{1/2} S_b S_a^{1/2}``, which has the same
    eigenvalues.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise DimensionError("feature dimensions differ")
    if len(a) < 2 or len(b) < 2:
        raise DomainError("need at least two rows per sample")
    mu = a.mean(0) - b.mean(0)
    sa = np.atleast_2d(np.cov(a, rowvar=False))
    sb = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _psd_sqrt(sa)
    cross = _psd_sqrt(root_a @ sb @ root_a)
    value = float(mu @ mu + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# -- resampling and tests ----------------------------------------------------------


def bootstrap_values(metric_fn, a, b, n_boot=20, boot_size=500, rng=None):
    """``metric_fn(a, b_resampled)`` for ``n_boot`` resamples of ``b`` with replacement.

    ``b`` may be an array (rows resampled) or a :class:`SampleTable`.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    n = len(b)
    if n == 0 or n_boot < 1 or boot_size < 1:
        raise DomainError("bootstrap needs a nonempty sample and positive sizes")
    values = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=boot_size)
        sub = b.subset(idx) if isinstance(b, SampleTable) else np.asarray(b)[idx]
        values.append(float(metric_fn(a, sub)))
    return np.asarray(values)


def bootstrap_metric(metric_fn, a, b, n_boot=20, boot_size=500, rng=None):
    """Mean and std of the metric over bootstrap resamples of ``b``."""
    values = bootstrap_values(metric_fn, a, b, n_boot, boot_size, rng)
    return float(values.mean()), float(values.std())


def two_sample_ttest(x, y):
    """Two-sided Welch t-test p-value."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or len(y) < 2:
        raise DomainError("each sample needs at least two points")
    if np.var(x) == 0 and np.var(y) == 0:
        return 1.0 if x.mean() == y.mean() else 0.0
    return float(stats.ttest_ind(x, y, equal_var=False).pvalue)


def mann_whitney_u(x, y, alternative="two-sided"):
    """Mann-Whitney U p-value: tie-corrected normal approximation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0 or len(y) == 0:
        raise DomainError("both samples must be nonempty")
    if np.ptp(np.concatenate([x, y])) == 0:
        return 1.0
    res = stats.mannwhitneyu(x, y, alternative=alternative, method="asymptotic")
    return float(res.pvalue)


# -- reports ---------------------------------------------------------------------


@dataclass
class MetricReport:
    """``metrics[name] = {"value", "boot_mean", "boot_std", "p_values": {...}}``."""

    metrics: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def add(self, name, value, boot_mean=None, boot_std=None, p_values=None):
        p_values = dict(p_values or {})
        for k, p in p_values.items():
            if not 0.0 <= p <= 1.0:
                raise DomainError(f"p-value {k}={p} outside [0, 1]")
        if boot_std is not None and boot_std < 0:
            raise DomainError("bootstrap std must be nonnegative")
        self.metrics[name] = {"value": float(value),
                              "boot_mean": None if boot_mean is None else float(boot_mean),
                              "boot_std": None if boot_std is None else float(boot_std),
                              "p_values": {k: float(p) for k, p in p_values.items()}}

    def to_json(self):
        return {"metrics": self.metrics, "info": self.info}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value", "boot_mean", "boot_std", "p_values"])
            for name, m in self.metrics.items():
                pv = ";".join(f"{k}={v:.6g}" for k, v in m["p_values"].items())
                writer.writerow([name, m["value"], m["boot_mean"], m["boot_std"], pv])


def uncertainty_report(sigma, in_dist, sizes=None):
    """Compare per-molecule ``sigma`` between in-distribution and OOD groups.

    Reports group means, the Mann-Whitney p-value (two-sided, plus the
    one-sided "OOD larger" variant) and the Spearman correlation of ``sigma``
    with molecule size when ``sizes`` is given.
    """
    sigma = np.asarray(sigma, dtype=float)
    in_dist = np.asarray(in_dist, dtype=bool)
    if sigma.shape != in_dist.shape:
        raise DimensionError("sigma and flags must align")
    a, b = sigma[in_dist], sigma[~in_dist]
    if len(a) == 0 or len(b) == 0:
        raise DomainError("both in-distribution and OOD samples are required")
    report = MetricReport()
    report.add("sigma_in_dist", a.mean())
    report.add("sigma_ood", b.mean())
    report.add("sigma_shift", b.mean() - a.mean(),
               p_values={"mann_whitney": mann_whitney_u(b, a),
                         "mann_whitney_greater": mann_whitney_u(b, a, alternative="greater")})
    if sizes is not None:
        sizes = np.asarray(sizes, dtype=float)
        if np.ptp(sizes) > 0 and np.ptp(sigma) > 0:
            rho, p = stats.spearmanr(sigma, sizes)
            report.add("sigma_size_spearman", rho, p_values={"spearman": p})
        else:
            report.add("sigma_size_spearman", 0.0)
    report.info.update(n_in_dist=int(len(a)), n_ood=int(len(b)))
    return report


def _metric_functions(reference: SampleTable, generated: SampleTable, joint_columns,
                      bins_1d, bins_joint):
    """``{name: (fn, ref, gen)}`` for every metric the two tables support."""
    out = {}
    for c in reference.continuous:
        if c not in generated.continuous:
            continue
        out[f"w1/{c}"] = (wasserstein1, reference.continuous[c], generated.continuous[c])
        if np.ptp(reference.continuous[c]) > 0:
            out[f"jsd/{c}"] = (lambda r, g: jsd_histogram_1d(r, g, bins_1d),
                               reference.continuous[c], generated.continuous[c])
    for c in reference.categorical:
        if c in generated.categorical:
            out[f"jsd/{c}"] = (lambda r, g: jsd_categorical(*label_frequencies(r, g)),
                               reference.categorical[c], generated.categorical[c])
    cols = [c for c in (joint_columns or reference.continuous)
            if c in generated.continuous and np.ptp(reference.continuous[c]) > 0]
    if cols:
        out["jsd_joint"] = (lambda r, g: jsd_joint_histogram(r, g, cols, bins_joint),
                            reference, generated)
        out["frechet"] = (lambda r, g: frechet_gaussian(r.matrix(cols), g.matrix(cols)),
                          reference, generated)
    return out


def compare_methods(reference: SampleTable, methods: dict, n_boot=20, boot_size=500, seed=0,
                    joint_columns=None, bins_1d=100, bins_joint=10):
    """Score each generated table against ``reference``.

    Every metric gets its full-sample value plus bootstrap mean/std; p-values
    between methods come from Welch t-tests on the bootstrap values, so the
    p-value matrix is symmetric.
    """
    report = MetricReport()
    boots = {}
    for name, table in methods.items():
        rng = np.random.default_rng(seed)
        for metric, (fn, ref, gen) in _metric_functions(reference, table, joint_columns,
                                                        bins_1d, bins_joint).items():
            values = bootstrap_values(fn, ref, gen, n_boot, boot_size, rng)
            boots.setdefault(metric, {})[name] = values
            report.add(f"{name}/{metric}", fn(ref, gen), values.mean(), values.std())
    for metric, per_method in boots.items():
        for a in per_method:
            pv = {}
            for b in per_method:
                if a != b:
                    pv[b] = (two_sample_ttest(per_method[a], per_method[b])
                             if n_boot >= 2 else 1.0)
            report.metrics[f"{a}/{metric}"]["p_values"] = pv
    report.info.update(n_reference=len(reference),
                       n_generated={k: len(v) for k, v in methods.items()})
    return report
