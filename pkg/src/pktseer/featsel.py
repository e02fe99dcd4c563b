"""Variance-threshold then Pearson-correlation feature filtering.

The variance threshold is a fraction of the largest variance a [0, 1]
variable can have (0.25), applied after min-max scaling: the default 0.25
drops columns whose scaled population variance is below 0.0625.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_UNIT_VARIANCE = 0.25
VARIANCE_RULE = "drop if population variance of min-max scaled column < threshold * 0.25"


class SelectionError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    column_names: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            self.values = self.values.reshape(len(self.values), -1)
        if self.values.shape[1] != len(self.column_names):
            raise ValueError(f"{self.values.shape[1]} columns but {len(self.column_names)} names")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite entries")

    @classmethod
    def from_records(cls, records) -> "FeatureMatrix":
        records = list(records)
        if not records:
            raise ValueError("no records")
        names = list(records[0].names)
        return cls(names, np.array([r.values for r in records], dtype=np.float64))

    def columns(self, names) -> "FeatureMatrix":
        idx = [self.column_names.index(n) for n in names]
        return FeatureMatrix(list(names), self.values[:, idx])


@dataclass
class SelectionReport:
    kept: list[str] = field(default_factory=list)
    dropped_low_variance: list[tuple[str, float]] = field(default_factory=list)
    dropped_correlated: list[tuple[str, str, float]] = field(default_factory=list)
    var_threshold: float = 0.25
    var_cutoff: float = 0.0625
    corr_threshold: float = 0.98
    variance_rule: str = VARIANCE_RULE

    def to_dict(self) -> dict:
        return {
            "kept": list(self.kept),
            "dropped_low_variance": [{"name": n, "variance": v} for n, v in self.dropped_low_variance],
            "dropped_correlated": [
                {"name": n, "partner": p, "correlation": r} for n, p, r in self.dropped_correlated
            ],
            "var_threshold": self.var_threshold,
            "var_cutoff": self.var_cutoff,
            "corr_threshold": self.corr_threshold,
            "variance_rule": self.variance_rule,
        }

    def table(self) -> str:
        lines = [
            f"variance threshold {self.var_threshold:g} (cutoff {self.var_cutoff:g} on scaled data), "
            f"|pearson r| threshold {self.corr_threshold:g}",
            f"{'feature':<24} {'status':<14} detail",
        ]
        for n in self.kept:
            lines.append(f"{n:<24} {'kept':<14}")
        for n, v in self.dropped_low_variance:
            lines.append(f"{n:<24} {'low variance':<14} var={v:.6g}")
        for n, p, r in self.dropped_correlated:
            lines.append(f"{n:<24} {'correlated':<14} r={r:+.6f} with {p}")
        lines.append(
            f"kept {len(self.kept)} of "
            f"{len(self.kept) + len(self.dropped_low_variance) + len(self.dropped_correlated)}"
        )
        return "\n".join(lines)


def min_max_scale(m: FeatureMatrix) -> FeatureMatrix:
    x = m.values
    if x.shape[0] == 0:
        return FeatureMatrix(list(m.column_names), x.copy())
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    return FeatureMatrix(list(m.column_names), out)


def variance_filter(m: FeatureMatrix, threshold: float = 0.25) -> SelectionReport:
    """Expects min-max scaled input. Population (1/n) variance."""
    cutoff = threshold * MAX_UNIT_VARIANCE
    var = m.values.var(axis=0) if m.values.shape[0] else np.zeros(len(m.column_names))
    rep = SelectionReport(var_threshold=threshold, var_cutoff=cutoff)
    for name, v in zip(m.column_names, var):
        if v < cutoff:
            rep.dropped_low_variance.append((name, float(v)))
        else:
            rep.kept.append(name)
    return rep


def correlation_matrix(x: np.ndarray) -> np.ndarray:
    """Pearson r for every column pair; columns with zero spread correlate 0."""
    xc = x - x.mean(axis=0)
    ss = np.sqrt((xc * xc).sum(axis=0))
    cov = xc.T @ xc
    denom = np.outer(ss, ss)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(r, -1.0, 1.0)


def pearson_filter(m: FeatureMatrix, threshold: float = 0.98) -> SelectionReport:
    """Scan pairs (i, j), i < j, in column order; if |r| > threshold and neither
    column is already dropped, drop j with i recorded as its partner."""
    r = correlation_matrix(m.values)
    names = m.column_names
    dropped = np.zeros(len(names), dtype=bool)
    rep = SelectionReport(corr_threshold=threshold)
    for i in range(len(names)):
        if dropped[i]:
            continue
        for j in range(i + 1, len(names)):
            if not dropped[j] and abs(r[i, j]) > threshold:
                dropped[j] = True
                rep.dropped_correlated.append((names[j], names[i], float(r[i, j])))
    rep.kept = [n for n, d in zip(names, dropped) if not d]
    return rep


def select_features(
    m: FeatureMatrix, var_threshold: float = 0.25, corr_threshold: float = 0.98
) -> tuple[FeatureMatrix, SelectionReport]:
    """Scale, variance filter, Pearson filter. Returns unscaled kept columns."""
    scaled = min_max_scale(m)
    vrep = variance_filter(scaled, var_threshold)
    crep = pearson_filter(scaled.columns(vrep.kept), corr_threshold)
    report = SelectionReport(
        kept=crep.kept,
        dropped_low_variance=vrep.dropped_low_variance,
        dropped_correlated=crep.dropped_correlated,
        var_threshold=var_threshold,
        var_cutoff=vrep.var_cutoff,
        corr_threshold=corr_threshold,
    )
    if not report.kept:
        raise SelectionError("no features survive selection")
    return m.columns(report.kept), report
