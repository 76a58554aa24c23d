"""Multi-source distribution stability metrics.

Pipeline per variable: estimate a discrete probability distribution per
practice on a shared support, compute pairwise sqrt(Jensen-Shannon
divergence) distances (base-2 logs, so JSD is bounded by 1 and its square
root is a metric), embed the sources into Euclidean space by classical
multidimensional scaling, and score each source by its normalized distance
from the centroid:

    SPO_i = ||x_i - centroid|| / R_max(N),   R_max(N) = sqrt((N-1) / (2N))

R_max is the circumradius of the unit-edge regular (N-1)-simplex, the
farthest-possible configuration, so SPO = 1 is attainable exactly.  GPD is
the mean SPO across sources.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .cohort import CONDITION_FLAGS
from .errors import ContractError, EstimationError
from .validation import check_distance_matrix, check_probability_vector

DEFAULT_BINS = 20
MISSING_LABEL = "__missing__"


@dataclass(frozen=True)
class BinningSpec:
    """How raw values map onto a shared discrete support.

    ``edges`` set: continuous variable, bins are half-open [e_k, e_{k+1})
    with the last bin closed.  ``categories`` set: categorical variable with
    the listed labels.  ``include_missing`` appends an explicit missing
    category in either case.
    """

    edges: tuple = None
    categories: tuple = None
    include_missing: bool = False

    def __post_init__(self):
        if (self.edges is None) == (self.categories is None):
            raise ContractError("exactly one of edges/categories must be set")

    @property
    def support(self):
        if self.edges is not None:
            labels = tuple(f"[{self.edges[i]:.6g},{self.edges[i + 1]:.6g})"
                           for i in range(len(self.edges) - 1))
        else:
            labels = tuple(str(c) for c in self.categories)
        return labels + ((MISSING_LABEL,) if self.include_missing else ())


@dataclass(frozen=True)
class DiscreteDistribution:
    support: tuple
    probabilities: np.ndarray

    def __post_init__(self):
        probs = check_probability_vector(self.probabilities)
        if len(self.support) != len(probs):
            raise ContractError("support and probabilities must have equal length")
        object.__setattr__(self, "probabilities", probs)


@dataclass(frozen=True)
class EmbeddingResult:
    coordinates: np.ndarray  # (N, N-1)
    eigenvalues: np.ndarray  # descending
    clipped_mass: float


@dataclass
class StabilityReport:
    variable: str
    source_ids: list
    spo: np.ndarray
    gpd: float
    n_sources: int
    clipped_mass: float = 0.0
    clamped: bool = False
    notes: list = field(default_factory=list)

    def to_frame(self):
        return pd.DataFrame({
            "variable": self.variable,
            "source_id": self.source_ids,
            "spo": self.spo,
            "gpd": self.gpd,
            "n_sources": self.n_sources,
            "clipped_mass": self.clipped_mass,
        })


def pooled_bins(values, n_bins=DEFAULT_BINS, include_missing=False) -> BinningSpec:
    """Equal-width bin edges over the pooled (all-source) value range."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise EstimationError("no observed values to derive bin edges from")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        hi = lo + 1.0  # all values identical: a single effective bin
    edges = np.linspace(lo, hi, n_bins + 1)
    return BinningSpec(edges=tuple(edges), include_missing=include_missing)


def categorical_spec(categories, include_missing=False) -> BinningSpec:
    return BinningSpec(categories=tuple(str(c) for c in categories),
                       include_missing=include_missing)


def estimate_distribution(values, spec: BinningSpec, source=None) -> DiscreteDistribution:
    """Empirical distribution of ``values`` on the spec's support.

    Zero bins stay exactly zero (no smoothing); the downstream JSD applies
    the 0*log(0/x) = 0 convention.
    """
    values = np.asarray(values, dtype=object)
    is_missing = pd.isna(values)
    observed = values[~is_missing]
    counts = np.zeros(len(spec.support))
    if spec.edges is not None:
        obs = np.asarray(observed, dtype=float)
        edges = np.asarray(spec.edges)
        idx = np.clip(np.searchsorted(edges, obs, side="right") - 1, 0, len(edges) - 2)
        np.add.at(counts, idx, 1.0)
    else:
        lookup = {c: i for i, c in enumerate(spec.categories)}
        for v in observed:
            key = str(int(v)) if isinstance(v, (float, np.floating)) else str(v)
            if key not in lookup:
                raise EstimationError(f"value {v!r} outside the categorical support"
                                      + (f" (source {source})" if source is not None else ""))
            counts[lookup[key]] += 1.0
    if spec.include_missing:
        counts[-1] = is_missing.sum()
    total = counts.sum()
    if total == 0:
        who = f" for source {source}" if source is not None else ""
        raise EstimationError(f"no usable values{who}")
    return DiscreteDistribution(spec.support, counts / total)


def jsd(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logs; bounded in [0, 1]."""
    if isinstance(p, DiscreteDistribution) and isinstance(q, DiscreteDistribution):
        if p.support != q.support:
            raise ContractError("distributions must share the same support")
        pa, qa = p.probabilities, q.probabilities
    else:
        pa = check_probability_vector(np.asarray(p, dtype=float))
        qa = check_probability_vector(np.asarray(q, dtype=float))
        if pa.shape != qa.shape:
            raise ContractError("distributions must share the same support")
    m = 0.5 * (pa + qa)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_p = np.where(pa > 0, pa * np.log2(pa / m), 0.0)
        kl_q = np.where(qa > 0, qa * np.log2(qa / m), 0.0)
    value = 0.5 * kl_p.sum() + 0.5 * kl_q.sum()
    return float(min(max(value, 0.0), 1.0))


def pairwise_distance(sources) -> np.ndarray:
    """Symmetric matrix of sqrt(JSD) between all pairs of sources."""
    sources = list(sources)
    if len(sources) < 2:
        raise ContractError("need at least 2 sources")
    n = len(sources)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = np.sqrt(jsd(sources[i], sources[j]))
    return d


def embed_sources(distance_matrix) -> EmbeddingResult:
    """Classical multidimensional scaling of a distance matrix.

    Double-centers -0.5 * J * (D o D) * J, eigendecomposes, and builds
    coordinates from the nonnegative eigenpairs.  sqrt-JSD matrices are
    near-Euclidean but not guaranteed Euclidean, so negative eigenvalues are
    clipped to zero with their total magnitude reported as ``clipped_mass``.
    """
    d = check_distance_matrix(distance_matrix)
    n = d.shape[0]
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ (d * d) @ j
    eigvals, eigvecs = np.linalg.eigh(b)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    clipped_mass = float(np.abs(eigvals[eigvals < 0]).sum())
    lam = np.clip(eigvals[: n - 1], 0.0, None)
    coords = eigvecs[:, : n - 1] * np.sqrt(lam)
    return EmbeddingResult(coordinates=coords, eigenvalues=eigvals, clipped_mass=clipped_mass)


def simplex_radius(n: int) -> float:
    """Circumradius of the regular unit-edge (n-1)-simplex."""
    return float(np.sqrt((n - 1) / (2.0 * n)))


def compute_spo_gpd(embedding: EmbeddingResult, source_ids=None,
                    variable="") -> StabilityReport:
    """Per-source outlyingness (SPO) and its mean (GPD) from an embedding."""
    coords = embedding.coordinates
    n = coords.shape[0]
    if n < 2:
        raise ContractError("need at least 2 sources")
    centroid = coords.mean(axis=0)
    dist = np.linalg.norm(coords - centroid, axis=1)
    spo = dist / simplex_radius(n)
    clamped = bool(np.any(spo > 1.0))
    spo = np.clip(spo, 0.0, 1.0)
    gpd = float(spo.mean())
    ids = list(source_ids) if source_ids is not None else list(range(n))
    report = StabilityReport(variable=variable, source_ids=ids, spo=spo, gpd=gpd,
                             n_sources=n, clipped_mass=embedding.clipped_mass,
                             clamped=clamped)
    if clamped:
        report.notes.append("spo clamped to [0, 1]")
    return report


def _per_practice_values(cohort, variable):
    frame = cohort.frame
    return [(pid, frame[variable].to_numpy()[idx])
            for pid, idx in sorted(cohort.practice_index.items())]


def variable_stability(cohort, variable, n_bins=DEFAULT_BINS,
                       include_missing=False) -> StabilityReport:
    """SPO/GPD of one variable's per-practice distributions."""
    groups = _per_practice_values(cohort, variable)
    pooled = cohort.frame[variable].to_numpy()
    if variable in CONDITION_FLAGS:
        spec = categorical_spec(["False", "True"], include_missing=False)
        values = [(pid, np.asarray(v, dtype=bool).astype(str)) for pid, v in groups]
    elif cohort.frame[variable].dtype == object or variable in ("smoking", "ethnicity", "townsend"):
        cats = sorted({str(int(v)) if isinstance(v, (float, np.floating)) else str(v)
                       for v in pooled if not pd.isna(v)})
        spec = categorical_spec(cats, include_missing=include_missing)
        values = groups
    else:
        spec = pooled_bins(pooled, n_bins=n_bins, include_missing=include_missing)
        values = groups
    dists = [estimate_distribution(v, spec, source=pid) for pid, v in values]
    embedding = embed_sources(pairwise_distance(dists))
    return compute_spo_gpd(embedding, source_ids=[pid for pid, _ in values],
                           variable=variable)


def missingness_stability(cohort, variable) -> StabilityReport:
    """SPO/GPD of the per-practice Bernoulli missing/observed distributions."""
    spec = categorical_spec(["observed", "missing"])
    dists, ids = [], []
    for pid, vals in _per_practice_values(cohort, variable):
        miss = pd.isna(vals)
        labels = np.where(miss, "missing", "observed")
        dists.append(estimate_distribution(labels, spec, source=pid))
        ids.append(pid)
    embedding = embed_sources(pairwise_distance(dists))
    return compute_spo_gpd(embedding, source_ids=ids, variable=f"missing:{variable}")


def multivariate_stability(cohort, variables, n_components=3,
                           joint_bins=5) -> StabilityReport:
    """Joint-distribution stability across several variables.

    Pools all sources, standardizes each variable, projects onto the top-k
    principal components of the pooled correlation structure, discretizes
    each component into equal-width bins over the pooled range, and runs the
    per-source joint histograms through the SPO/GPD pipeline.  Constant
    variables are dropped with a warning record.
    """
    frame = cohort.frame
    cols, dropped = [], []
    for var in variables:
        x = frame[var].to_numpy(dtype=float)
        if np.any(~np.isfinite(x)):
            raise ContractError(f"variable {var!r} has missing values; impute first or "
                                "restrict to always-present flags")
        if np.std(x) == 0:
            dropped.append(var)
            continue
        cols.append((var, x))
    if len(cols) == 0:
        raise ContractError("no non-constant variables left")
    if n_components > len(cols):
        raise ContractError(f"k = {n_components} exceeds usable variable count {len(cols)}")
    for var in dropped:
        warnings.warn(f"dropping constant variable {var!r} from multivariate stability")

    x = np.column_stack([c for _, c in cols])
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    # principal axes of the pooled correlation structure
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    scores = x @ vt[:n_components].T

    edges = [np.linspace(scores[:, k].min(), scores[:, k].max(), joint_bins + 1)
             for k in range(n_components)]
    bin_idx = np.column_stack([
        np.clip(np.searchsorted(edges[k], scores[:, k], side="right") - 1, 0, joint_bins - 1)
        for k in range(n_components)])
    flat = np.ravel_multi_index(bin_idx.T, (joint_bins,) * n_components)

    n_cells = joint_bins ** n_components
    dists, ids = [], []
    for pid, idx in sorted(cohort.practice_index.items()):
        counts = np.bincount(flat[idx], minlength=n_cells).astype(float)
        dists.append(DiscreteDistribution(tuple(range(n_cells)), counts / counts.sum()))
        ids.append(pid)
    embedding = embed_sources(pairwise_distance(dists))
    report = compute_spo_gpd(embedding, source_ids=ids, variable="multivariate")
    report.notes.extend(f"dropped constant variable {v}" for v in dropped)
    return report
