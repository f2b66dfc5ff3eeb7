"""Synthetic benchmarks with invariant mixture components.

Every domain draws from the same K class-conditional Gaussian components;
only the mixing weights differ between domains. Within component j the
class means sit on a component-specific direction, so the label rule
rotates across components and no single linear rule fits them all. Target
domains get mixing weights concentrated away from the sources, producing a
mixture-component shift at test time while the components themselves stay
literally invariant.

Datasets serialize to CSV with header ``domain_id,label,tag,f0..f{e-1}``;
the ``tag`` column records the true component for diagnostics only and must
never be fed to training. Generator arguments round-trip through a flat
``key = value`` spec file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ElementarySpec",
    "DomainSpec",
    "DomainSample",
    "SyntheticBenchmark",
    "sample_domain",
    "make_benchmark",
    "materialize",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_benchmark_meta",
    "read_benchmark_meta",
]

ROLES = ("source", "validation", "target")

_SIMPLEX_TOL = 1e-12
_MIN_TARGET_L1_GAP = 0.1


@dataclass
class ElementarySpec:
    """K invariant components: per-component class means, diagonal
    covariance, and a label distribution over C classes."""

    class_means: np.ndarray  # (K, C, d)
    cov_diag: np.ndarray  # (K, d)
    label_dist: np.ndarray  # (K, C)

    def __post_init__(self):
        k, c, d = self.class_means.shape
        if self.cov_diag.shape != (k, d) or self.label_dist.shape != (k, c):
            raise ValueError("inconsistent elementary component shapes")
        if not (self.cov_diag > 0).all():
            raise ValueError("covariance entries must be positive")
        rows = self.label_dist
        if (rows < 0).any() or np.abs(rows.sum(axis=1) - 1.0).max() > _SIMPLEX_TOL:
            raise ValueError("label distributions must lie on the simplex")

    @property
    def n_components(self) -> int:
        return self.class_means.shape[0]

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[1]

    @property
    def input_dim(self) -> int:
        return self.class_means.shape[2]


@dataclass
class DomainSpec:
    alpha: np.ndarray  # mixing weights over the K components
    n_samples: int
    role: str

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.role not in ROLES:
            raise ValueError(f"unknown domain role {self.role!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if (self.alpha < 0).any() or abs(self.alpha.sum() - 1.0) > _SIMPLEX_TOL:
            raise ValueError("alpha must lie on the probability simplex")


@dataclass
class DomainSample:
    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,) class labels
    tags: np.ndarray  # (n,) true component per sample; diagnostics only


@dataclass
class SyntheticBenchmark:
    elementary: ElementarySpec
    domains: list
    seed: int
    params: dict = field(default_factory=dict)  # generator args, for round-trips

    def __post_init__(self):
        roles = [d.role for d in self.domains]
        if roles.count("source") < 2 or roles.count("target") < 1:
            raise ValueError("need at least two source domains and one target")
        if self.elementary.n_components == 1:
            # Degenerate single-component benchmarks are allowed for
            # baselines; every mixture is the same point of the simplex.
            return
        sources = [d.alpha for d in self.domains if d.role == "source"]
        for target in (d.alpha for d in self.domains if d.role == "target"):
            gap = min(float(np.abs(target - s).sum()) for s in sources)
            if gap <= _MIN_TARGET_L1_GAP:
                raise ValueError(
                    f"target alpha too close to a source (L1 gap {gap:.3f})"
                )


def sample_domain(spec: DomainSpec, elem: ElementarySpec, seed: int) -> DomainSample:
    """Draw ``n_samples`` rows: component ~ alpha, class ~ component's label
    distribution, features ~ the component/class Gaussian."""
    rng = np.random.default_rng(seed)
    n = spec.n_samples
    tags = rng.choice(elem.n_components, size=n, p=spec.alpha)
    label_cdf = np.cumsum(elem.label_dist, axis=1)
    u = rng.random(n)
    labels = (u[:, None] > label_cdf[tags]).sum(axis=1)
    noise = rng.standard_normal((n, elem.input_dim))
    x = elem.class_means[tags, labels] + noise * np.sqrt(elem.cov_diag[tags])
    return DomainSample(x, labels.astype(np.int64), tags.astype(np.int64))


def _component_frame(n_components, n_classes, input_dim, separation, class_offset):
    """Component centers on scaled axes plus per-component rotated class
    directions in a shared two-dimensional plane."""
    if input_dim < n_components + 2:
        raise ValueError(
            f"input_dim must be >= n_components + 2, got {input_dim} < "
            f"{n_components + 2}"
        )
    centers = np.zeros((n_components, input_dim))
    for j in range(n_components):
        centers[j, j] = separation / math.sqrt(2.0)
    means = np.zeros((n_components, n_classes, input_dim))
    ax_u, ax_v = input_dim - 2, input_dim - 1
    for j in range(n_components):
        # Rotations cover the full circle so that some component pairs
        # carry opposite label rules in the shared class plane; no single
        # linear rule can then serve every component.
        rotation = 2.0 * math.pi * j / n_components
        for y in range(n_classes):
            angle = rotation + 2.0 * math.pi * y / n_classes
            means[j, y] = centers[j]
            means[j, y, ax_u] += class_offset * math.cos(angle)
            means[j, y, ax_v] += class_offset * math.sin(angle)
    return means


def make_benchmark(
    n_components: int,
    n_classes: int,
    input_dim: int,
    n_sources: int,
    seed: int,
    separation: float = 10.0,
    class_offset: float = 2.0,
    n_train: int = 400,
    n_val: int = 150,
    n_target: int = 600,
    alpha_concentration: float = 1.0,
    target_weight: float = 0.75,
    label_skew: float = 0.0,
) -> SyntheticBenchmark:
    """Build a benchmark with invariant components and shifted mixtures.

    Source mixing weights are Dirichlet draws; the target concentrates
    ``target_weight`` on the component the sources care about least, and is
    redrawn until it clears the distinctness requirement. ``label_skew``
    tilts each component's label distribution toward one class (the
    conditional-shift knob); zero keeps labels uniform.
    """
    params = dict(
        n_components=n_components,
        n_classes=n_classes,
        input_dim=input_dim,
        n_sources=n_sources,
        seed=seed,
        separation=separation,
        class_offset=class_offset,
        n_train=n_train,
        n_val=n_val,
        n_target=n_target,
        alpha_concentration=alpha_concentration,
        target_weight=target_weight,
        label_skew=label_skew,
    )
    if n_components < 1 or n_classes < 2 or n_sources < 2:
        raise ValueError("need n_components >= 1, n_classes >= 2, n_sources >= 2")
    rng = np.random.default_rng(seed)
    means = _component_frame(
        n_components, n_classes, input_dim, separation, class_offset
    )
    cov = np.ones((n_components, input_dim))
    label_dist = np.full((n_components, n_classes), 1.0 / n_classes)
    if label_skew != 0.0:
        for j in range(n_components):
            label_dist[j, j % n_classes] += label_skew
        label_dist /= label_dist.sum(axis=1, keepdims=True)
    elem = ElementarySpec(means, cov, label_dist)

    for _ in range(64):
        alphas = rng.dirichlet(np.full(n_components, alpha_concentration), n_sources)
        rare = int(np.argmin(alphas.sum(axis=0)))
        target_alpha = np.full(n_components, (1.0 - target_weight) / n_components)
        target_alpha[rare] += target_weight
        gap = np.abs(target_alpha - alphas).sum(axis=1).min()
        if n_components == 1 or gap > _MIN_TARGET_L1_GAP:
            break
    else:
        raise RuntimeError("could not draw a sufficiently distinct target mixture")

    domains = [DomainSpec(alpha, n_train, "source") for alpha in alphas]
    domains += [DomainSpec(alpha, n_val, "validation") for alpha in alphas]
    domains.append(DomainSpec(target_alpha, n_target, "target"))
    return SyntheticBenchmark(elem, domains, seed, params)


def materialize(benchmark: SyntheticBenchmark) -> list:
    """Sample every domain with independent deterministic seed streams."""
    states = np.random.SeedSequence(benchmark.seed).generate_state(
        len(benchmark.domains)
    )
    return [
        sample_domain(spec, benchmark.elementary, int(state))
        for spec, state in zip(benchmark.domains, states)
    ]


# -- files -------------------------------------------------------------------


def write_dataset_csv(path, samples):
    """One row per sample across domains: domain_id,label,tag,f0..f{e-1}."""
    dim = samples[0].x.shape[1]
    header = "domain_id,label,tag," + ",".join(f"f{i}" for i in range(dim))
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for domain_id, sample in enumerate(samples):
            for xi, yi, ti in zip(sample.x, sample.y, sample.tags):
                feats = ",".join(repr(float(v)) for v in xi)
                fh.write(f"{domain_id},{yi},{ti},{feats}\n")


def read_dataset_csv(path):
    """Parse a dataset CSV back into per-domain :class:`DomainSample`."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["domain_id", "label", "tag"]:
            raise ValueError(f"unexpected dataset header {header[:3]}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if not rows:
        raise ValueError("dataset file contains no samples")
    domain_ids = np.array([int(r[0]) for r in rows])
    labels = np.array([int(r[1]) for r in rows])
    tags = np.array([int(r[2]) for r in rows])
    feats = np.array([[float(v) for v in r[3:]] for r in rows])
    samples = []
    for domain_id in range(domain_ids.max() + 1):
        mask = domain_ids == domain_id
        if not mask.any():
            raise ValueError(f"dataset is missing domain {domain_id}")
        samples.append(DomainSample(feats[mask], labels[mask], tags[mask]))
    return samples


def write_benchmark_meta(path, benchmark: SyntheticBenchmark):
    """Flat key=value file: generator arguments plus per-domain roles."""
    lines = ["format = gdu-benchmark-1"]
    for key, value in benchmark.params.items():
        lines.append(f"{key} = {value}")
    lines.append(f"domain_count = {len(benchmark.domains)}")
    for i, d in enumerate(benchmark.domains):
        alpha = " ".join(repr(float(a)) for a in d.alpha)
        lines.append(f"domain_{i}_role = {d.role}")
        lines.append(f"domain_{i}_n = {d.n_samples}")
        lines.append(f"domain_{i}_alpha = {alpha}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_flat_mapping(text: str) -> dict:
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def read_benchmark_meta(path) -> SyntheticBenchmark:
    """Rebuild the benchmark from its meta file (regenerates the specs)."""
    with open(path) as fh:
        mapping = _parse_flat_mapping(fh.read())
    if mapping.get("format") != "gdu-benchmark-1":
        raise ValueError(f"not a benchmark meta file: format={mapping.get('format')!r}")
    kwargs = dict(
        n_components=int(mapping["n_components"]),
        n_classes=int(mapping["n_classes"]),
        input_dim=int(mapping["input_dim"]),
        n_sources=int(mapping["n_sources"]),
        seed=int(mapping["seed"]),
        separation=float(mapping["separation"]),
        class_offset=float(mapping["class_offset"]),
        n_train=int(mapping["n_train"]),
        n_val=int(mapping["n_val"]),
        n_target=int(mapping["n_target"]),
        alpha_concentration=float(mapping["alpha_concentration"]),
        target_weight=float(mapping["target_weight"]),
        label_skew=float(mapping["label_skew"]),
    )
    return make_benchmark(**kwargs)
