"""Synthetic observational data, enumerable discrete toy DGPs, tabular IO,
and covariate-subset masking.

Datasets are immutable after construction (arrays are marked read-only) and
safe to share across readers. All generators are deterministic per seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

# Signature: (x, a, count, rng) -> samples of shape (count, d_y)
CDPOSampler = Callable[[np.ndarray, int, int, np.random.Generator], np.ndarray]


class SchemaError(ValueError):
    """Raised when a tabular file does not match the dataset column schema."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ObservationalSample:
    """One observational triple (x, a, y)."""

    x: np.ndarray
    a: int
    y: np.ndarray

    def __post_init__(self):
        if self.a not in (0, 1):
            raise ValueError(f"treatment must be 0 or 1, got {self.a}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("covariates and outcomes must be finite")
        if self.x.ndim != 1 or self.y.ndim != 1 or self.x.size < 1 or self.y.size < 1:
            raise ValueError("x and y must be non-empty vectors")


@dataclass(frozen=True)
class PODataset:
    """Observational triples plus optional ground-truth counterfactual data.

    Attributes
    ----------
    x : (n, d_x) covariates
    a : (n,) binary treatments
    y : (n, d_y) observed outcomes
    y0, y1 : optional (n, d_y) joint potential-outcome draws per row
    ground_truth : optional sampler ``(x, a, count, rng) -> (count, d_y)``
        drawing from the true conditional distribution of Y[a] given x
    v_mask : optional ordered covariate index subset defining the
        conditioning set V for target models; ``None`` means V = X.
        Nuisance models always receive the full x.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    y0: Optional[np.ndarray] = None
    y1: Optional[np.ndarray] = None
    ground_truth: Optional[CDPOSampler] = None
    v_mask: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        a = np.asarray(self.a, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 2 or a.ndim != 1:
            raise ValueError("x and y must be 2-D, a must be 1-D")
        if not (x.shape[0] == y.shape[0] == a.shape[0]):
            raise ValueError("x, a, y must share the sample dimension")
        if x.shape[1] < 1 or y.shape[1] < 1:
            raise ValueError("d_x and d_y must be >= 1")
        if not np.all(np.isin(a, (0, 1))):
            raise ValueError("treatments must be binary 0/1")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("x and y must be finite")
        object.__setattr__(self, "x", _readonly(x))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "a", _readonly(a))
        for name in ("y0", "y1"):
            po = getattr(self, name)
            if po is not None:
                po = np.asarray(po, dtype=np.float64)
                if po.shape != y.shape:
                    raise ValueError(f"{name} must have shape {y.shape}")
                object.__setattr__(self, name, _readonly(po))
        if self.v_mask is not None:
            mask = tuple(int(i) for i in self.v_mask)
            if any(i < 0 or i >= x.shape[1] for i in mask):
                raise IndexError(f"v_mask indices out of range [0, {x.shape[1]})")
            object.__setattr__(self, "v_mask", mask)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def d_v(self) -> int:
        return self.d_x if self.v_mask is None else len(self.v_mask)

    @property
    def v(self) -> np.ndarray:
        """Conditioning inputs for target models: x restricted to v_mask."""
        if self.v_mask is None:
            return self.x
        return self.x[:, list(self.v_mask)]

    @property
    def has_joint_po(self) -> bool:
        return self.y0 is not None and self.y1 is not None

    def po(self, a: int) -> np.ndarray:
        if not self.has_joint_po:
            raise ValueError("dataset has no joint potential-outcome columns")
        return self.y0 if a == 0 else self.y1

    @property
    def samples(self) -> Iterator[ObservationalSample]:
        for i in range(self.n):
            yield ObservationalSample(self.x[i], int(self.a[i]), self.y[i])

    def subset(self, idx: np.ndarray) -> "PODataset":
        return PODataset(
            x=self.x[idx],
            a=self.a[idx],
            y=self.y[idx],
            y0=None if self.y0 is None else self.y0[idx],
            y1=None if self.y1 is None else self.y1[idx],
            ground_truth=self.ground_truth,
            v_mask=self.v_mask,
        )


def apply_v_mask(ds: PODataset, mask: Sequence[int]) -> PODataset:
    """Return a conditioning view of ``ds`` with V = x[mask].

    The view shares the underlying arrays with ``ds`` (no copy); only the
    target-model conditioning changes. Nuisance-side inputs (``ds.x``) are
    unaffected.
    """
    mask = tuple(int(i) for i in mask)
    for i in mask:
        if i < 0 or i >= ds.d_x:
            raise IndexError(f"mask index {i} out of range [0, {ds.d_x})")
    return replace(ds, v_mask=mask)


# ---------------------------------------------------------------------------
# Noisy-moons benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MoonsConfig:
    """Parameters of the noisy-moons observational DGP.

    Covariates lie on the two-moons pattern with Gaussian jitter. The
    potential outcome under arm ``a`` is the covariate point rotated by a
    random angle drawn from N(angle_params[a][0], angle_params[a][1]^2),
    plus Gaussian jitter. Treatments follow a squashed logistic rule in x,
    so the propensity is confined to [overlap_eps, 1 - overlap_eps].
    """

    n_train: int = 4000
    n_test: int = 1000
    noise_scale: float = 0.1
    # (mean, std) of the rotation angle per treatment arm, radians
    angle_params: tuple[tuple[float, float], tuple[float, float]] = (
        (0.25, 0.15),
        (1.35, 0.25),
    )
    # logit intercept and x-coefficients of the treatment-assignment rule
    propensity_params: tuple[float, float, float] = (-0.25, 1.0, -0.6)
    overlap_eps: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.n_train <= 0 or self.n_test < 0:
            raise ValueError("sample counts must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0 < self.overlap_eps < 0.5:
            raise ValueError("overlap_eps must lie in (0, 0.5)")

    def propensity(self, x: np.ndarray) -> np.ndarray:
        """Analytic P(A=1 | x) of the assignment rule, shape (n,)."""
        b0, b1, b2 = self.propensity_params
        logit = b0 + b1 * x[..., 0] + b2 * x[..., 1]
        p = 1.0 / (1.0 + np.exp(-logit))
        return self.overlap_eps + (1.0 - 2.0 * self.overlap_eps) * p


def _rotate(points: np.ndarray, angles: np.ndarray) -> np.ndarray:
    c, s = np.cos(angles), np.sin(angles)
    out = np.empty_like(points)
    out[:, 0] = c * points[:, 0] - s * points[:, 1]
    out[:, 1] = s * points[:, 0] + c * points[:, 1]
    return out


def _moons_outcome(
    cfg: MoonsConfig, x: np.ndarray, a: int, rng: np.random.Generator
) -> np.ndarray:
    mean, std = cfg.angle_params[a]
    angles = mean + std * rng.standard_normal(x.shape[0])
    y = _rotate(x, angles)
    y = y + cfg.noise_scale * rng.standard_normal(y.shape)
    return y

def _moons_sampler(cfg: MoonsConfig) -> CDPOSampler:
    def sample(x, a, count, rng):
        x = np.asarray(x, dtype=np.float64).reshape(1, 2)
        pts = np.repeat(x, count, axis=0)
        return _moons_outcome(cfg, pts, int(a), rng)

    return sample


def _generate_moons_split(cfg: MoonsConfig, n: int, rng: np.random.Generator) -> PODataset:
    moon = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, np.pi, size=n)
    x = np.empty((n, 2))
    outer = moon == 0
    x[outer, 0] = np.cos(t[outer])
    x[outer, 1] = np.sin(t[outer])
    x[~outer, 0] = 1.0 - np.cos(t[~outer])
    x[~outer, 1] = 0.5 - np.sin(t[~outer])
    x = x + cfg.noise_scale * rng.standard_normal(x.shape)

    pi1 = cfg.propensity(x)
    a = (rng.uniform(size=n) < pi1).astype(np.int64)

    y0 = _moons_outcome(cfg, x, 0, rng)
    y1 = _moons_outcome(cfg, x, 1, rng)
    y = np.where(a[:, None] == 0, y0, y1)

    return PODataset(x=x, a=a, y=y, y0=y0, y1=y1, ground_truth=_moons_sampler(cfg))


def generate_moons_dataset(cfg: MoonsConfig) -> tuple[PODataset, PODataset]:
    """Generate (train, test) splits of the noisy-moons benchmark.

    d_x = d_y = 2. Both splits carry the ground-truth CDPO sampler and joint
    potential-outcome columns. Deterministic under ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    train = _generate_moons_split(cfg, cfg.n_train, rng)
    test = _generate_moons_split(cfg, cfg.n_test, rng)
    return train, test


# ---------------------------------------------------------------------------
# Enumerable discrete toy DGPs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteToyDGP:
    """Finite-support DGP with an exact joint probability table.

    ``joint[i, a, j]`` = P(X = x_support[i], A = a, Y = y_support[j]).
    All expectations over this DGP are exact finite sums, which makes it a
    substrate for machine-precision oracle computations.

    ``v_of_x`` optionally maps each x-atom to a coarser v-atom (conditioning
    subset V of X); identity when ``None``.
    """

    x_support: np.ndarray  # (n_x, d_x)
    y_support: np.ndarray  # (n_y, d_y)
    joint: np.ndarray  # (n_x, 2, n_y)
    v_of_x: Optional[np.ndarray] = None

    def __post_init__(self):
        xs = np.atleast_2d(np.asarray(self.x_support, dtype=np.float64))
        ys = np.atleast_2d(np.asarray(self.y_support, dtype=np.float64))
        joint = np.asarray(self.joint, dtype=np.float64)
        if joint.shape != (xs.shape[0], 2, ys.shape[0]):
            raise ValueError(
                f"joint must have shape ({xs.shape[0]}, 2, {ys.shape[0]}), got {joint.shape}"
            )
        if np.any(joint < 0):
            raise ValueError("joint probabilities must be nonnegative")
        if abs(joint.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint table must sum to 1, got {joint.sum()!r}")
        object.__setattr__(self, "x_support", _readonly(xs))
        object.__setattr__(self, "y_support", _readonly(ys))
        object.__setattr__(self, "joint", _readonly(joint))
        if self.v_of_x is not None:
            v = np.asarray(self.v_of_x, dtype=np.int64)
            if v.shape != (xs.shape[0],):
                raise ValueError("v_of_x must have one entry per x atom")
            object.__setattr__(self, "v_of_x", _readonly(v))
        # strong overlap: every arm reachable from every x atom
        if np.any(self.propensity <= 0.0) or np.any(self.propensity >= 1.0):
            raise ValueError("strong overlap violated: propensity must lie in (0, 1)")

    @property
    def n_x(self) -> int:
        return self.x_support.shape[0]

    @property
    def n_y(self) -> int:
        return self.y_support.shape[0]

    @property
    def p_x(self) -> np.ndarray:
        """(n_x,) marginal P(X = x_i)."""
        return self.joint.sum(axis=(1, 2))

    @property
    def propensity(self) -> np.ndarray:
        """(n_x, 2) table pi_a(x) = P(A = a | X = x)."""
        return self.joint.sum(axis=2) / self.p_x[:, None]

    @property
    def xi(self) -> np.ndarray:
        """(n_x, 2, n_y) table xi_a(y | x) = P(Y = y | X = x, A = a)."""
        return self.joint / self.joint.sum(axis=2, keepdims=True)

    @property
    def overlap_margin(self) -> float:
        return float(self.propensity.min())

    @property
    def v_ids(self) -> np.ndarray:
        if self.v_of_x is None:
            return np.arange(self.n_x)
        return self.v_of_x

    @property
    def n_v(self) -> int:
        return int(self.v_ids.max()) + 1

    def cdpo(self, a: int) -> np.ndarray:
        """(n_v, n_y) true conditional distribution of Y[a] given V.

        P(Y[a] = y | V = v) = E[xi_a(y | X) | V = v].
        """
        p_x = self.p_x
        out = np.zeros((self.n_v, self.n_y))
        p_v = np.zeros(self.n_v)
        for i, v in enumerate(self.v_ids):
            out[v] += p_x[i] * self.xi[i, a]
            p_v[v] += p_x[i]
        return out / p_v[:, None]

    def sample(self, n: int, rng: np.random.Generator) -> PODataset:
        """Draw n observational triples from the joint table."""
        flat = self.joint.reshape(-1)
        idx = rng.choice(flat.size, size=n, p=flat)
        i, rest = np.divmod(idx, 2 * self.n_y)
        a, j = np.divmod(rest, self.n_y)
        return PODataset(x=self.x_support[i], a=a.astype(np.int64), y=self.y_support[j])


@dataclass(frozen=True)
class DiscreteEnumeration:
    """Exhaustive outcome table of a discrete DGP: every (x, a, y) triple
    with its exact probability, plus the consistent conditional tables."""

    x_idx: np.ndarray
    a: np.ndarray
    y_idx: np.ndarray
    prob: np.ndarray
    propensity: np.ndarray  # (n_x, 2)
    xi: np.ndarray  # (n_x, 2, n_y)


def enumerate_toy_dgp(dgp: DiscreteToyDGP) -> DiscreteEnumeration:
    """List all (x, a, y) atoms with exact probabilities and conditionals.

    The derived tables satisfy pi_a(x) * P(X=x) = sum_y P(x, a, y) by exact
    arithmetic on the joint table.
    """
    n_x, _, n_y = dgp.joint.shape
    grid = np.indices((n_x, 2, n_y))
    return DiscreteEnumeration(
        x_idx=grid[0].reshape(-1),
        a=grid[1].reshape(-1),
        y_idx=grid[2].reshape(-1),
        prob=dgp.joint.reshape(-1).copy(),
        propensity=dgp.propensity,
        xi=dgp.xi,
    )


def random_discrete_dgp(
    rng: np.random.Generator,
    n_x: int = 3,
    n_y: int = 4,
    d_x: int = 1,
    d_y: int = 1,
    pi_range: tuple[float, float] = (0.3, 0.7),
    xi_floor: float = 0.05,
    v_of_x: Optional[np.ndarray] = None,
) -> DiscreteToyDGP:
    """Draw a random enumerable DGP with all densities bounded away from zero.

    The floor on xi and the propensity range keep every exact-expectation
    functional smooth under the perturbation magnitudes used in the
    verification bench.
    """
    p_x = rng.dirichlet(np.full(n_x, 5.0))
    p_x = 0.5 * p_x + 0.5 / n_x  # floor the covariate marginal
    pi1 = rng.uniform(*pi_range, size=n_x)
    pi = np.stack([1.0 - pi1, pi1], axis=1)
    xi = rng.dirichlet(np.full(n_y, 2.0), size=(n_x, 2))
    xi = (1.0 - n_y * xi_floor) * xi + xi_floor
    joint = p_x[:, None, None] * pi[:, :, None] * xi
    x_support = np.sort(rng.standard_normal((n_x, d_x)), axis=0)
    y_support = np.sort(rng.standard_normal((n_y, d_y)), axis=0)
    return DiscreteToyDGP(
        x_support=x_support, y_support=y_support, joint=joint, v_of_x=v_of_x
    )


# ---------------------------------------------------------------------------
# Tabular file IO
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularSchema:
    """Expected column layout of a tabular PO-dataset file."""

    d_x: int
    d_y: int
    with_po: bool = False

    def columns(self) -> list[str]:
        cols = [f"x_{i}" for i in range(self.d_x)]
        cols.append("a")
        cols += [f"y_{i}" for i in range(self.d_y)]
        if self.with_po:
            cols += [f"y0_{i}" for i in range(self.d_y)]
            cols += [f"y1_{i}" for i in range(self.d_y)]
        return cols


def _infer_schema(header: list[str]) -> TabularSchema:
    d_x = sum(1 for c in header if c.startswith("x_"))
    d_y = sum(1 for c in header if c.startswith("y_"))
    with_po = any(c.startswith("y0_") for c in header)
    if d_x < 1 or d_y < 1 or "a" not in header:
        raise SchemaError(f"header {header} is not a valid PO-dataset schema")
    return TabularSchema(d_x=d_x, d_y=d_y, with_po=with_po)


def save_tabular_dataset(ds: PODataset, path) -> None:
    """Write a dataset as delimited text with a header row.

    Floats are serialized with 17 significant digits so that a load/save
    round trip is bit-exact in double precision.
    """
    schema = TabularSchema(d_x=ds.d_x, d_y=ds.d_y, with_po=ds.has_joint_po)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.columns())
        for i in range(ds.n):
            row = [f"{val:.17g}" for val in ds.x[i]]
            row.append(str(int(ds.a[i])))
            row += [f"{val:.17g}" for val in ds.y[i]]
            if schema.with_po:
                row += [f"{val:.17g}" for val in ds.y0[i]]
                row += [f"{val:.17g}" for val in ds.y1[i]]
            writer.writerow(row)


def load_tabular_dataset(path, schema: Optional[TabularSchema] = None) -> PODataset:
    """Load a delimited-text PO dataset.

    Parameters
    ----------
    path : file path
    schema : optional expected layout; inferred from the header when None
        and validated against it otherwise.

    Raises
    ------
    SchemaError
        On missing columns, a non-binary treatment value, or a NaN value;
        the message names the offending (1-based data) row.
    """
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("file is empty") from None
        inferred = _infer_schema(header)
        if schema is not None and (
            schema.d_x != inferred.d_x
            or schema.d_y != inferred.d_y
            or schema.with_po != inferred.with_po
        ):
            raise SchemaError(f"header {header} does not match expected schema {schema}")
        schema = inferred
        expected = schema.columns()
        if header != expected:
            raise SchemaError(f"expected columns {expected}, got {header}")

        n_cols = len(expected)
        a_col = schema.d_x
        rows: list[list[float]] = []
        for row_num, row in enumerate(reader, start=1):
            if len(row) != n_cols:
                raise SchemaError(f"row {row_num}: expected {n_cols} fields, got {len(row)}")
            try:
                vals = [float(tok) for tok in row]
            except ValueError as exc:
                raise SchemaError(f"row {row_num}: {exc}") from None
            if any(np.isnan(v) for v in vals):
                raise SchemaError(f"row {row_num}: NaN value")
            a_val = row[a_col]
            if a_val not in ("0", "1"):
                raise SchemaError(f"row {row_num}: treatment must be integer 0/1, got {a_val!r}")
            rows.append(vals)

    if not rows:
        raise SchemaError("file contains no data rows")
    data = np.asarray(rows, dtype=np.float64)
    d_x, d_y = schema.d_x, schema.d_y
    x = data[:, :d_x]
    a = data[:, d_x].astype(np.int64)
    y = data[:, d_x + 1 : d_x + 1 + d_y]
    y0 = y1 = None
    if schema.with_po:
        y0 = data[:, d_x + 1 + d_y : d_x + 1 + 2 * d_y]
        y1 = data[:, d_x + 1 + 2 * d_y :]
    return PODataset(x=x, a=a, y=y, y0=y0, y1=y1)
