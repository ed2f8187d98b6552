"""Maps of the 3-torus: linear automorphisms plus sine perturbations.

Points live in [0,1)^3.  All operations are batch-first: a "point" argument
may be any array of shape (..., 3) and the result has the same shape.  Leaf
and orbit computations elsewhere keep integer lift offsets, so this module
also exposes lift-space variants (`apply_lift`, `inverse_lift`) that do not
reduce mod 1; they commute with integer translations because the
perturbation is 1-periodic.

Built-in families:

  linear        x -> A x (mod 1), A any unimodular integer matrix
  gmk           A = [[2,1,0],[1,2,1],[0,1,1]], plus eps*sin(2*pi*x) added to
                the first two coordinates
  skew_product  A = [[2,1,0],[1,1,0],[0,0,1]] (z is carried isometrically),
                same perturbation shape
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InadmissibleEpsilonError,
    MissingParamError,
    NoConvergenceError,
    NonUnimodularMatrixError,
    UnknownFamilyError,
)

GMK_MATRIX = np.array([[2, 1, 0], [1, 2, 1], [0, 1, 1]], dtype=np.int64)
SKEW_MATRIX = np.array([[2, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=np.int64)

# the sine term enters the first two coordinate equations
_PERT_DIR = np.array([1.0, 1.0, 0.0])

# tight tolerance: backward orbits feed leaf growth, where per-step errors
# are amplified by the unstable stretch before being contracted back
_INVERSE_TOL = 1e-13
_INVERSE_CAP = 100

_CONE_GRID = 32


def wrap(p):
    """Canonical representative in [0,1)^3."""
    return np.asarray(p, dtype=float) % 1.0


def wrap_diff(d):
    """Reduce a displacement to the minimal lift, coordinates in [-1/2, 1/2)."""
    return (np.asarray(d, dtype=float) + 0.5) % 1.0 - 0.5


def torus_distance(p, q):
    """Euclidean distance through the minimal lift (<= sqrt(3)/2)."""
    return np.linalg.norm(wrap_diff(np.asarray(q, float) - np.asarray(p, float)), axis=-1)


def _det3_int(m) -> int:
    m = np.asarray(m, dtype=np.int64)
    return int(
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )


def _adjugate_batch(j):
    """Adjugate of a (...,3,3) stack; equals the inverse when det == 1."""
    a = np.empty_like(j)
    a[..., 0, 0] = j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1]
    a[..., 0, 1] = j[..., 0, 2] * j[..., 2, 1] - j[..., 0, 1] * j[..., 2, 2]
    a[..., 0, 2] = j[..., 0, 1] * j[..., 1, 2] - j[..., 0, 2] * j[..., 1, 1]
    a[..., 1, 0] = j[..., 1, 2] * j[..., 2, 0] - j[..., 1, 0] * j[..., 2, 2]
    a[..., 1, 1] = j[..., 0, 0] * j[..., 2, 2] - j[..., 0, 2] * j[..., 2, 0]
    a[..., 1, 2] = j[..., 0, 2] * j[..., 1, 0] - j[..., 0, 0] * j[..., 1, 2]
    a[..., 2, 0] = j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0]
    a[..., 2, 1] = j[..., 0, 1] * j[..., 2, 0] - j[..., 0, 0] * j[..., 2, 1]
    a[..., 2, 2] = j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]
    return a


def jacobian_det(j):
    return (
        j[..., 0, 0] * (j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1])
        - j[..., 0, 1] * (j[..., 1, 0] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 0])
        + j[..., 0, 2] * (j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0])
    )


@dataclass(frozen=True)
class TorusMap:
    """A diffeomorphism of T^3: integer linear part plus sine perturbation.

    Immutable after construction; every method is pure.  Use `make_map` to
    construct validated instances.
    """

    linear: np.ndarray          # (3,3) int64, |det| = 1
    family: str                 # 'linear' | 'gmk' | 'skew_product'
    epsilon: float = 0.0

    # derived, filled in __post_init__
    _linf: np.ndarray = field(init=False, repr=False)
    _linv: np.ndarray = field(init=False, repr=False)
    _inv_direct: bool = field(init=False, repr=False)
    _ref_frame: np.ndarray = field(init=False, repr=False)   # columns uu,c,ss
    _ref_rates: np.ndarray = field(init=False, repr=False)   # |eigenvalues|

    def __post_init__(self):
        lin = np.asarray(self.linear, dtype=np.int64)
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "_linf", lin.astype(float))
        object.__setattr__(self, "_linv", np.linalg.inv(lin.astype(float)))
        object.__setattr__(
            self, "_inv_direct", bool(abs((self._linv @ _PERT_DIR)[0]) < 1e-14)
        )
        w, v = np.linalg.eig(lin.astype(float))
        if np.iscomplexobj(w) and np.abs(w.imag).max() > 1e-12:
            # complex spectrum: no reference splitting; keep identity frame
            object.__setattr__(self, "_ref_frame", np.eye(3))
            object.__setattr__(self, "_ref_rates", np.abs(w))
            return
        w = w.real
        v = v.real
        order = np.argsort(-np.abs(w))
        v = v[:, order] / np.linalg.norm(v[:, order], axis=0)
        # fix signs once so reference directions are reproducible
        for k in range(3):
            j = np.argmax(np.abs(v[:, k]))
            if v[j, k] < 0:
                v[:, k] = -v[:, k]
        object.__setattr__(self, "_ref_frame", v)
        object.__setattr__(self, "_ref_rates", np.abs(w[order]))

    # -- reference data -----------------------------------------------------

    @property
    def reference_directions(self):
        """Eigenvector columns of the linear part, ordered uu, c, ss."""
        return self._ref_frame

    @property
    def reference_rates(self):
        return self._ref_rates

    def norm_sup(self) -> float:
        """sup over T^3 of the operator norm of the one-step tangent map."""
        x = np.linspace(0.0, 1.0, 257)[:, None] * np.array([1.0, 0.0, 0.0])
        jac = self.jacobian(x)
        return float(np.linalg.norm(jac, 2, axis=(-2, -1)).max())

    def norm_sup_inv(self) -> float:
        """sup over T^3 of the operator norm of the inverse tangent map."""
        x = np.linspace(0.0, 1.0, 257)[:, None] * np.array([1.0, 0.0, 0.0])
        jac = self.jacobian_inv(x)
        return float(np.linalg.norm(jac, 2, axis=(-2, -1)).max())

    # -- evaluation ----------------------------------------------------------

    def _pert(self, x):
        return self.epsilon * np.sin(2.0 * np.pi * x)

    def apply_lift(self, p):
        """Lift of the map to R^3 (no mod-1 reduction)."""
        p = np.asarray(p, dtype=float)
        out = p @ self._linf.T
        if self.epsilon != 0.0:
            out = out + self._pert(p[..., 0])[..., None] * _PERT_DIR
        return out

    def apply(self, p):
        return self.apply_lift(wrap(p)) % 1.0

    def inverse_lift(self, q):
        """Solve apply_lift(p) = q by fixed-point iteration on the lift.

        Seeded by the linear inverse; contraction requires
        eps * 2*pi * |A^-1 u| < 1 (checked at construction).  For the
        built-in families A^-1 u has no x-component, so the x-coordinate of
        the preimage is available directly and the solve closes in one
        evaluation.
        """
        q = np.asarray(q, dtype=float)
        p = q @ self._linv.T
        if self.epsilon == 0.0:
            return p
        if self._inv_direct:
            return (q - self._pert(p[..., 0])[..., None] * _PERT_DIR) @ self._linv.T
        # absolute tolerance scales with the lift magnitude: rounding alone
        # contributes ~ |A^-1| * eps_mach * |q| per sweep
        thresh = _INVERSE_TOL * max(1.0, float(np.max(np.abs(q))))
        for _ in range(_INVERSE_CAP):
            p_new = (q - self._pert(p[..., 0])[..., None] * _PERT_DIR) @ self._linv.T
            step = np.max(np.abs(p_new - p))
            p = p_new
            if step < thresh:
                return p
        raise NoConvergenceError(
            f"inverse fixed-point iteration did not reach {thresh:.2e} "
            f"in {_INVERSE_CAP} steps (last step {step:.3e})"
        )

    def apply_inverse(self, p):
        return self.inverse_lift(wrap(p)) % 1.0

    def jacobian(self, p):
        """Analytic tangent map at p, shape (...,3,3)."""
        p = np.asarray(p, dtype=float)
        base = np.broadcast_to(self._linf, p.shape[:-1] + (3, 3)).copy()
        if self.epsilon != 0.0:
            c = self.epsilon * 2.0 * np.pi * np.cos(2.0 * np.pi * p[..., 0])
            base[..., 0, 0] += c
            base[..., 1, 0] += c
        return base

    def jacobian_inv(self, p):
        """Inverse tangent map; uses the adjugate (det is identically 1)."""
        j = self.jacobian(p)
        return _adjugate_batch(j) / jacobian_det(j)[..., None, None]


def _contraction_constant(lin: np.ndarray) -> float:
    linv = np.linalg.inv(lin.astype(float))
    return 2.0 * np.pi * float(np.linalg.norm(linv @ _PERT_DIR))


# admissibility verdicts are expensive (grid-wide power iteration), so they
# are cached per (family, epsilon, grid)
_ADMISSIBILITY_CACHE: dict = {}


def _check_splitting_survives(tmap: TorusMap, grid_n: int = _CONE_GRID):
    """Grid-wide check that the perturbed map keeps its invariant splitting.

    Delegates to the splitting module (imported lazily to avoid a cycle):
    the computed bundles must keep the rate ordering, a nondegenerate frame,
    and equivariance under Df everywhere on the grid.
    """
    key = (tmap.family, float(tmap.epsilon), grid_n)
    if key in _ADMISSIBILITY_CACHE:
        err = _ADMISSIBILITY_CACHE[key]
        if err is not None:
            raise InadmissibleEpsilonError(err)
        return
    from .splitting import verify_partial_hyperbolicity

    try:
        verify_partial_hyperbolicity(tmap, grid_n=grid_n)
    except Exception as exc:  # noqa: BLE001 - converted to a verdict below
        _ADMISSIBILITY_CACHE[key] = f"epsilon={tmap.epsilon}: {exc}"
        raise InadmissibleEpsilonError(_ADMISSIBILITY_CACHE[key]) from exc
    _ADMISSIBILITY_CACHE[key] = None


def make_map(family: str, **params) -> TorusMap:
    """Validated construction of a TorusMap.

    linear:        requires `matrix` (3x3 integers, |det| = 1)
    gmk:           requires `epsilon`
    skew_product:  requires `epsilon`
    """
    fam = family.lower()
    if fam == "linear":
        if "matrix" not in params:
            raise MissingParamError("family 'linear' requires a matrix")
        m = np.asarray(params["matrix"])
        if m.shape != (3, 3):
            raise NonUnimodularMatrixError(f"matrix must be 3x3, got {m.shape}")
        if not np.allclose(m, np.round(m)):
            raise NonUnimodularMatrixError("matrix entries must be integers")
        m = np.round(m).astype(np.int64)
        if abs(_det3_int(m)) != 1:
            raise NonUnimodularMatrixError(f"|det| = {abs(_det3_int(m))}, must be 1")
        return TorusMap(linear=m, family="linear", epsilon=0.0)

    if fam in ("gmk", "skew_product"):
        if "epsilon" not in params:
            raise MissingParamError(f"family '{fam}' requires epsilon")
        eps = float(params["epsilon"])
        if eps < 0:
            raise InadmissibleEpsilonError("epsilon must be >= 0")
        lin = GMK_MATRIX if fam == "gmk" else SKEW_MATRIX
        tmap = TorusMap(linear=lin.copy(), family=fam, epsilon=eps)
        if eps > 0.0:
            lip = eps * _contraction_constant(lin)
            if lip >= 1.0:
                raise InadmissibleEpsilonError(
                    f"epsilon={eps}: inverse iteration not a contraction "
                    f"(Lipschitz constant {lip:.3f} >= 1)"
                )
            _check_splitting_survives(tmap)
        return tmap

    raise UnknownFamilyError(f"unknown family '{family}'")
