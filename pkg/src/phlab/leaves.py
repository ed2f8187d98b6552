"""Leaves, plaques, and the shooting solves that connect them.

All one-dimensional invariant objects here are integral curves of the unit
bundle fields: strong unstable and stable leaves follow e_uu and e_ss, and
center plaques follow e_c.  Short curves (plaques, stable fibers, local
projections) are integrated with a fixed-step RK4 on the field, batched
across many curves in lockstep.  Long strong leaves are grown by iterating
the map on a polyline seeded far in the past, with cubic midpoint insertion
to keep the node spacing inside [tol/4, tol]; this is self-correcting
because transverse errors contract relative to the stretch along the leaf.

Polylines carry lift coordinates (no mod-1 wrapping), so arclength and
signed distances never jump.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import splitting
from .errors import (
    BudgetExceededError,
    FrameFailureError,
    InvalidToleranceError,
    NoChainError,
    NoIntersectionError,
    NotOnPlaqueError,
)
from .torus import TorusMap, wrap

DEFAULT_BUDGET = 32          # power-iteration depth for field evaluation
DEFAULT_SHOOT_TOL = 1e-8
DEFAULT_SHOOT_CAP = 60
_SEED_HALF = 1e-6            # half-length of the straight seed for leaf growth
_MAX_GROW_STEPS = 200


# ---------------------------------------------------------------------------
# bundle fields
# ---------------------------------------------------------------------------

_FIELD_INDEX = {"uu": 0, "c": 1, "ss": 2}


def unit_field(tmap: TorusMap, which: str, pts, budget: int = DEFAULT_BUDGET):
    """Unit vectors of one bundle at an array of lift points.

    Orientation is canonical (fixed sign against the linear part's
    eigenframe), so the field is globally continuous for admissible maps.
    Only the orbit data required for the requested bundle is computed.
    """
    if which not in _FIELD_INDEX:
        raise ValueError(f"unknown field '{which}'")
    return splitting.compute_directions(tmap, wrap(pts), budget, need=(which,))[which]


def flow_field(tmap: TorusMap, which: str, starts, dists, *, step: float,
               budget: int = DEFAULT_BUDGET):
    """Flow each start point a signed arclength along a bundle field.

    starts: (B,3) lift coordinates, dists: (B,) signed arclengths.  One RK4
    pass moves every lane in lockstep with per-lane step dists/m, where m is
    set by the largest requested distance.  Returns (B,3) endpoints.
    """
    p = np.array(starts, dtype=float)
    d = np.asarray(dists, dtype=float)
    dmax = float(np.abs(d).max()) if d.size else 0.0
    if dmax == 0.0:
        return p
    m = max(1, int(math.ceil(dmax / step)))
    h = (d / m)[..., None]

    def f(q):
        return unit_field(tmap, which, q, budget)

    for _ in range(m):
        k1 = f(p)
        k2 = f(p + 0.5 * h * k1)
        k3 = f(p + 0.5 * h * k2)
        k4 = f(p + h * k3)
        p = p + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return p


# ---------------------------------------------------------------------------
# polylines
# ---------------------------------------------------------------------------

def _chord_arclength(nodes):
    seg = np.linalg.norm(np.diff(nodes, axis=0), axis=-1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_eval(nodes, arcl, s, derivative: bool = False):
    """Cubic (Catmull-Rom style) evaluation of a polyline at parameters s.

    Works on non-uniform parameters; end segments degrade to one-sided
    tangents.  s may be any array; values are clamped to the domain.
    """
    s = np.asarray(s, dtype=float)
    scl = np.clip(s, arcl[0], arcl[-1])
    idx = np.clip(np.searchsorted(arcl, scl, side="right") - 1, 0, len(arcl) - 2)
    i0 = np.maximum(idx - 1, 0)
    i3 = np.minimum(idx + 2, len(arcl) - 1)
    p0, p1, p2, p3 = nodes[i0], nodes[idx], nodes[idx + 1], nodes[i3]
    s0, s1, s2, s3 = arcl[i0], arcl[idx], arcl[idx + 1], arcl[i3]
    dt = s2 - s1
    u = ((scl - s1) / dt)[..., None]
    m1 = (p2 - p0) / np.where(s2 - s0 == 0.0, 1.0, s2 - s0)[..., None] * dt[..., None]
    m2 = (p3 - p1) / np.where(s3 - s1 == 0.0, 1.0, s3 - s1)[..., None] * dt[..., None]
    u2 = u * u
    u3 = u2 * u
    h00 = 2 * u3 - 3 * u2 + 1
    h10 = u3 - 2 * u2 + u
    h01 = -2 * u3 + 3 * u2
    h11 = u3 - u2
    val = h00 * p1 + h10 * m1 + h01 * p2 + h11 * m2
    if not derivative:
        return val
    d00 = (6 * u2 - 6 * u) / dt[..., None]
    d10 = (3 * u2 - 4 * u + 1) / dt[..., None]
    d01 = (-6 * u2 + 6 * u) / dt[..., None]
    d11 = (3 * u2 - 2 * u) / dt[..., None]
    der = d00 * p1 + d10 * m1 + d01 * p2 + d11 * m2
    return val, der


def locate_on_polyline(nodes, arcl, points, refine: int = 3):
    """Parameters of the nearest polyline points to the given lift points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d2 = ((pts[:, None, :] - nodes[None, :, :]) ** 2).sum(-1)
    s = arcl[np.argmin(d2, axis=1)].astype(float)
    for _ in range(refine):
        val, der = polyline_eval(nodes, arcl, s, derivative=True)
        dn = (der * der).sum(-1)
        s = np.clip(s + ((pts - val) * der).sum(-1) / np.where(dn == 0, 1, dn),
                    arcl[0], arcl[-1])
    return s


@dataclass(frozen=True)
class LeafSegment:
    """Adaptive polyline along a strong (uu or ss) leaf, in lift coords."""

    kind: str                # 'uu' | 'ss'
    base: np.ndarray         # lift of the seed point; arclength 0 is here
    nodes: np.ndarray        # (M,3)
    arclength: np.ndarray    # (M,) cumulative chord length, 0 at the base
    tol: float

    @property
    def radius_minus(self) -> float:
        return float(-self.arclength[0])

    @property
    def radius_plus(self) -> float:
        return float(self.arclength[-1])

    def point_at(self, s, derivative: bool = False):
        return polyline_eval(self.nodes, self.arclength, s, derivative)

    def locate(self, points):
        return locate_on_polyline(self.nodes, self.arclength, points)


@dataclass(frozen=True)
class CenterPlaque:
    """Center curve through `base`, parametrized by signed arclength.

    The parameter increases in the canonical +e_c direction; `orientation`
    records the sign relative to that global choice (always +1 here, kept
    for report symmetry).
    """

    base: np.ndarray
    nodes: np.ndarray
    params: np.ndarray
    tol: float
    orientation: int = 1

    @property
    def param_range(self):
        return float(self.params[0]), float(self.params[-1])

    def point_at(self, t, derivative: bool = False):
        return polyline_eval(self.nodes, self.params, t, derivative)

    def locate(self, points):
        return locate_on_polyline(self.nodes, self.params, points)


@dataclass(frozen=True)
class PathDecomposition:
    """Connecting path y -> x split into center, stable, and uu geodesics."""

    rho_c: float
    rho_s: float
    sigma1: np.ndarray       # polyline along the center plaque of y
    sigma2: np.ndarray       # polyline along the stable fiber
    sigma3: np.ndarray       # polyline along W^uu_loc(x)


# ---------------------------------------------------------------------------
# leaf growth by map iteration
# ---------------------------------------------------------------------------

def _refine_to_spacing(nodes, arcl, target):
    """Insert cubic midpoints until every gap is <= target."""
    while True:
        seg = np.linalg.norm(np.diff(nodes, axis=0), axis=-1)
        over = seg > target
        if not over.any():
            return nodes
        mids_s = 0.5 * (arcl[:-1][over] + arcl[1:][over])
        mids = polyline_eval(nodes, arcl, mids_s)
        order = np.argsort(np.concatenate([arcl, mids_s]), kind="stable")
        nodes = np.concatenate([nodes, mids])[order]
        arcl = _chord_arclength(nodes) + arcl[0]


def grow_leaf(tmap: TorusMap, x, radius: float, tol: float, kind: str,
              budget: int = DEFAULT_BUDGET) -> LeafSegment:
    """Grow W^uu(x, radius) or W^ss(x, radius) as an adaptive polyline.

    A tiny straight seed along the bundle direction is planted on the
    (backward for uu, forward for ss) orbit of x deep enough that iterating
    it back to x stretches it past `radius`; midpoint insertion keeps node
    spacing inside [tol/4, tol] throughout (map stretch bounds guarantee the
    lower end, so no merging pass is needed except at the trimmed ends).
    Node budget is guarded by radius <= 1e4*tol.
    """
    if kind not in ("uu", "ss"):
        raise ValueError("kind must be 'uu' or 'ss'")
    if tol <= 0 or radius <= 0:
        raise InvalidToleranceError("radius and tol must be positive")
    if radius > 1e4 * tol:
        raise BudgetExceededError(
            f"radius {radius} exceeds node budget guard 1e4*tol={1e4 * tol}"
        )
    x = np.asarray(x, dtype=float).reshape(3)
    step_map = tmap.apply_lift if kind == "uu" else tmap.inverse_lift
    back_map = tmap.apply_inverse if kind == "uu" else tmap.apply
    stretch = tmap.norm_sup() if kind == "uu" else tmap.norm_sup_inv()

    half = min(_SEED_HALF, tol / 4.0)
    rate_col = 0 if kind == "uu" else 2
    margin = 1.5
    trim_radius = radius + 6 * tol
    nodes = arcl = anchor = None
    for _attempt in range(5):
        # walk backward until the accumulated stretch along the bundle
        # suffices to blow the seed up past the radius on the way back; the
        # return trip then takes exactly n_back steps so the anchor lands
        # back on x
        need = (radius * margin + tol) / half
        anchor = wrap(x)
        prod = 1.0
        n_back = 0
        while prod < need:
            anchor = back_map(anchor)
            fb = splitting.bundle_frames(tmap, anchor[None, :], budget)
            r = float(fb.rates[0, rate_col])
            prod *= r if kind == "uu" else 1.0 / r
            n_back += 1
            if n_back > _MAX_GROW_STEPS:
                raise BudgetExceededError("seeding depth estimate diverged")
        direction = unit_field(tmap, kind, anchor[None, :], budget)[0]
        offs = np.linspace(-half, half, 5)[:, None]
        nodes = anchor[None, :] + offs * direction[None, :]

        for _ in range(n_back):
            arcl = _chord_arclength(nodes)
            nodes = _refine_to_spacing(nodes, arcl, tol / stretch)
            nodes = step_map(nodes)
            anchor = step_map(anchor)
            # renormalize the lift: integer translations commute with the
            # lift map, and without this the coordinates (and float error)
            # blow up exponentially with the iteration count
            shift = np.floor(anchor)
            nodes = nodes - shift
            anchor = anchor - shift
            arcl = _chord_arclength(nodes)
            s_anchor = float(locate_on_polyline(nodes, arcl, anchor[None, :])[0])
            arcl = arcl - s_anchor
            inside = (arcl >= -trim_radius) & (arcl <= trim_radius)
            nodes, arcl = nodes[inside], arcl[inside]
        if arcl[0] <= -radius and arcl[-1] >= radius:
            break
        margin *= 3.0  # local rate fluctuations beat the estimate; reseed deeper
    else:
        raise BudgetExceededError("leaf growth did not reach the radius")

    # the tracked anchor may have slid along the leaf by rounding; snap back
    # to the lift of x it shadows (the leaf passes through x transversally
    # to much higher accuracy than the slide)
    x_lift = wrap(x) + np.round(anchor - wrap(x))
    s_x = float(locate_on_polyline(nodes, arcl, x_lift[None, :])[0])
    arcl = arcl - s_x

    # exact trim to [-radius, radius] around x; repair the two cut gaps so
    # every spacing stays inside [tol/4, tol]
    interior = (arcl > -radius + tol / 4) & (arcl < radius - tol / 4)
    params = np.concatenate([[-radius], arcl[interior], [radius]])
    for end in (0, -1):
        nxt = 1 if end == 0 else -2
        gap = abs(params[nxt] - params[end])
        if gap > tol:
            params = np.insert(params, nxt if end == 0 else len(params) - 1,
                               0.5 * (params[end] + params[nxt]))
    out = polyline_eval(nodes, arcl, params)
    final_arcl = _chord_arclength(out)
    s0 = float(locate_on_polyline(out, final_arcl, x_lift[None, :])[0])
    return LeafSegment(
        kind=kind,
        base=polyline_eval(out, final_arcl, np.array([s0]))[0],
        nodes=out,
        arclength=final_arcl - s0,
        tol=tol,
    )


def grow_unstable_leaf(tmap: TorusMap, x, radius: float, tol: float,
                       budget: int = DEFAULT_BUDGET) -> LeafSegment:
    return grow_leaf(tmap, x, radius, tol, "uu", budget)


def grow_stable_local(tmap: TorusMap, x, eps0: float, tol: float,
                      budget: int = DEFAULT_BUDGET) -> LeafSegment:
    if tol > eps0:
        raise InvalidToleranceError(f"tol {tol} exceeds the local scale {eps0}")
    return grow_leaf(tmap, x, eps0, tol, "ss", budget)


def center_plaque(tmap: TorusMap, x, eps: float, tol: float,
                  budget: int = DEFAULT_BUDGET) -> CenterPlaque:
    """Center plaque through x, signed arclength in [-eps, eps].

    Integrates the unit e_c field with RK4 steps of size tol from the base
    outward in both directions simultaneously.
    """
    if tol <= 0 or eps <= 0:
        raise InvalidToleranceError("eps and tol must be positive")
    x = np.asarray(x, dtype=float).reshape(3)
    n = max(1, int(math.ceil(eps / tol)))
    h = eps / n
    pts = np.broadcast_to(x, (2, 3)).copy()
    sign = np.array([[-h], [h]])
    minus, plus = [], []

    def f(q):
        try:
            return unit_field(tmap, "c", q, budget)
        except Exception as exc:  # noqa: BLE001
            raise FrameFailureError(str(exc)) from exc

    for _ in range(n):
        k1 = f(pts)
        k2 = f(pts + 0.5 * sign * k1)
        k3 = f(pts + 0.5 * sign * k2)
        k4 = f(pts + sign * k3)
        pts = pts + (sign / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        minus.append(pts[0].copy())
        plus.append(pts[1].copy())

    nodes = np.array(minus[::-1] + [x] + plus)
    params = np.concatenate([-h * np.arange(n, 0, -1), [0.0], h * np.arange(1, n + 1)])
    return CenterPlaque(base=x.copy(), nodes=nodes, params=params, tol=tol)


# ---------------------------------------------------------------------------
# batched Gauss-Newton shooting
# ---------------------------------------------------------------------------

def gauss_newton(residual_jac, x0, *, tol: float = DEFAULT_SHOOT_TOL,
                 cap: int = DEFAULT_SHOOT_CAP, max_step: float = 0.02):
    """Damped Gauss-Newton over a batch of small problems.

    residual_jac(x) must return (r, J) with r: (B,3) and J: (B,3,k).  Steps
    are clipped to max_step per iteration, which is all the damping these
    well-conditioned transversal intersections need.  Returns (x, r,
    converged mask).
    """
    x = np.array(x0, dtype=float)
    for _ in range(cap):
        r, jac = residual_jac(x)
        jt = np.swapaxes(jac, -1, -2)
        lhs = jt @ jac
        rhs = jt @ r[..., :, None]
        try:
            step = np.linalg.solve(lhs, rhs)[..., 0]
        except np.linalg.LinAlgError as exc:
            raise NoIntersectionError("singular shooting system") from exc
        nrm = np.linalg.norm(step, axis=-1, keepdims=True)
        step = np.where(nrm > max_step, step * (max_step / np.maximum(nrm, 1e-300)), step)
        x = x - step
        if float(np.abs(step).max()) < tol * 1e-2:
            break
    r, _ = residual_jac(x)
    res_norm = np.linalg.norm(r, axis=-1)
    return x, r, res_norm <= tol


def project_to_cs_patch(tmap: TorusMap, base, targets, *, step: float,
                        budget: int = DEFAULT_BUDGET, init=None,
                        tol: float = DEFAULT_SHOOT_TOL, require: bool = True):
    """Coordinates (c, s) of target points over the cs-patch of `base`.

    The patch over a point b is swept by first flowing c along the center
    field and then s along the stable field.  Solved as a least-squares
    shooting problem per target; the leftover residual is the transverse
    (uu) mismatch and stays at coherence-error level for admissible maps.

    base: (3,) or (B,3) lift; targets: (B,3) lift.  Returns (c, s, resid).
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    b = np.broadcast_to(np.asarray(base, dtype=float), targets.shape).copy()
    x0 = np.zeros((targets.shape[0], 2)) if init is None else np.array(init, float)

    def residual_jac(cs):
        feet = flow_field(tmap, "c", b, cs[:, 0], step=step, budget=budget)
        pts = flow_field(tmap, "ss", feet, cs[:, 1], step=step, budget=budget)
        fb = splitting.bundle_frames(tmap, wrap(pts), budget)
        t_c = unit_field(tmap, "c", feet, budget)
        r = pts - targets
        jac = np.stack([t_c, fb.e_ss], axis=-1)
        return r, jac

    cs, r, ok = gauss_newton(residual_jac, x0, tol=tol)
    # the solution is a least-squares foot; transverse residual is expected
    resid = np.linalg.norm(r, axis=-1)
    tangential = np.abs(r)  # diagnostic only
    del tangential
    if require and not bool(ok.all()):
        # accept feet whose residual is purely transverse and tiny
        if float(resid.max()) > 50 * tol:
            raise NoIntersectionError(
                f"cs-patch projection residual {resid.max():.2e}"
            )
    return cs[:, 0], cs[:, 1], resid


def intersect_leaf_with_patch(tmap: TorusMap, leaf_nodes, leaf_arcl, patch_base,
                              a_init, *, step: float, budget: int = DEFAULT_BUDGET,
                              tol: float = DEFAULT_SHOOT_TOL):
    """Solve leaf(a) = patch(c, s): a 3x3 shooting per batch lane.

    leaf_nodes/arcl describe one polyline shared by all lanes unless given
    as lists; patch_base: (B,3) patch centers; a_init: (B,) initial leaf
    parameters.  Returns (a, c, s, converged).
    """
    patch_base = np.atleast_2d(np.asarray(patch_base, float))
    a0 = np.asarray(a_init, dtype=float)
    x0 = np.stack([a0, np.zeros_like(a0), np.zeros_like(a0)], axis=-1)

    def residual_jac(acs):
        feet = flow_field(tmap, "c", patch_base, acs[:, 1], step=step, budget=budget)
        pts = flow_field(tmap, "ss", feet, acs[:, 2], step=step, budget=budget)
        lf, lder = polyline_eval(leaf_nodes, leaf_arcl, acs[:, 0], derivative=True)
        fb = splitting.bundle_frames(tmap, wrap(pts), budget)
        t_c = unit_field(tmap, "c", feet, budget)
        r = pts - lf
        jac = np.stack([-lder, t_c, fb.e_ss], axis=-1)
        return r, jac

    acs, r, ok = gauss_newton(residual_jac, x0, tol=tol)
    return acs[:, 0], acs[:, 1], acs[:, 2], ok


# ---------------------------------------------------------------------------
# spec-level operations
# ---------------------------------------------------------------------------

def path_decompose(tmap: TorusMap, x, y, *, eps0: float = 0.05,
                   tol: float = 1e-3, budget: int = DEFAULT_BUDGET) -> PathDecomposition:
    """Unique center/stable/uu path from y to x at local scale.

    Finds (t, s, a) such that flowing t along the center plaque of y and s
    along the stable fiber lands on W^uu_loc(x) at leaf parameter a.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    y_in = np.asarray(y, dtype=float).reshape(3)
    from .torus import torus_distance, wrap_diff

    if float(torus_distance(x, y_in)) >= eps0 / 2:
        raise NoIntersectionError("points too far apart for a local path")
    y = x + wrap_diff(y_in - x)  # lift of y nearest to x

    leaf = grow_leaf(tmap, x, eps0, tol, "uu", budget)
    # re-express leaf around the lift of x we use here
    shift = np.asarray(x, float) - leaf.base
    nodes = leaf.nodes + shift
    a, c, s, ok = intersect_leaf_with_patch(
        tmap, nodes, leaf.arclength, y[None, :], np.zeros(1),
        step=tol, budget=budget,
    )
    if not bool(ok.all()):
        raise NoIntersectionError("shooting failed to connect the points")
    c0, s0, a0 = float(c[0]), float(s[0]), float(a[0])
    m = max(2, int(math.ceil(max(abs(c0), abs(s0), tol) / tol)) + 1)
    frac = np.linspace(0.0, 1.0, m)
    sig1 = flow_field(tmap, "c", np.repeat(y[None, :], m, axis=0), c0 * frac,
                      step=tol, budget=budget)
    foot = sig1[-1]
    sig2 = flow_field(tmap, "ss", np.repeat(foot[None, :], m, axis=0), s0 * frac,
                      step=tol, budget=budget)
    sig3_params = np.linspace(a0, 0.0, max(2, int(math.ceil(abs(a0) / tol)) + 1))
    sig3 = polyline_eval(nodes, leaf.arclength, sig3_params)
    return PathDecomposition(
        rho_c=abs(c0), rho_s=abs(s0), sigma1=sig1, sigma2=sig2, sigma3=sig3
    )


def signed_center_dist(plaque: CenterPlaque, a, b) -> float:
    """Signed center distance between two points resolved on the plaque."""
    pts = np.stack([np.asarray(a, float).reshape(3), np.asarray(b, float).reshape(3)])
    params = plaque.locate(pts)
    feet = plaque.point_at(params)
    off = np.linalg.norm(feet - pts, axis=-1)
    if float(off.max()) > 10 * plaque.tol:
        raise NotOnPlaqueError(f"point off plaque by {off.max():.2e}")
    return float((params[1] - params[0]) * plaque.orientation)


def holonomy_uu(tmap: TorusMap, source: CenterPlaque, leaf: LeafSegment,
                xprime, target_params, *, step: float = 1e-3,
                budget: int = DEFAULT_BUDGET):
    """Transport points of `source` to the center plaque at xprime.

    xprime must lie on `leaf` (the strong unstable leaf through the source
    base).  Each target rides its own strong unstable leaf until it meets
    the cs-patch over xprime, then drops along the stable fiber onto the
    center plaque there.  Returns (params at destination, points, residuals).
    """
    xprime = np.asarray(xprime, dtype=float).reshape(3)
    a_dest = float(leaf.locate(xprime[None, :])[0])
    if float(np.linalg.norm(leaf.point_at(np.array([a_dest]))[0] - xprime)) > 50 * leaf.tol:
        raise NoIntersectionError("xprime is not on the provided leaf")
    t_par = np.asarray(target_params, dtype=float)
    targets = source.point_at(t_par)
    radius = abs(a_dest) + 0.5
    out_params = np.empty(len(t_par))
    resids = np.empty(len(t_par))
    feet = np.empty((len(t_par), 3))
    for i, pt in enumerate(targets):
        tl = grow_leaf(tmap, pt, radius, leaf.tol, "uu", budget)
        shift = pt - tl.base
        a, c, s, ok = intersect_leaf_with_patch(
            tmap, tl.nodes + shift, tl.arclength, xprime[None, :],
            np.array([a_dest]), step=step, budget=budget,
        )
        if not bool(ok[0]):
            raise NoIntersectionError(f"target {i} missed the patch")
        out_params[i] = c[0]
        resids[i] = s[0]
        feet[i] = flow_field(tmap, "c", xprime[None, :], np.array([c[0]]),
                             step=step, budget=budget)[0]
    order_src = np.argsort(t_par)
    order_dst = np.argsort(out_params[order_src])
    if not (np.all(np.diff(order_dst) == 1) or np.all(np.diff(order_dst) == -1)):
        raise NoIntersectionError("holonomy images lost the source ordering")
    return out_params, feet, resids


def suus_relate(tmap: TorusMap, x, zprime, *, eps0: float = 0.05,
                step: float = 1e-3, budget: int = DEFAULT_BUDGET):
    """Partner of x on the center plaque of zprime through an s-u-s chain.

    Solves for (s1, a, c, s2): stable flow s1 from x, unstable flow a,
    landing on the stable fiber (offset s2) of the plaque point at parameter
    c.  One equation short of square, so the minimum-norm Gauss-Newton step
    picks the chain with the smallest stable legs, which is the natural
    deterministic witness.  Returns (point on plaque of zprime, c, chain).
    """
    x = np.asarray(x, dtype=float).reshape(3)
    zp = np.asarray(zprime, dtype=float).reshape(3)
    from .torus import torus_distance

    if float(torus_distance(wrap(x), wrap(zp))) >= eps0 / 2:
        raise NoChainError("base points too far apart")
    # work with the lift of zprime nearest to x
    from .torus import wrap_diff

    zp = x + wrap_diff(zp - x)
    state = np.zeros((1, 4))  # s1, a, c, s2

    def residual_jac(q):
        s1, a, c, s2 = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        x2 = flow_field(tmap, "ss", x[None, :], s1, step=step, budget=budget)
        x3 = flow_field(tmap, "uu", x2, a, step=step, budget=budget)
        feet = flow_field(tmap, "c", zp[None, :], c, step=step, budget=budget)
        pts = flow_field(tmap, "ss", feet, s2, step=step, budget=budget)
        fb3 = splitting.bundle_frames(tmap, wrap(x3), budget)
        fbp = splitting.bundle_frames(tmap, wrap(pts), budget)
        t_c = unit_field(tmap, "c", feet, budget)
        r = x3 - pts
        # first-order flow derivatives: transported bundle directions
        jac = np.stack([fb3.e_ss, fb3.e_uu, -t_c, -fbp.e_ss], axis=-1)
        return r, jac

    # least-norm Gauss-Newton via pseudo-inverse steps
    q = state
    for _ in range(DEFAULT_SHOOT_CAP):
        r, jac = residual_jac(q)
        step_q = np.linalg.pinv(jac) @ r[..., None]
        q = q - step_q[..., 0]
        if float(np.abs(step_q).max()) < 1e-12:
            break
    r, _ = residual_jac(q)
    if float(np.linalg.norm(r, axis=-1).max()) > 100 * DEFAULT_SHOOT_TOL:
        raise NoChainError(f"s-u-s chain residual {np.linalg.norm(r):.2e}")
    c = float(q[0, 2])
    xprime_pt = flow_field(tmap, "c", zp[None, :], np.array([c]), step=step,
                           budget=budget)[0]
    chain = {"s1": float(q[0, 0]), "a": float(q[0, 1]), "c": c, "s2": float(q[0, 3])}
    return xprime_pt, c, chain
