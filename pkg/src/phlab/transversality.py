"""Brushes, sides, hexagonal loops, and the even-spacing drift construction.

The hexagonal-loop search looks for places where the strong unstable leaf
returns close to itself.  Because the leaf direction field is nearly
constant, such close encounters are rare recurrences rather than transversal
crossings; they are detected on a coarse leaf with a periodic KD-tree and
then re-measured on finely regrown strands.  The crossing certificate is the
sign change of phi(t), the signed center offset of one strand over the other
after projecting along stable fibers.

The drift step transports a nearly-evenly-spaced chain of points along the
leaf to the far strand of a loop, inserts one more point at the crossing
parameter, and restores the working scale by iterating the map.  Transport
over long leaf distances is done by pulling the whole configuration back
with the map until the distance contracts to order one, solving there, and
pushing the feet forward again; center components of numerical errors
round-trip harmlessly, unlike stable components, which never enter the
measured quantities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from . import splitting
from .errors import (
    NoCrossingError,
    NoIntersectionError,
    OnBrushError,
    PairingLostError,
    RatioBlowupError,
    SearchBudgetError,
    StepBudgetError,
)
from .leaves import (
    CenterPlaque,
    LeafSegment,
    center_plaque,
    flow_field,
    gauss_newton,
    grow_leaf,
    locate_on_polyline,
    polyline_eval,
    project_to_cs_patch,
    unit_field,
)
from .torus import TorusMap, wrap, wrap_diff

DEFAULT_BUDGET = 28
_FLOW_STEP = 5e-3
_SEED_HALF = 1e-6


# ---------------------------------------------------------------------------
# brushes and sides
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Brush:
    """Union of local stable fibers over the local strong unstable leaf."""

    base: np.ndarray
    spine: LeafSegment
    bristle_roots: np.ndarray     # (B,3) spine nodes
    bristles: np.ndarray          # (B, M, 3) stable fibers through the roots
    bristle_params: np.ndarray    # (M,) signed arclengths along each fiber
    eps0: float


def build_brush(tmap: TorusMap, x, eps0: float, *, tol: float = 1e-3,
                budget: int = DEFAULT_BUDGET) -> Brush:
    """Brush through x: stable fibers of length eps0 at every spine node."""
    spine = grow_leaf(tmap, x, eps0, tol, "uu", budget)
    roots = spine.nodes
    m = max(2, int(math.ceil(eps0 / tol)))
    params = np.linspace(-eps0, eps0, 2 * m + 1)
    fibers = np.empty((len(roots), len(params), 3))
    # integrate all fibers in lockstep, one signed arclength at a time
    # moving outward from the roots
    fibers[:, m] = roots
    h = eps0 / m
    up = roots.copy()
    dn = roots.copy()
    for k in range(1, m + 1):
        both = np.concatenate([up, dn])
        dist = np.concatenate([np.full(len(up), h), np.full(len(dn), -h)])
        both = flow_field(tmap, "ss", both, dist, step=_FLOW_STEP, budget=budget)
        up, dn = both[: len(up)], both[len(up):]
        fibers[:, m + k] = up
        fibers[:, m - k] = dn
    return Brush(
        base=spine.base,
        spine=spine,
        bristle_roots=roots,
        bristles=fibers,
        bristle_params=params,
        eps0=eps0,
    )


def side_of(tmap: TorusMap, brush: Brush, y, *, budget: int = DEFAULT_BUDGET) -> int:
    """Which side of the brush a nearby point lies on (+1 or -1).

    The sign is the center component, in the canonical orientation, of the
    offset from the nearest point of the brush surface (reached through a
    stable-unstable chain).  Raises OnBrushError when the offset is below
    1e-9.
    """
    y = np.asarray(y, dtype=float).reshape(3)
    y_lift = brush.base + wrap_diff(y - brush.base)
    spine = brush.spine

    def residual_jac(us):
        feet = polyline_eval(spine.nodes, spine.arclength, us[:, 0])
        pts = flow_field(tmap, "ss", feet, us[:, 1], step=_FLOW_STEP, budget=budget)
        d = splitting.compute_directions(tmap, wrap(pts), budget, need=("uu", "ss"))
        _, der = polyline_eval(spine.nodes, spine.arclength, us[:, 0], derivative=True)
        r = pts - y_lift[None, :]
        jac = np.stack([der, d["ss"]], axis=-1)
        return r, jac

    s0 = float(spine.locate(y_lift[None, :])[0])
    us, r, _ = gauss_newton(residual_jac, np.array([[s0, 0.0]]), tol=1e-10)
    foot = polyline_eval(spine.nodes, spine.arclength, us[:, 0])
    foot = flow_field(tmap, "ss", foot, us[:, 1], step=_FLOW_STEP, budget=budget)
    fb = splitting.bundle_frames(tmap, wrap(foot), budget)
    frame = np.stack([fb.e_uu[0], fb.e_c[0], fb.e_ss[0]], axis=-1)
    coords = np.linalg.solve(frame, (y_lift - foot[0]))
    offset = float(coords[1])
    if abs(offset) < 1e-9:
        raise OnBrushError(f"center offset {offset:.2e} below resolution")
    return 1 if offset > 0 else -1


def integrability_defect(tmap: TorusMap, x, len_u: float, len_s: float, *,
                         budget: int = DEFAULT_BUDGET, step: float = 1e-3) -> float:
    """Signed center offset after a u, s, -u, -s loop of the given sides.

    Vanishes exactly when the uu and ss fields integrate jointly (linear
    maps); its size measures the non-integrability of their span.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    p = x[None, :]
    for which, dist in (("uu", len_u), ("ss", len_s), ("uu", -len_u), ("ss", -len_s)):
        p = flow_field(tmap, which, p, np.array([dist]), step=step, budget=budget)
    fb = splitting.bundle_frames(tmap, wrap(x), budget)
    frame = np.stack([fb.e_uu[0], fb.e_c[0], fb.e_ss[0]], axis=-1)
    coords = np.linalg.solve(frame, p[0] - x)
    return float(coords[1])


# ---------------------------------------------------------------------------
# paired strands and phi profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Strand:
    """Finely resolved window of the strong unstable leaf, in lift coords."""

    nodes: np.ndarray
    arcs: np.ndarray

    def at(self, s, derivative: bool = False):
        return polyline_eval(self.nodes, self.arcs, s, derivative)


@dataclass(frozen=True)
class PhiProfile:
    t: np.ndarray            # sample parameters (arclength along strand 1)
    phi: np.ndarray          # signed center offsets
    s_off: np.ndarray        # stable components of the pairing
    a2: np.ndarray           # matched parameters on strand 2
    pair_dist: np.ndarray
    converged: np.ndarray


@dataclass(frozen=True)
class HexLoop:
    """Certified crossing of two tau-close strands of one unstable leaf.

    gamma/gamma_prime sample the paired windows; phi changes sign with
    margin chi inside the window, which is the s-transversality witness.
    The coarse search leaf is kept as the spine so that chains can be
    transported to the far strand by local hops along it.
    """

    base: np.ndarray
    tau: float
    chi: float
    t_minus: float
    t_plus: float
    t: np.ndarray
    phi: np.ndarray
    s_off: np.ndarray
    pair_dist: np.ndarray
    gamma: np.ndarray
    gamma_prime: np.ndarray
    spine_arcs: tuple          # encounter arclengths (a1, a2) on the search leaf
    strand1: Strand
    strand2: Strand
    strand2_sign: float        # relative orientation of the two strands
    a2_of_t: np.ndarray        # matched strand-2 parameters at the samples
    spine: Strand              # the coarse search leaf through the base
    strand1_anchor: np.ndarray  # exact on-leaf lift at strand-1 parameter 0
    strand2_anchor: np.ndarray  # exact on-leaf lift at strand-2 parameter 0


def pair_strands(tmap: TorusMap, strand1: Strand, strand2: Strand, t_samples,
                 a2_init, *, budget: int = DEFAULT_BUDGET, tol: float = 1e-9,
                 strict: bool = True):
    """Project strand2 onto the cs-patches over strand1 points.

    For each sample parameter t, solves strand2(a) = patch_{strand1(t)}(c, s).
    phi(t) = c is the signed center offset, s the stable leg, and the pair
    distance is |(c, s)|.
    """
    t_samples = np.asarray(t_samples, dtype=float)
    g1 = strand1.at(t_samples)

    def residual_jac(acs):
        feet = flow_field(tmap, "c", g1, acs[:, 1], step=_FLOW_STEP, budget=budget)
        pts = flow_field(tmap, "ss", feet, acs[:, 2], step=_FLOW_STEP, budget=budget)
        lf2, ld2 = strand2.at(acs[:, 0], derivative=True)
        dd = splitting.compute_directions(tmap, wrap(pts), budget, need=("ss",))
        t_c = unit_field(tmap, "c", feet, budget)
        return pts - lf2, np.stack([-ld2, t_c, dd["ss"]], axis=-1)

    x0 = np.stack([np.asarray(a2_init, float),
                   np.zeros_like(t_samples), np.zeros_like(t_samples)], axis=-1)
    acs, r, ok = gauss_newton(residual_jac, x0, tol=tol, max_step=0.1)
    phi, s_off, a2 = acs[:, 1], acs[:, 2], acs[:, 0]
    if strict and not bool(ok.all()):
        bad = int((~ok).sum())
        raise PairingLostError(f"{bad}/{len(ok)} pairing solves missed")
    return PhiProfile(
        t=t_samples,
        phi=phi,
        s_off=s_off,
        a2=a2,
        pair_dist=np.hypot(phi, s_off),
        converged=ok,
    )


def phi_profile(tmap: TorusMap, strand1: Strand, strand2: Strand,
                samples: int, *, sign: float = 1.0,
                budget: int = DEFAULT_BUDGET) -> PhiProfile:
    """Sampled phi over the full overlap of two paired strands."""
    lo = max(strand1.arcs[0], -abs(strand2.arcs[0]))
    hi = min(strand1.arcs[-1], abs(strand2.arcs[-1]))
    ts = np.linspace(lo + 1e-9, hi - 1e-9, samples)
    return pair_strands(tmap, strand1, strand2, ts, sign * ts, budget=budget)


# ---------------------------------------------------------------------------
# hex loop search
# ---------------------------------------------------------------------------

def _encounter_events(leaf: LeafSegment, radius: float, min_sep: float):
    """Close self-encounters of a leaf polyline, one representative each.

    Returns a list of (i, j, dist) node-index pairs ordered by how far along
    the leaf the encounter sits (earliest, then closest, first).
    """
    wnodes = leaf.nodes % 1.0
    tree = cKDTree(wnodes, boxsize=1.0)
    pairs = tree.query_pairs(r=radius, output_type="ndarray")
    if len(pairs) == 0:
        return []
    arcs = leaf.arclength
    sep = np.abs(arcs[pairs[:, 0]] - arcs[pairs[:, 1]])
    pairs = pairs[sep > min_sep]
    if len(pairs) == 0:
        return []
    d = np.linalg.norm(wrap_diff(wnodes[pairs[:, 0]] - wnodes[pairs[:, 1]]), axis=1)
    a1 = arcs[pairs[:, 0]]
    a2 = arcs[pairs[:, 1]]
    order = np.lexsort((a2, a1))
    pairs, d, a1, a2 = pairs[order], d[order], a1[order], a2[order]
    # merge pairs into encounter events by arclength proximity on both
    # strands; one long tracking plateau must become a single event
    merge = 1.0
    events, cur = [], [0]
    for k in range(1, len(pairs)):
        prev = cur[-1]
        if (a1[k] - a1[prev]) <= merge and abs(a2[k] - a2[prev]) <= 2 * merge:
            cur.append(k)
        else:
            events.append(cur)
            cur = [k]
    events.append(cur)
    # a plateau can also appear as several runs in lexsort order; merge
    # events whose strand windows overlap
    reps = []
    for c in events:
        k = c[int(np.argmin(d[c]))]
        reps.append([float(a1[c].min()), float(a1[c].max()),
                     float(a2[c].min()), float(a2[c].max()),
                     int(pairs[k, 0]), int(pairs[k, 1]), float(d[k])])
    merged = []
    for r in sorted(reps, key=lambda e: (e[0], e[2])):
        for m in merged:
            if not (r[1] < m[0] - merge or r[0] > m[1] + merge
                    or r[3] < m[2] - merge or r[2] > m[3] + merge):
                m[0] = min(m[0], r[0])
                m[1] = max(m[1], r[1])
                m[2] = min(m[2], r[2])
                m[3] = max(m[3], r[3])
                if r[6] < m[6]:
                    m[4], m[5], m[6] = r[4], r[5], r[6]
                break
        else:
            merged.append(r)
    out = [(m[4], m[5], m[6]) for m in merged]
    out.sort(key=lambda e: (max(abs(arcs[e[0]]), abs(arcs[e[1]])),
                            arcs[e[0]], arcs[e[1]]))
    return out


def fine_strand(tmap: TorusMap, anchor_lift, half: float, *, tol: float = 2e-4,
                budget: int = DEFAULT_BUDGET) -> Strand:
    """Regrow the leaf around an exact on-leaf point at fine resolution."""
    anchor_lift = np.asarray(anchor_lift, dtype=float).reshape(3)
    lf = grow_leaf(tmap, wrap(anchor_lift), half, tol, "uu", budget)
    return Strand(nodes=lf.nodes + (anchor_lift - lf.base), arcs=lf.arclength)


def find_hex_loop(tmap: TorusMap, x, radius: float, tau: float, *,
                  chi_min: float = 1e-4, samples: int = 256,
                  window_half: float = 2.0, max_candidates: int = 64,
                  eps0: float = 0.05, budget: int = DEFAULT_BUDGET,
                  fine_tol: float = 1e-3):
    """Search W^uu(x, radius) for a hexagonal-loop crossing at scale tau.

    Grows the leaf in stages, enumerates close encounters of the leaf with
    itself, re-measures each candidate window on finely regrown strands, and
    returns the first window whose phi profile changes sign with margin at
    least chi_min while the strands stay tau-close.  Returns None when the
    full search finds no loop (the integrable case); raises
    SearchBudgetError when the candidate cap is hit first.
    """
    if tau <= 0 or tau > eps0 / 10:
        raise ValueError(f"tau must lie in (0, eps0/10] = (0, {eps0 / 10}]")
    x = np.asarray(x, dtype=float).reshape(3)
    examined = 0
    seen = set()
    stages = [r for r in (radius / 4, radius / 2, radius) if r >= 10] or [radius]
    for stage_r in stages:
        tol_search = max(stage_r / 1e4, 2e-3)
        leaf = grow_leaf(tmap, x, stage_r, tol_search, "uu", budget)
        detect = tau + 2 * tol_search
        events = _encounter_events(leaf, detect, max(10 * tau, 0.5))
        for (i, j, d0) in events:
            key = (round(leaf.arclength[i], 1), round(leaf.arclength[j], 1))
            if key in seen:
                continue
            seen.add(key)
            # distance prefilter on the coarse geometry costs microseconds
            if _coarse_min_dist(leaf, i, j, window_half) > tau:
                continue
            if examined >= max_candidates:
                raise SearchBudgetError(
                    f"{examined} candidates probed without a verdict"
                )
            examined += 1
            if not _screen_candidate(tmap, leaf, i, j, tau, chi_min,
                                     window_half, budget):
                continue
            loop = _probe_candidate(
                tmap, leaf, i, j, tau, chi_min, samples, window_half,
                budget, fine_tol,
            )
            if loop is not None:
                return loop
    return None


def _window_strands(leaf, i, j, window_half):
    """Coarse strand views of the two encounter windows, in one lift chart."""
    arcs = leaf.arclength
    p1, p2 = leaf.nodes[i], leaf.nodes[j]
    off = (p2 - p1) - wrap_diff(p2 - p1)
    m1 = (arcs >= arcs[i] - window_half - 0.3) & (arcs <= arcs[i] + window_half + 0.3)
    m2 = (arcs >= arcs[j] - window_half - 0.8) & (arcs <= arcs[j] + window_half + 0.8)
    s1 = Strand(nodes=leaf.nodes[m1], arcs=arcs[m1] - arcs[i])
    s2 = Strand(nodes=leaf.nodes[m2] - off, arcs=arcs[m2] - arcs[j])
    return s1, s2


def _screen_candidate(tmap, leaf, i, j, tau, chi_min, window_half, budget):
    """Coarse phi profile on the search-leaf geometry.

    The coarse polyline is accurate to ~1e-5, well below the loop margins of
    interest, so a missing sign change here is decisive; the margin test is
    applied with slack and confirmed later on fine strands.
    """
    s1, s2 = _window_strands(leaf, i, j, window_half)
    t1 = s1.at(np.array([0.0]), True)[1][0]
    t2 = s2.at(np.array([0.0]), True)[1][0]
    sgn = 1.0 if float(t1 @ t2) > 0 else -1.0
    lo = max(s1.arcs[0] + 1e-6, -window_half)
    hi = min(s1.arcs[-1] - 1e-6, window_half)
    ts = np.linspace(lo, hi, 32)
    try:
        prof = pair_strands(tmap, s1, s2, ts, sgn * ts, budget=max(20, budget - 8),
                            tol=1e-7, strict=False)
    except (NoIntersectionError, PairingLostError):
        return False
    good = prof.converged
    if good.sum() < 8:
        return False
    sub = PhiProfile(t=prof.t[good], phi=prof.phi[good], s_off=prof.s_off[good],
                     a2=prof.a2[good], pair_dist=prof.pair_dist[good],
                     converged=prof.converged[good])
    return _crossing_window(sub, tau, chi_min / 2) is not None


def _coarse_min_dist(leaf, i, j, window_half):
    """Cheap lower-fidelity minimum distance between two leaf windows."""
    arcs = leaf.arclength
    p1, p2 = leaf.nodes[i], leaf.nodes[j]
    off = (p2 - p1) - wrap_diff(p2 - p1)
    s1 = np.linspace(max(arcs[0], arcs[i] - window_half),
                     min(arcs[-1], arcs[i] + window_half), 160)
    a = polyline_eval(leaf.nodes, arcs, s1)
    lo = max(arcs[0], arcs[j] - window_half - 0.5)
    hi = min(arcs[-1], arcs[j] + window_half + 0.5)
    s2 = np.linspace(lo, hi, 220)
    b = polyline_eval(leaf.nodes, arcs, s2) - off
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(np.sqrt(d2.min()))


def _probe_candidate(tmap, leaf, i, j, tau, chi_min, samples, window_half,
                     budget, fine_tol):
    p1 = leaf.nodes[i]
    p2 = leaf.nodes[j]
    off = (p2 - p1) - wrap_diff(p2 - p1)
    # reject on the coarse geometry before paying for fine strands; the
    # coarse polyline is accurate to well below tau
    if _coarse_min_dist(leaf, i, j, window_half) > tau:
        return None
    try:
        s1 = fine_strand(tmap, p1, window_half, tol=fine_tol, budget=budget)
        s2_raw = fine_strand(tmap, p2, window_half + 0.8, tol=fine_tol, budget=budget)
    except Exception:  # noqa: BLE001 - a failed regrow just skips the candidate
        return None
    s2 = Strand(nodes=s2_raw.nodes - off, arcs=s2_raw.arcs)
    t1 = s1.at(np.array([0.0]), True)[1][0]
    t2 = s2.at(np.array([0.0]), True)[1][0]
    sgn = 1.0 if float(t1 @ t2) > 0 else -1.0

    coarse = max(24, samples // 4)
    ts = np.linspace(s1.arcs[0] + 1e-9, s1.arcs[-1] - 1e-9, coarse)
    try:
        prof = pair_strands(tmap, s1, s2, ts, sgn * ts, budget=budget,
                            strict=False)
    except NoIntersectionError:
        return None
    prof = _mask_unconverged(prof)
    win = _crossing_window(prof, tau, chi_min)
    if win is None:
        return None
    lo, hi = win
    ts2 = np.linspace(prof.t[lo], prof.t[hi], samples)
    a2_init = np.interp(ts2, prof.t, prof.a2)
    try:
        fine = pair_strands(tmap, s1, s2, ts2, a2_init, budget=budget,
                            strict=False)
    except NoIntersectionError:
        return None
    fine = _mask_unconverged(fine)
    win2 = _crossing_window(fine, tau, chi_min)
    if win2 is None:
        return None
    lo2, hi2 = win2
    sl = slice(lo2, hi2 + 1)
    phi = fine.phi[sl]
    t = fine.t[sl]
    chi = min(float(phi.max()), float(-phi.min())) * (1.0 - 1e-9)
    return HexLoop(
        base=leaf.base,
        tau=tau,
        chi=chi,
        t_minus=float(t[np.argmin(phi)]),
        t_plus=float(t[np.argmax(phi)]),
        t=t,
        phi=phi,
        s_off=fine.s_off[sl],
        pair_dist=fine.pair_dist[sl],
        gamma=s1.at(t),
        gamma_prime=s2.at(fine.a2[sl]),
        spine_arcs=(float(leaf.arclength[i]), float(leaf.arclength[j])),
        strand1=s1,
        strand2=s2,
        strand2_sign=sgn,
        a2_of_t=fine.a2[sl],
        spine=Strand(nodes=leaf.nodes, arcs=leaf.arclength),
        strand1_anchor=p1.copy(),
        strand2_anchor=p2.copy(),
    )


def _mask_unconverged(prof: PhiProfile) -> PhiProfile:
    """Stray pairing lanes become window breaks instead of aborting."""
    if bool(prof.converged.all()):
        return prof
    pd = prof.pair_dist.copy()
    pd[~prof.converged] = np.inf
    return PhiProfile(t=prof.t, phi=prof.phi, s_off=prof.s_off, a2=prof.a2,
                      pair_dist=pd, converged=prof.converged)


def _crossing_window(prof: PhiProfile, tau: float, chi_min: float):
    """Largest contiguous tau-close sample window with a phi sign change."""
    close = prof.pair_dist < tau
    best = None
    k = 0
    n = len(close)
    while k < n:
        if not close[k]:
            k += 1
            continue
        m = k
        while m + 1 < n and close[m + 1]:
            m += 1
        phi = prof.phi[k:m + 1]
        if phi.size >= 3 and phi.min() < 0.0 < phi.max():
            chi = min(float(phi.max()), float(-phi.min()))
            if chi >= chi_min and (best is None or chi > best[0]):
                best = (chi, k, m)
        k = m + 1
    if best is None:
        return None
    return best[1], best[2]


def revalidate_loop(tmap: TorusMap, loop: HexLoop, *, oversample: int = 2,
                    budget: int = DEFAULT_BUDGET) -> bool:
    """Re-measure phi at doubled sampling; the sign pattern must persist."""
    span = loop.t[-1] - loop.t[0]
    ts = np.linspace(loop.t[0] + 1e-3 * span, loop.t[-1] - 1e-3 * span,
                     oversample * len(loop.t))
    a2 = np.interp(ts, loop.t, loop.a2_of_t)
    prof = pair_strands(tmap, loop.strand1, loop.strand2, ts, a2,
                        budget=budget, strict=False)
    good = prof.converged
    if float(good.mean()) < 0.99:
        return False
    if not (prof.pair_dist[good] < loop.tau).all():
        return False
    phi = prof.phi[good]
    chi = min(float(phi.max()), float(-phi.min()))
    return chi >= 0.9 * loop.chi and phi.min() < 0.0 < phi.max()


# ---------------------------------------------------------------------------
# evenly spaced chains via the drift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvenSpacedChain:
    """N+1 nearly-evenly-spaced points on one center plaque.

    points[-1] is the base (parameter 0); params are signed center
    arclengths in the canonical orientation.
    """

    n: int
    points: np.ndarray          # (n+1, 3) lift coordinates, base last
    params: np.ndarray          # (n+1,)
    base_diam: float
    max_ratio_error: float
    eps: float

    @property
    def base(self):
        return self.points[-1]


def trivial_chain(x) -> EvenSpacedChain:
    x = np.asarray(x, dtype=float).reshape(3)
    return EvenSpacedChain(
        n=0,
        points=x[None, :].copy(),
        params=np.zeros(1),
        base_diam=0.0,
        max_ratio_error=0.0,
        eps=0.0,
    )


def measure_chain(tmap: TorusMap, points, *, budget: int = DEFAULT_BUDGET,
                  tol: float = None):
    """Center parameters of chain points on a fresh plaque at the last point.

    Returns (params, plaque).  The plaque is grown just large enough to
    contain every point.
    """
    points = np.asarray(points, dtype=float)
    base = points[-1]
    chord = np.linalg.norm(points - base, axis=1)
    extent = max(float(chord.max()) * 1.3, 1e-6)
    if tol is None:
        tol = max(extent / 32.0, 1e-6)
    plq = center_plaque(tmap, base, eps=extent, tol=tol, budget=budget)
    params = plq.locate(points)
    feet = plq.point_at(params)
    worst = float(np.linalg.norm(feet - points, axis=1).max())
    if worst > 40 * tol:
        raise NoIntersectionError(f"chain point off its plaque by {worst:.2e}")
    return params, plq


def ratio_errors(params):
    """Deviation of (p_i - p_0) from i * (p_1 - p_0), relative."""
    params = np.asarray(params, dtype=float)
    base_gap = params[1] - params[0]
    if base_gap == 0.0:
        return np.full(len(params) - 1, np.inf)
    idx = np.arange(1, len(params))
    return np.abs((params[idx] - params[0]) / (idx * base_gap) - 1.0)


def _pullback_chain(tmap, chain: EvenSpacedChain, steps: int,
                    budget: int = DEFAULT_BUDGET) -> EvenSpacedChain:
    """Contract a chain with backward iteration, in small batches.

    Backward steps amplify the stable component of numerical noise five-fold
    each, so after every few steps the points are re-seated exactly on the
    measured center plaque at their measured parameters.
    """
    pts = wrap(chain.points)
    params = chain.params
    remaining = steps
    while remaining > 0:
        batch = min(4, remaining)
        remaining -= batch
        for _ in range(batch):
            pts = tmap.apply_inverse(pts)
        base = pts[-1]
        lifts = base + wrap_diff(pts - base)
        params, plq = measure_chain(tmap, lifts, budget=budget)
        pts = wrap(plq.point_at(params))
    base = pts[-1]
    lifts = base + wrap_diff(pts - base)
    diam = float(params.max() - params.min()) if len(params) > 1 else 0.0
    return replace(chain, points=plq.point_at(params), params=params,
                   base_diam=diam)


def drift_step(tmap: TorusMap, chain: EvenSpacedChain, loop: HexLoop,
               delta: float, eps: float, *, budget: int = DEFAULT_BUDGET,
               t_samples: int = 48) -> EvenSpacedChain:
    """One induction step: N+1 points -> N+2 points at scale eps.

    The chain is transported along the leaf to the far strand of the loop,
    the crossing parameter t0 where phi matches the transported top gap is
    located, the whole configuration is projected onto the center plaque at
    gamma(t0), and the new chain is iterated forward until its diameter lies
    in [eps/|Df|, eps].
    """
    if loop is None:
        raise NoCrossingError("no hexagonal loop available at the base")
    base = chain.points[-1]
    if np.linalg.norm(wrap_diff(wrap(base) - wrap(loop.base))) > 1e-7:
        raise ValueError("loop base does not match the chain base")
    if chain.n >= 1 and chain.base_diam >= loop.chi:
        raise ValueError(
            f"chain diameter {chain.base_diam:.2e} not below chi {loop.chi:.2e}"
        )

    transport = _TransportContext(tmap, chain, loop, budget)

    # the crossing condition compares parameters measured directly on the
    # plaques at gamma(t): with r_i(t) the projected parameter of the
    # transported x_i, the new point gamma(t0) extends the progression when
    # r_{N-1} = 2 r_N (for N = 0: when r_0 hits chi/2); measuring both sides
    # on the same plaque cancels the off-leaf bias of the reference strands
    def crossing_fn(ts_arr):
        if chain.n >= 1:
            r = transport.projected_params(loop, ts_arr, [chain.n - 1, chain.n])
            return r[0] - 2.0 * r[1]
        r = transport.projected_params(loop, ts_arr, [0])
        return r[0] - loop.chi / 2.0

    ts = loop.t if len(loop.t) <= t_samples else \
        np.linspace(loop.t[0], loop.t[-1], t_samples)
    g = crossing_fn(ts)
    cross = np.nonzero(np.diff(np.sign(g)) != 0)[0]
    if len(cross) == 0:
        raise NoCrossingError("phi never meets the transported spacing")
    k = int(cross[0])
    t_lo, t_hi = float(ts[k], ), float(ts[k + 1])
    gl, gh = abs(float(g[k])), abs(float(g[k + 1]))
    # refine: the matching must be exact to a fraction of the working
    # spacings, far below the coarse sample resolution
    for _ in range(2):
        ts_r = np.linspace(t_lo, t_hi, 17)
        g_r = crossing_fn(ts_r)
        cr = np.nonzero(np.diff(np.sign(g_r)) != 0)[0]
        if len(cr) == 0:
            break
        kk = int(cr[0])
        t_lo, t_hi = float(ts_r[kk]), float(ts_r[kk + 1])
        gl, gh = abs(float(g_r[kk])), abs(float(g_r[kk + 1]))
    w = gl / (gl + gh + 1e-300)
    t0 = float(t_lo * (1 - w) + t_hi * w)

    # project the whole transported configuration onto P^c(gamma(t0))
    r_all = transport.projected_params(loop, np.array([t0]),
                                       list(range(chain.n + 1)))[:, 0]
    g_t0 = loop.strand1.at(np.array([t0]))[0]
    new_params = np.concatenate([r_all, [0.0]])
    if np.any(np.diff(np.sign(np.diff(new_params))) != 0):
        raise RatioBlowupError("projected chain lost its ordering")
    new_pts = np.concatenate([
        flow_field(tmap, "c", np.repeat(g_t0[None, :], len(r_all), axis=0),
                   r_all, step=_FLOW_STEP, budget=budget),
        g_t0[None, :],
    ])

    # iterate forward until the diameter lies in [eps/|Df|, eps]
    norm_df = tmap.norm_sup()
    cur = new_pts
    diam = float(np.max(np.linalg.norm(cur[:, None, :] - cur[None, :, :], axis=-1)))
    for _ in range(400):
        if diam >= eps / norm_df:
            break
        nxt = tmap.apply_lift(cur)
        cur = nxt - np.floor(nxt[-1])
        diam = float(np.max(np.linalg.norm(cur[:, None, :] - cur[None, :, :],
                                           axis=-1)))
    else:
        raise StepBudgetError("forward iteration did not reach the scale")
    if diam > eps:
        raise NoCrossingError(f"diameter {diam:.2e} overshot eps={eps}")

    params, _ = measure_chain(tmap, cur, budget=budget)
    errs = ratio_errors(params)
    max_err = float(errs.max()) if len(errs) else 0.0
    if max_err > delta:
        raise RatioBlowupError(f"ratio error {max_err:.3f} exceeds delta={delta}")
    return EvenSpacedChain(
        n=chain.n + 1,
        points=cur,
        params=params,
        base_diam=float(params.max() - params.min()),
        max_ratio_error=max_err,
        eps=eps,
    )


def _grow_cluster_leaves(tmap: TorusMap, seeds, radius: float, tol: float,
                         budget: int):
    """Strong unstable leaves through a tight cluster of seeds, in lockstep.

    All seeds must lie within a tiny ball (one wrap chart); the leaves are
    grown together so the expensive per-step array work is shared.  Returns
    a list of Strand objects, one per seed, in the seeds' lift chart.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    nb = len(seeds)
    half = min(_SEED_HALF, tol / 4.0)
    need = (radius * 1.5 + tol) / half
    anchors = wrap(seeds)
    prod = 1.0
    n_back = 0
    while prod < need:
        anchors = tmap.apply_inverse(anchors)
        fb = splitting.bundle_frames(tmap, anchors[:1], budget)
        prod *= float(fb.rates[0, 0])
        n_back += 1
        if n_back > 150:
            raise StepBudgetError("cluster seeding depth diverged")
    dirs = unit_field(tmap, "uu", anchors, budget)
    offs = np.linspace(-half, half, 5)
    nodes = anchors[:, None, :] + offs[None, :, None] * dirs[:, None, :]

    stretch = tmap.norm_sup()
    trim_radius = radius + 6 * tol
    for _ in range(n_back):
        seg = np.linalg.norm(np.diff(nodes, axis=1), axis=-1)
        over = (seg > tol / stretch).any(axis=0)
        if over.any():
            keep = []
            arcs = np.concatenate(
                [np.zeros((nb, 1)), np.cumsum(seg, axis=1)], axis=1)
            new_lanes = []
            for b in range(nb):
                mids_s = 0.5 * (arcs[b, :-1][over] + arcs[b, 1:][over])
                mids = polyline_eval(nodes[b], arcs[b], mids_s)
                order = np.argsort(np.concatenate([arcs[b], mids_s]),
                                   kind="stable")
                new_lanes.append(np.concatenate([nodes[b], mids])[order])
            nodes = np.stack(new_lanes)
            del keep
        flat = tmap.apply_lift(nodes.reshape(-1, 3)).reshape(nodes.shape)
        anchors = tmap.apply_lift(anchors)
        shift = np.floor(anchors[0])
        nodes = flat - shift
        anchors = anchors - shift
        # trim around the lane-0 anchor; lanes are geometrically identical
        # at this resolution
        arcs0 = np.concatenate(
            [[0.0], np.cumsum(np.linalg.norm(np.diff(nodes[0], axis=0), axis=-1))])
        s_anchor = float(locate_on_polyline(nodes[0], arcs0, anchors[:1])[0])
        arcs0 = arcs0 - s_anchor
        inside = (arcs0 >= -trim_radius) & (arcs0 <= trim_radius)
        if inside.sum() >= 5:
            nodes = nodes[:, inside, :]
    # seeds' chart: translate so each lane's anchor matches its seed lift
    strands = []
    for b in range(nb):
        arcs = np.concatenate(
            [[0.0], np.cumsum(np.linalg.norm(np.diff(nodes[b], axis=0), axis=-1))])
        s_seed = float(locate_on_polyline(nodes[b], arcs,
                                          wrap(seeds[b])[None, :])[0])
        node_at = polyline_eval(nodes[b], arcs, np.array([s_seed]))[0]
        shift = seeds[b] - node_at
        strands.append(Strand(nodes=nodes[b] + shift, arcs=arcs - s_seed))
    return strands


class _TransportContext:
    """Moves the chain cluster to the loop's far strand by spine hops.

    Within each hop the strong unstable leaves of the cluster points ride a
    short distance (so every stable or center leg in the solves stays at the
    cluster scale), then the cluster is re-seated on the center plaque of
    the next waypoint, a node of the coarse search leaf.  The composition of
    the hops realizes the unstable holonomy without ever integrating fibers
    longer than the cluster itself.
    """

    STRIDE = 6.0

    def __init__(self, tmap: TorusMap, chain: EvenSpacedChain, loop: HexLoop,
                 budget: int):
        self.tmap = tmap
        self.loop = loop
        self.budget = budget
        off = loop.strand2_anchor - loop.strand1_anchor
        self.s2_offset = off - wrap_diff(off)

        # every chain point rides along, the base included: measuring the
        # base's own transported parameter is what makes the final
        # comparisons reference-independent
        cluster = loop.base + wrap_diff(wrap(chain.points) - wrap(loop.base))

        # waypoints: spine nodes marching from the base to the encounter
        a_dest = loop.spine_arcs[1]
        n_hops = max(1, int(math.ceil(abs(a_dest) / self.STRIDE)))
        arc_targets = np.linspace(0.0, a_dest, n_hops + 1)[1:]
        spine = loop.spine
        idx = np.searchsorted(spine.arcs, arc_targets)
        idx = np.clip(idx, 0, len(spine.arcs) - 1)
        waypoints = [spine.nodes[k] for k in idx]
        waypoints[-1] = loop.strand2_anchor  # exact encounter node

        for w_next in waypoints:
            cluster = self._hop(cluster, w_next)
        self.cluster = cluster  # on P^c(strand2_anchor), spine chart

    def _hop(self, cluster, w_next):
        from .leaves import intersect_leaf_with_patch

        gap = float(np.linalg.norm(w_next - cluster[-1]))
        radius = gap + 1.5
        strands = _grow_cluster_leaves(self.tmap, cluster, radius,
                                       max(radius / 1e4, 1e-3), self.budget)
        out = np.empty_like(cluster)
        for b, st in enumerate(strands):
            a_init = locate_on_polyline(st.nodes, st.arcs, w_next[None, :])
            a, c, s, ok = intersect_leaf_with_patch(
                self.tmap, st.nodes, st.arcs, w_next[None, :], a_init,
                step=_FLOW_STEP, budget=self.budget,
            )
            if not bool(ok[0]):
                raise NoIntersectionError("transport hop missed the waypoint patch")
            out[b] = flow_field(self.tmap, "c", w_next[None, :], c,
                                step=_FLOW_STEP, budget=self.budget)[0]
        return out

    def _final_strand(self, index):
        if not hasattr(self, "_final_strands"):
            span = float(np.abs(self.loop.strand2.arcs).max())
            radius = span + 1.5
            self._final_strands = _grow_cluster_leaves(
                self.tmap, self.cluster, radius, max(radius / 1e4, 1e-3),
                self.budget)
        return self._final_strands[index]

    def params_on_strand2(self, index, a2_fwd):
        """Center params of chain point `index` over the strand-2 plaques."""
        from .leaves import intersect_leaf_with_patch

        a2 = np.asarray(a2_fwd, dtype=float)
        dest = self.loop.strand2.at(a2) + self.s2_offset
        st = self._final_strand(index)
        a_init = locate_on_polyline(st.nodes, st.arcs, dest)
        a, c, s, ok = intersect_leaf_with_patch(
            self.tmap, st.nodes, st.arcs, dest, a_init, step=_FLOW_STEP,
            budget=self.budget,
        )
        if not bool(ok.all()):
            raise NoIntersectionError("chain transport missed the strand patch")
        return c

    def projected_params(self, loop: HexLoop, ts, indices):
        """Parameters r_i(t) of transported points on the plaques at
        gamma(t), for each requested chain index.

        Each point is carried to the plaque at gamma'(t) along its leaf,
        reconstructed there, and projected along stable fibers onto the
        plaque at gamma(t); the result is the direct center parameter in the
        canonical orientation.  Shape: (len(indices), len(ts)).
        """
        ts = np.asarray(ts, dtype=float)
        a2_ts = np.interp(ts, loop.t, loop.a2_of_t)
        g1 = loop.strand1.at(ts)
        dest2 = loop.strand2.at(a2_ts)
        out = np.empty((len(indices), len(ts)))
        for row, idx in enumerate(indices):
            q = self.params_on_strand2(idx, a2_ts)
            pts = flow_field(self.tmap, "c", dest2 + self.s2_offset, q,
                             step=_FLOW_STEP, budget=self.budget)
            # back into the strand-1 chart for the projection onto gamma(t)
            pts = pts - self.s2_offset
            r, _, _ = project_to_cs_patch(
                self.tmap, g1, pts, step=_FLOW_STEP, budget=self.budget,
                require=False,
            )
            out[row] = r
        return out


def build_even_chain(tmap: TorusMap, x, n_target: int, eps: float,
                     delta: float, *, radius: float = 200.0, tau: float = 1e-2,
                     chi_min: float = 1e-4, eps0: float = 0.1,
                     budget: int = DEFAULT_BUDGET, max_steps: int = 60,
                     work_scale: float = 2.5e-4, log=None) -> EvenSpacedChain:
    """Iterate the drift from the trivial chain up to N = n_target.

    Before every step the chain is contracted (by backward iteration, legal
    here because the center is uniformly expanded) until its diameter sits
    below both chi/2 of a freshly found loop at the current base and the
    working scale; transport ratio distortion shrinks linearly with that
    scale, which is what lets the evenness survive all the way to N.  Every
    step then returns a valid chain at scale eps.
    """
    if n_target < 1:
        raise ValueError("n_target must be >= 1")
    chain = trivial_chain(x)
    attempts = 0
    while chain.n < n_target:
        attempts += 1
        if attempts > max_steps:
            raise StepBudgetError(f"drift did not reach N={n_target}")
        loop = find_hex_loop(
            tmap, wrap(chain.base), radius, tau, chi_min=chi_min,
            eps0=eps0, budget=budget,
        )
        if loop is None:
            raise NoCrossingError("no hexagonal loop at the chain base")
        guard = 0
        mu_est = max(1.2, float(tmap.reference_rates[1]) * 0.8)
        while chain.n >= 1 and chain.base_diam >= min(loop.chi / 2, work_scale):
            goal = min(loop.chi / 4, work_scale / 2)
            steps = max(1, int(math.ceil(
                math.log(chain.base_diam / goal) / math.log(mu_est))))
            chain = _pullback_chain(tmap, chain, steps, budget=budget)
            guard += 1
            if guard > 40:
                raise StepBudgetError("chain normalization stalled")
        if guard:
            loop = find_hex_loop(
                tmap, wrap(chain.base), radius, tau, chi_min=chi_min,
                eps0=eps0, budget=budget,
            )
            if loop is None:
                raise NoCrossingError("no hexagonal loop at the rescaled base")
        chain = drift_step(tmap, chain, loop, delta, eps, budget=budget)
        if log is not None:
            log.append({
                "n": chain.n,
                "chi": loop.chi,
                "spine_arcs": loop.spine_arcs,
                "diam": chain.base_diam,
                "max_ratio_error": chain.max_ratio_error,
            })
    return chain


def cu_disk_witness(tmap: TorusMap, chain: EvenSpacedChain, uu_radius: float,
                    *, leaf_tol: float = 1e-3, n_samples: int = 16,
                    budget: int = DEFAULT_BUDGET):
    """Tangency residual of the 2-patch swept by leaves through the chain.

    Grows the strong unstable leaf through every chain point, samples the
    resulting 2-parameter patch, and reports the largest angle between its
    discrete tangent planes and the span of (e_uu, e_c).
    """
    if chain.n < 4:
        raise ValueError("chain must have N >= 4")
    arcs = np.linspace(-uu_radius * 0.9, uu_radius * 0.9, n_samples)
    rows = []
    for p in chain.points:
        lf = grow_leaf(tmap, wrap(p), uu_radius, leaf_tol, "uu", budget)
        nodes = lf.nodes + (p - lf.base)
        rows.append(polyline_eval(nodes, lf.arclength, arcs))
    rows = np.asarray(rows)                      # (n+1, n_samples, 3)
    t_u = rows[:, 2:, :] - rows[:, :-2, :]       # along-leaf tangents
    t_c = rows[2:, :, :] - rows[:-2, :, :]       # across-chain tangents
    mids = rows[1:-1, 1:-1, :]
    t_u = t_u[1:-1, :, :]
    t_c = t_c[:, 1:-1, :]
    n_patch = np.cross(t_u, t_c)
    fb = splitting.bundle_frames(tmap, wrap(mids.reshape(-1, 3)), budget)
    n_ref = np.cross(fb.e_uu, fb.e_c)
    ang = splitting.line_angle(n_patch.reshape(-1, 3), n_ref)
    return float(ang.max()), rows
