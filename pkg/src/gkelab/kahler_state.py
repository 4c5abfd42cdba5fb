"""Torus-invariant Kahler metric states on a truncated grid.

A state is a convex potential phi with every derived cache attached: Hessian
entries, det D^2 phi (the volume density), its inverse Phi, the moment map
grad phi, the Ricci potential f = c - 2 phi - log det D^2 phi and the
normalization constant c.

phi is stored split as an analytic reference plus a nodal deviation,
phi = ref + g. The reference carries the linear growth and is differentiated
in closed form; only the bounded deviation g goes through stencils. Storing
phi as one nodal array instead would put eps * |phi| quantization noise
through the Hessian stencils and wipe out the exponentially small tail of
det D^2 phi (relative error ~ eps * |x| / h^2 / det, about 1e-5 at the edge
of the cp1 box), which is far above what the fixture checks tolerate.

The normalization c is chosen so that integral(e^{c - 2 phi} dx) = vol(P)
with the integral taken over all of R^n: the quadrature over the box is
augmented by a first-order Laplace correction for each face, using the
boundary values of phi and of the moment map. Without that correction c
inherits the full truncation tail (2e-7 on the cp1 box) and so does f.

States are immutable; every operation returns a new state rebuilt from
(reference, deviation).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace
from math import comb

import numpy as np

from . import mesh, toric
from .constants import METRIC_POTENTIAL_FACTOR


class StateError(ValueError):
    pass


class ConvexityError(StateError):
    """Discrete convexity lost: det D^2 phi (or its trace) nonpositive somewhere."""


class RecenterError(StateError):
    """Requested recentering translation cannot be applied on this grid."""


CHECKPOINT_FORMAT_VERSION = 1

# Faces where the outward moment-map slope is below this are skipped in the
# tail correction; the Laplace approximation needs the slope bounded away
# from zero, and such a face contributes a fat tail the box cannot see anyway.
MIN_FACE_SLOPE = 0.1


# --- analytic reference potentials ------------------------------------------------


@dataclass(frozen=True)
class AnalyticReference:
    """phi_ref(x) = alpha * log(sum_k e^{<a_k, x> + b_k}) + <beta, x> + gamma.

    Closed under translation x -> x + t, which recentering relies on. The
    softmax form covers the vertex-sum start potential and the closed-form
    round metrics alike.
    """

    alpha: float
    exponents: tuple
    offsets: tuple
    linear: tuple
    constant: float = 0.0

    def _softmax(self, grid):
        logits = np.stack([
            sum(a[j] * np.broadcast_to(grid.coords[j], grid.shape) for j in range(grid.dim))
            + b
            for a, b in zip(self.exponents, self.offsets)
        ])
        top = np.max(logits, axis=0)
        p = np.exp(logits - top)
        z = np.sum(p, axis=0)
        return logits, top, p / z

    def potential(self, grid):
        logits, top, _ = self._softmax(grid)
        lse = top + np.log(np.sum(np.exp(logits - top), axis=0))
        out = self.alpha * lse + self.constant
        for j, b in enumerate(self.linear):
            out = out + b * np.broadcast_to(grid.coords[j], grid.shape)
        return out

    def gradient(self, grid):
        _, _, p = self._softmax(grid)
        a = np.asarray(self.exponents)
        out = []
        for j in range(grid.dim):
            mj = np.tensordot(a[:, j], p, axes=(0, 0))
            out.append(self.alpha * mj + self.linear[j])
        return tuple(out)

    def hessian(self, grid):
        """Entries in mesh order: (xx,) or (xx, xy, yy); alpha * Cov_p(a).

        Pairwise covariance form (1/2) sum_{ik} p_i p_k (a_i-a_k)(a_i-a_k)^T:
        the textbook second-minus-squared-mean form cancels catastrophically
        where one weight dominates, and the resulting 1e-10 relative jitter in
        det, amplified by the inverse Hessian against one-sided stencils at
        the box edge, is large enough to wreck gradient norms at round states.
        """
        _, _, p = self._softmax(grid)
        a = np.asarray(self.exponents)
        pairs = [(0, 0)] if grid.dim == 1 else [(0, 0), (0, 1), (1, 1)]
        out = [np.zeros(grid.shape) for _ in pairs]
        K = a.shape[0]
        for i in range(K):
            for k in range(i + 1, K):
                pp = p[i] * p[k]
                d = a[i] - a[k]
                for idx, (j, l) in enumerate(pairs):
                    out[idx] = out[idx] + pp * (d[j] * d[l])
        return tuple(self.alpha * o for o in out)

    def det_hessian(self, grid):
        """Hessian determinant as a positive pairwise sum.

        Expanding det(fxx fyy - fxy^2) from the entry formulas cancels
        catastrophically wherever one vertex weight dominates, which is most
        of the box; the noise sits under the log in the Ricci potential and
        comes back amplified by the inverse metric in gradient norms. By
        Cauchy-Binet the determinant of sum_q w_q d_q d_q^T is
        sum_{q<r} w_q w_r cross(d_q, d_r)^2, every term nonnegative, so this
        form stays relatively accurate down to underflow.
        """
        _, _, p = self._softmax(grid)
        a = np.asarray(self.exponents)
        if grid.dim == 1:
            return self.hessian(grid)[0]
        K = a.shape[0]
        pairs = [(i, k) for i in range(K) for k in range(i + 1, K)]
        out = np.zeros(grid.shape)
        for q, (i, k) in enumerate(pairs):
            di = a[i] - a[k]
            for l, r in pairs[q + 1:]:
                dl = a[l] - a[r]
                cross = di[0] * dl[1] - di[1] * dl[0]
                if cross:
                    out = out + (p[i] * p[k] * p[l] * p[r]) * cross ** 2
        return (self.alpha ** 2) * out

    def translated(self, t):
        return replace(
            self,
            offsets=tuple(b + sum(aj * tj for aj, tj in zip(a, t))
                          for a, b in zip(self.exponents, self.offsets)),
            constant=self.constant + sum(bj * tj for bj, tj in zip(self.linear, t)),
        )

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "exponents": [list(a) for a in self.exponents],
            "offsets": list(self.offsets),
            "linear": list(self.linear),
            "constant": self.constant,
        }

    @staticmethod
    def from_dict(d):
        return AnalyticReference(
            alpha=float(d["alpha"]),
            exponents=tuple(tuple(float(c) for c in a) for a in d["exponents"]),
            offsets=tuple(float(b) for b in d["offsets"]),
            linear=tuple(float(b) for b in d["linear"]),
            constant=float(d["constant"]),
        )


def reference_for(P, temperature=None):
    """The start potential (tau/2) log sum_v e^{2<v,x>/tau} as an analytic object.

    Moment image is conv(vertices) = P for any tau > 0. tau = 1 is the raw
    support-function smoothing, whose Hessian determinant underflows double
    precision in the corners of the default boxes (the two subdominant vertex
    weights multiply); the softened default keeps the far field positive by a
    comfortable margin and the flow Jacobian solvable.
    """
    from .constants import DEFAULT_REFERENCE_TEMPERATURE

    tau = DEFAULT_REFERENCE_TEMPERATURE if temperature is None else float(temperature)
    if tau <= 0:
        raise StateError(f"temperature must be positive, got {tau}")
    return AnalyticReference(
        alpha=0.5 * tau,
        exponents=tuple(tuple(2.0 * c / tau for c in v) for v in P.vertices),
        offsets=(0.0,) * P.n_vertices,
        linear=(0.0,) * P.dim,
    )


_ROUND_REFERENCES = {
    frozenset({(-1,), (1,)}): AnalyticReference(
        alpha=1.0, exponents=((1.0,), (-1.0,)), offsets=(0.0, 0.0), linear=(0.0,)
    ),
    frozenset({(-1, -1), (2, -1), (-1, 2)}): AnalyticReference(
        alpha=1.5, exponents=((0.0, 0.0), (2.0, 0.0), (0.0, 2.0)),
        offsets=(0.0, 0.0, 0.0), linear=(-1.0, -1.0),
    ),
    frozenset({(1, 1), (1, -1), (-1, 1), (-1, -1)}): AnalyticReference(
        alpha=1.0, exponents=((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)),
        offsets=(0.0,) * 4, linear=(0.0, 0.0),
    ),
}


# --- perturbation directions -------------------------------------------------------


@dataclass(frozen=True)
class Perturbation:
    """A tangent direction: nodal profile plus its torus-Fourier weight.

    weight == (0,...) is an invariant (real) direction; nonzero weights carry
    the complex profile v(x) of v(x) e^{i <m, theta>} and only enter through
    the sector operators and the full-torus oracle, never through perturb().
    """

    values: np.ndarray
    weight: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise StateError("perturbation profile contains non-finite values")
        if all(c == 0 for c in self.weight) and np.iscomplexobj(self.values):
            raise StateError("weight-0 perturbations must be real-valued")


# --- the state ---------------------------------------------------------------------


@dataclass(frozen=True)
class MetricState:
    polytope: toric.LatticePolytope
    grid: mesh.Grid
    accuracy: int
    reference: AnalyticReference
    deviation: np.ndarray
    phi: np.ndarray
    moment: tuple          # (phi_x,) or (phi_x, phi_y)
    hess: tuple            # (phi_xx,) or (phi_xx, phi_xy, phi_yy)
    det_hess: np.ndarray
    inv_hess: tuple        # same layout as hess
    f: np.ndarray
    c_norm: float
    tail_mass: float       # Laplace face correction folded into c
    tail_error: float      # |quadrature volume - vol(P)|, a truncation gauge

    @property
    def ef(self):
        return np.exp(self.f)

    @property
    def mass(self):
        """Quadrature mass density w * det D^2 phi, the <<.,.>> measure."""
        return self.grid.weights * self.det_hess

    @property
    def mass_f(self):
        return self.grid.weights * self.det_hess * np.exp(self.f)

    def inner(self, u, v):
        if np.iscomplexobj(u) or np.iscomplexobj(v):
            return complex(np.sum(self.mass * u * np.conj(v)))
        return float(np.sum(self.mass * u * v))

    def norm(self, u):
        return float(np.sqrt(np.sum(self.mass * np.abs(u) ** 2)))

    @property
    def state_ref(self):
        return f"{self.polytope.name}/R{self.grid.R:g}/N{self.grid.N}/acc{self.accuracy}"


def _worst_node(grid, bad_values, mask):
    idx = np.unravel_index(int(np.argmin(np.where(mask, bad_values, np.inf))), grid.shape)
    x = tuple(float(grid.axis[i]) for i in idx)
    return idx, x


def _face_tail_correction(grid, phi, moment):
    """Laplace estimate of integral(e^{-2 phi}) outside the box, face by face.

    Along each outward ray phi grows with slope >= the boundary moment-map
    component, so the exterior mass behind a face is about
    integral_face e^{-2 phi} / (2 slope). Corner regions are second order in
    the tail size and are dropped.
    """
    total = 0.0
    if grid.dim == 1:
        for side, sign in ((0, -1.0), (-1, 1.0)):
            slope = sign * moment[0][side]
            if slope > MIN_FACE_SLOPE:
                total += np.exp(-2.0 * phi[side]) / (2.0 * slope)
        return float(total)
    w1 = grid.weights_1d
    for axis in range(2):
        for side, sign in ((0, -1.0), (-1, 1.0)):
            line = (slice(None), side) if axis == 1 else (side, slice(None))
            slope = sign * moment[axis][line]
            good = slope > MIN_FACE_SLOPE
            total += np.sum(w1[good] * np.exp(-2.0 * phi[line][good]) / (2.0 * slope[good]))
    return float(total)


def make_state(polytope, grid, reference, deviation=None, accuracy=None):
    """Build a fully cached MetricState; validates discrete convexity."""
    from .constants import DEFAULT_ACCURACY

    accuracy = DEFAULT_ACCURACY if accuracy is None else accuracy
    if polytope.dim != grid.dim:
        raise StateError(f"polytope dim {polytope.dim} != grid dim {grid.dim}")
    if deviation is None:
        deviation = np.zeros(grid.shape)
    g = np.asarray(deviation, dtype=float)
    if g.shape != grid.shape:
        raise StateError(f"deviation shape {g.shape} does not match grid {grid.shape}")
    if not np.all(np.isfinite(g)):
        raise StateError("deviation contains non-finite values")

    phi = reference.potential(grid) + g
    ref_grad = reference.gradient(grid)
    ref_hess = reference.hessian(grid)
    moment = tuple(rg + dg for rg, dg in zip(ref_grad, mesh.gradient(grid, g, accuracy)))
    hess = tuple(rh + dh for rh, dh in zip(ref_hess, mesh.hessian_entries(grid, g, accuracy)))

    pure_reference = not g.any()
    if grid.dim == 1:
        det = reference.det_hessian(grid) if pure_reference else hess[0]
        bad = det <= 0
        if np.any(bad):
            idx, x = _worst_node(grid, det, bad)
            raise ConvexityError(f"det D^2 phi = {det[idx]:.3e} <= 0 at node {idx}, x = {x}")
        inv = (1.0 / det,)
    else:
        fxx, fxy, fyy = hess
        # entry-formula determinant cancels catastrophically in the far field;
        # for undeviated analytic states the stable pairwise form is exact
        det = reference.det_hessian(grid) if pure_reference else fxx * fyy - fxy * fxy
        trace = fxx + fyy
        bad = (det <= 0) | (trace <= 0)
        if np.any(bad):
            worst = np.where(trace <= 0, trace, det)
            idx, x = _worst_node(grid, worst, bad)
            raise ConvexityError(
                f"convexity lost at node {idx}, x = {x}: det = {det[idx]:.3e}, trace = {trace[idx]:.3e}"
            )
        inv = (fyy / det, -fxy / det, fxx / det)

    vol = float(toric.volume(polytope))
    w = grid.weights
    top = float(np.min(phi))
    box_mass = float(np.sum(w * np.exp(-2.0 * (phi - top))))
    tail = float(_face_tail_correction(grid, phi - top, moment))
    if not np.isfinite(box_mass) or box_mass <= 0:
        raise StateError("degenerate quadrature mass for e^{-2 phi}")
    c = float(np.log(vol) - (np.log(box_mass + tail) - 2.0 * top))
    f = c - 2.0 * phi - np.log(det)
    tail_error = abs(float(np.sum(w * det)) - vol)

    for arr in (g, phi, det, f, *moment, *hess, *inv):
        arr.setflags(write=False)
    return MetricState(
        polytope=polytope, grid=grid, accuracy=accuracy, reference=reference,
        deviation=g, phi=phi, moment=moment, hess=hess, det_hess=det, inv_hess=inv,
        f=f, c_norm=c, tail_mass=tail * np.exp(-2.0 * top), tail_error=tail_error,
    )


def build_reference(P, grid, accuracy=None, temperature=None):
    """Start state: the softened vertex-sum potential, convex, moment image P."""
    return make_state(P, grid, reference_for(P, temperature), None, accuracy)


def set_round_fixture(P, grid, accuracy=None):
    """Closed-form Kahler-Einstein states for CP^1, CP^2 and CP^1 x CP^1."""
    ref = _ROUND_REFERENCES.get(frozenset(P.vertices))
    if ref is None:
        raise StateError(f"no closed-form round metric for polytope {P.name!r}")
    return make_state(P, grid, ref, None, accuracy)


def from_potential(P, grid, phi, accuracy=None):
    """State from a raw nodal potential; the start reference absorbs the growth."""
    ref = reference_for(P)
    g = np.asarray(phi, dtype=float) - ref.potential(grid)
    return make_state(P, grid, ref, g, accuracy)


def ricci_potential(state):
    """Recompute f and c from the potential (a rebuild; caches are never stale)."""
    return make_state(state.polytope, state.grid, state.reference, state.deviation,
                      state.accuracy)


# --- functionals -------------------------------------------------------------------


def energy_RC(state):
    """The Ricci-Calabi energy: integral of (1 - e^f)^2 against det D^2 phi dx."""
    r = 1.0 - np.exp(state.f)
    return float(np.sum(state.mass * r * r))


def gradient_norm(state):
    """Flow gradient size ||1 - e^f|| in the e^f-weighted metric."""
    r = 1.0 - np.exp(state.f)
    return float(np.sqrt(np.sum(state.mass_f * r * r)))


def affine_on_moment(state, a):
    """Evaluate an exact AffineFunction on the nodal moment map."""
    out = np.full(state.grid.shape, float(a.constant))
    for b, p in zip(a.gradient, state.moment):
        out = out + float(b) * p
    return out


def ding_pairing_check(state, a):
    """(numeric D(a), closed form vol(P) <b_a, barycenter - t0>).

    D(a) = integral a(grad phi) (1 - e^f) dmu is metric independent; the pair
    lets callers measure how far the discretization is from that fact.
    """
    numeric = float(np.sum(state.mass * affine_on_moment(state, a) * (1.0 - np.exp(state.f))))
    closed = float(toric.ding_pairing_exact(state.polytope, a))
    return numeric, closed


def moment_violation(state):
    """Worst signed violation of the moment image lying inside the closed polytope."""
    worst = 0.0
    for normal, offset in state.polytope.facets:
        s = np.full(state.grid.shape, float(offset))
        for nj, p in zip(normal, state.moment):
            s = s + nj * p
        worst = max(worst, float(np.max(-s)))
    return worst


def pushforward_moment(state, beta):
    """Quadrature of (grad phi)^beta det D^2 phi dx; converges to the exact moment."""
    val = state.mass.copy()
    for b, p in zip(beta, state.moment):
        val = val * p**b
    return float(np.sum(val))


# --- perturbation and gauge --------------------------------------------------------


def perturb(state, psi, eps):
    """New state with potential moved by eps * psi in additive-potential units.

    psi is a weight-0 Perturbation (or plain real array); the stored convex
    potential changes by eps * psi / METRIC_POTENTIAL_FACTOR, which is what
    makes the finite differences of f and E match the operator formulas with
    unit coefficients.
    """
    if isinstance(psi, Perturbation):
        if any(c != 0 for c in psi.weight):
            raise StateError(f"perturb needs weight 0, got weight {psi.weight}")
        psi = psi.values
    psi = np.asarray(psi, dtype=float)
    if psi.shape != state.grid.shape:
        raise StateError("perturbation shape does not match grid")
    g = state.deviation + (float(eps) / METRIC_POTENTIAL_FACTOR) * psi
    return make_state(state.polytope, state.grid, state.reference, g, state.accuracy)


def _smoothstep(s, order=6):
    """Monotone polynomial ramp on [0, 1] with `order` vanishing derivatives
    at both ends. Unlike the classic bump exp(-1/(1-s^2)) its derivatives
    stay O(order^2) on the whole interval, so sixth order stencils resolve
    it on any grid that resolves the transition width."""
    t = np.asarray(s, dtype=float)
    acc = np.zeros_like(t)
    for k in range(order, -1, -1):
        coef = comb(order + k, k) * comb(2 * order + 1, order - k) * (-1.0) ** k
        acc = acc * t + coef
    return t ** (order + 1) * acc


def tapered_probes(state, count, seed, center_frac=0.15, support_frac=(0.5, 0.8),
                   taper_rate=3.0):
    """Seeded smooth directions tapered by a power of the state's density.

    A finite-amplitude perturbation keeps the potential convex only where its
    curvature stays below the local smallest Hessian eigenvalue, and that
    eigenvalue decays like the Monge-Ampere density. Fixed-width bumps always
    lose that race somewhere in the box, so directions meant for building
    perturbed *states* (rather than infinitesimal tests) carry a taper
    exp(-taper_rate (phi - min phi)); max_admissible_eps quantifies the
    remaining margin. The default rate 3 decays one e-fold faster than the
    density itself, so the metric-relative curvature of the probe peaks near
    the center instead of at the support edge. That bounds the third energy
    derivative along the direction, which is what keeps central differences
    at moderate steps inside their quadratic regime.

    Two further properties matter for quadrature-level cancellations:
    the probes vanish identically outside support_frac[1] * R (a smooth
    radial window, so face integrals of any perturbed state match the base
    state's exactly), and they are orthogonal to constants in the density
    inner product (the normalization constant then moves only at second
    order in the amplitude).

    The window is a polynomial smoothstep with six matching derivatives at
    both junctions. Any window that joins its constant plateau with a
    curvature jump (a clipped bump does) leaves localized ringing in the
    discrete second derivative, and the oscillating composite quadrature
    weights turn that ringing into percent-level discrete integration by
    parts errors; gradient pairing tests then fail far above tolerance.
    """
    rng = np.random.default_rng(seed)
    R = state.grid.R
    top = float(np.min(state.phi))
    taper = np.exp(-float(taper_rate) * (state.phi - top))
    r2 = np.zeros(state.grid.shape)
    for c in state.grid.coords:
        r2 = r2 + np.broadcast_to(c, state.grid.shape) ** 2
    s = (np.sqrt(r2) / R - support_frac[0]) / (support_frac[1] - support_frac[0])
    window = 1.0 - _smoothstep(np.clip(s, 0.0, 1.0))
    envelope = window * taper
    density = state.grid.weights * np.exp(-2.0 * (state.phi - top))
    out = np.empty((count,) + state.grid.shape)
    for k in range(count):
        center = rng.uniform(-center_frac * R, center_frac * R, size=state.grid.dim)
        a0 = rng.normal()
        poly = np.full(state.grid.shape, np.sign(a0) * (0.5 + 0.5 * abs(a0)))
        for j, c in enumerate(state.grid.coords):
            cb = np.broadcast_to(c, state.grid.shape)
            poly = poly + rng.normal() * (cb - center[j]) / R
            for c2 in state.grid.coords:
                poly = poly + rng.normal() * (cb * np.broadcast_to(c2, state.grid.shape)) / R**2
        probe = poly * envelope
        probe = probe - envelope * (np.sum(density * probe) / np.sum(density * envelope))
        out[k] = probe / np.max(np.abs(probe))
    return out


def max_admissible_eps(state, psi):
    """Largest eps with D^2(phi + eps psi / 2) still positive, by spectral bound.

    Per node, eps * rho(D^2 psi) / 2 < lambda_min(D^2 phi) suffices; the
    minimum of that ratio over the grid is returned. Conservative but cheap;
    tests pick eps well inside it instead of discovering ConvexityError.
    """
    if isinstance(psi, Perturbation):
        psi = psi.values
    b = mesh.hessian_entries(state.grid, np.asarray(psi, dtype=float), state.accuracy)
    if state.grid.dim == 1:
        lam_min = state.hess[0]
        rho = np.abs(b[0])
    else:
        hxx, hxy, hyy = state.hess
        tr = hxx + hyy
        disc = np.sqrt(np.maximum((hxx - hyy) ** 2 + 4.0 * hxy**2, 0.0))
        lam_min = 0.5 * (tr - disc)
        bxx, bxy, byy = b
        rho = 0.5 * (np.abs(bxx + byy) + np.sqrt((bxx - byy) ** 2 + 4.0 * bxy**2))
    ratio = 2.0 * lam_min / np.maximum(rho, 1e-300)
    return float(np.min(ratio))


def estimate_center_offset(state):
    """Translation t such that pulling back by x -> x + t recenters the state.

    Estimator: the mean of x under the weight e^{-2 phi} (the density of
    e^f det D^2 phi). Exact for translated copies of even potentials up to
    exponentially small truncation tails.
    """
    w = state.grid.weights * np.exp(-2.0 * (state.phi - np.min(state.phi)))
    z = float(np.sum(w))
    return np.array([
        float(np.sum(w * np.broadcast_to(c, state.grid.shape)) / z)
        for c in state.grid.coords
    ])


def _shift_with_quadratic_fill(g, k, axis):
    """Integer node shift along one axis; vacated slab refilled by the quadratic
    through the last three retained nodes."""
    if k == 0:
        return g
    out = np.roll(g, -k, axis=axis)
    out = np.swapaxes(out, 0, axis)
    n = out.shape[0]
    if k > 0:
        for i in range(n - k, n):
            out[i] = 3.0 * out[i - 1] - 3.0 * out[i - 2] + out[i - 3]
    else:
        for i in range(-k - 1, -1, -1):
            out[i] = 3.0 * out[i + 1] - 3.0 * out[i + 2] + out[i + 3]
    return np.swapaxes(out, 0, axis)


def recenter(state, max_shift_fraction=0.25):
    """Pull phi back by a node-snapped translation and renormalize the constant.

    Drives the e^{-2 phi}-weighted mean of x to zero, which counters the
    translation drift the flow picks up along torus directions. The shift is
    snapped to whole nodes so the reference translates in closed form and the
    deviation moves without interpolation; the additive constant is then fixed
    so the same weighted mean of phi vanishes. No-op (bit for bit) when the
    snapped shift is zero.
    """
    t = estimate_center_offset(state)
    h = state.grid.h
    k = np.rint(t / h).astype(int)
    if np.all(k == 0):
        return state
    if np.any(np.abs(k) * h > max_shift_fraction * state.grid.R):
        raise RecenterError(
            f"translation {t} exceeds {max_shift_fraction:.0%} of the box half-width"
        )
    shift = tuple(float(ki * h) for ki in k)
    ref = state.reference.translated(shift)
    g = np.array(state.deviation)
    for ax in range(state.grid.dim):
        g = _shift_with_quadratic_fill(g, int(k[ax]), ax)
    phi = ref.potential(state.grid) + g
    w = state.grid.weights * np.exp(-2.0 * (phi - np.min(phi)))
    kappa = float(np.sum(w * phi) / np.sum(w))
    ref = replace(ref, constant=ref.constant - kappa)
    try:
        return make_state(state.polytope, state.grid, ref, g, state.accuracy)
    except ConvexityError as exc:
        raise RecenterError(f"recentered potential lost convexity: {exc}") from exc


def gauge_distance(s1, s2, fraction=0.9):
    """Sup difference of potentials over the inner box, modulo the additive constant."""
    mask = s1.grid.inner_mask(fraction)
    d = s1.phi - s2.phi
    return float(np.max(np.abs(d[mask] - np.mean(d[mask]))))


# --- checkpoints -------------------------------------------------------------------


def save_state(state, path, extra=None):
    """Checkpoint: deviation plus reference and grid identifiers; bit-exact round trip."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "polytope": {
            "name": state.polytope.name,
            "dim": state.polytope.dim,
            "vertices": [list(v) for v in state.polytope.vertices],
        },
        "grid": {"R": state.grid.R, "N": state.grid.N, "rule": state.grid.rule},
        "accuracy": state.accuracy,
        "reference": state.reference.to_dict(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    np.savez(
        buf,
        deviation=state.deviation,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    )
    with open(str(path), "wb") as fh:
        fh.write(buf.getvalue())


def load_state(path):
    """Rebuild a MetricState from a checkpoint; returns (state, extra dict)."""
    with np.load(path) as data:
        g = data["deviation"]
        meta = json.loads(bytes(data["meta"]).decode())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise StateError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    P = toric.from_vertices(
        meta["polytope"]["name"], meta["polytope"]["dim"],
        [tuple(v) for v in meta["polytope"]["vertices"]],
    )
    gd = meta["grid"]
    grid = mesh.build_grid(P.dim, gd["R"], gd["N"], gd["rule"])
    ref = AnalyticReference.from_dict(meta["reference"])
    state = make_state(P, grid, ref, g, meta["accuracy"])
    return state, meta["extra"]
