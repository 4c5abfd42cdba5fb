"""Exact combinatorics on reflexive moment polytopes.

Everything in this module is rational arithmetic; floats never enter. The
polytope supplies the combinatorial side of every cross check downstream
(volume, barycenter, Demazure roots, the extremal affine function ell and the
predicted sector eigenvalues), so it must be free of quadrature error.

Polytope convention: P = {p : <normal_F, p> >= -offset_F} with primitive
integer inward normals; reflexive means every offset is 1 and the origin is
the unique interior lattice point.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from math import gcd
from pathlib import Path

from .constants import MATSUSHIMA_SIGN


class PolytopeError(ValueError):
    """Raised for malformed, non-reflexive or degenerate polytope input."""


# --- basic lattice helpers ---------------------------------------------------


def _primitive(v):
    g = 0
    for c in v:
        g = gcd(g, abs(c))
    if g == 0:
        raise PolytopeError("zero normal vector")
    return tuple(c // g for c in v)


def _dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def _hull_2d(points):
    """Andrew monotone chain; returns the strict convex hull in ccw order."""
    pts = sorted(set(points))
    if len(pts) < 3:
        raise PolytopeError(f"need at least 3 distinct vertices in dim 2, got {pts}")

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise PolytopeError(f"vertices are not full-dimensional: {pts}")
    return hull


# --- core types ---------------------------------------------------------------


@dataclass(frozen=True)
class AffineFunction:
    """a0 + <b, p> on moment coordinates, exact rational coefficients."""

    constant: Fraction
    gradient: tuple

    def __call__(self, p):
        acc = self.constant
        for b, x in zip(self.gradient, p):
            acc = acc + b * x
        return acc

    @property
    def is_zero(self):
        return self.constant == 0 and all(b == 0 for b in self.gradient)

    def shifted(self, t):
        """The function p -> self(p - t)."""
        const = self.constant - sum(b * x for b, x in zip(self.gradient, t))
        return AffineFunction(Fraction(const), self.gradient)


@dataclass(frozen=True)
class DemazureRoot:
    weight: tuple
    facet_index: int


@dataclass(frozen=True)
class ExtremalData:
    ell: AffineFunction
    barycenter: tuple
    obstruction_margin: Fraction
    predicted_lambdas: dict


@dataclass(frozen=True)
class LatticePolytope:
    name: str
    dim: int
    vertices: tuple   # canonical order: ccw from lexicographic minimum (sorted for dim 1)
    facets: tuple     # ((normal, offset), ...) following the vertex order

    def contains(self, p, strict=False):
        for normal, offset in self.facets:
            s = _dot(normal, p) + offset
            if s < 0 or (strict and s == 0):
                return False
        return True

    @property
    def n_vertices(self):
        return len(self.vertices)


# --- construction and validation ---------------------------------------------


def _facets_1d(verts):
    a, b = verts
    # inward normal +1 at the left endpoint, -1 at the right one
    return (((1,), -a), ((-1,), b))


def _facets_2d(hull):
    facets = []
    k = len(hull)
    for i in range(k):
        v, w = hull[i], hull[(i + 1) % k]
        d = (w[0] - v[0], w[1] - v[1])
        normal = _primitive((-d[1], d[0]))  # inward for ccw orientation
        facets.append((normal, -_dot(normal, v)))
    return tuple(facets)


def _check_reconstruction_2d(hull, facets):
    # each adjacent facet pair must intersect in the shared hull vertex
    k = len(facets)
    for i in range(k):
        (n1, c1), (n2, c2) = facets[i], facets[(i + 1) % k]
        det = n1[0] * n2[1] - n1[1] * n2[0]
        if det == 0:
            raise PolytopeError(f"parallel adjacent facets {n1}, {n2}")
        x = Fraction(-c1 * n2[1] + c2 * n1[1], det)
        y = Fraction(-c2 * n1[0] + c1 * n2[0], det)
        expect = hull[(i + 1) % k]
        if (x, y) != (Fraction(expect[0]), Fraction(expect[1])):
            raise PolytopeError(
                f"facet intersection {(x, y)} disagrees with vertex {expect}"
            )


def from_vertices(name, dim, vertices, require_reflexive=True):
    """Build and validate a LatticePolytope from integer vertices.

    require_reflexive=False admits lattice translates of reflexive polytopes,
    which the moment and extremal machinery handles; everything downstream of
    a metric state still assumes the reflexive normalization.
    """
    verts = []
    for v in vertices:
        t = tuple(v)
        if len(t) != dim or not all(isinstance(c, int) for c in t):
            raise PolytopeError(f"vertex {v} is not an integer {dim}-vector")
        verts.append(t)
    if dim == 1:
        uniq = sorted(set(verts))
        if len(uniq) != 2:
            raise PolytopeError(f"a 1-d polytope needs exactly 2 distinct vertices, got {uniq}")
        canonical = tuple(uniq)
        facets = _facets_1d([u[0] for u in uniq])
    elif dim == 2:
        hull = _hull_2d(verts)
        if set(verts) != set(hull):
            extra = sorted(set(verts) - set(hull))
            raise PolytopeError(f"input points {extra} are not vertices of their hull")
        facets = _facets_2d(hull)
        _check_reconstruction_2d(hull, facets)
        start = hull.index(min(hull))
        hull = hull[start:] + hull[:start]
        facets = facets[start:] + facets[:start]
        canonical = tuple(hull)
    else:
        raise PolytopeError(f"dim must be 1 or 2, got {dim}")

    if require_reflexive:
        for normal, offset in facets:
            if offset != 1:
                raise PolytopeError(
                    f"not reflexive: facet with normal {normal} has offset {offset}"
                )
    return LatticePolytope(name=str(name), dim=dim, vertices=canonical, facets=tuple(facets))


def load_polytope(source):
    """Read a polytope document {"name", "dim", "vertices"} and validate it.

    Accepts a path, a JSON string, or an already-parsed dict.
    """
    if isinstance(source, dict):
        doc = source
    else:
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
            text = Path(source).read_text()
        else:
            text = source
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PolytopeError(f"polytope document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise PolytopeError(f"polytope document must be an object, got {type(doc).__name__}")
    for key in ("name", "dim", "vertices"):
        if key not in doc:
            raise PolytopeError(f"polytope document missing key {key!r}")
    dim = doc["dim"]
    if not isinstance(dim, int):
        raise PolytopeError(f"dim must be an integer, got {dim!r}")
    try:
        return from_vertices(doc["name"], dim, doc["vertices"])
    except TypeError as exc:
        raise PolytopeError(f"malformed vertex list {doc['vertices']!r}") from exc


def fixture_path(name):
    return Path(__file__).parent / "fixtures" / f"{name}.json"


def load_fixture(name):
    p = fixture_path(name)
    if not p.exists():
        raise PolytopeError(f"no bundled polytope fixture named {name!r}")
    return load_polytope(p)


# --- exact moments ------------------------------------------------------------


def _poly_mul(p, q):
    out = {}
    for g1, c1 in p.items():
        for g2, c2 in q.items():
            g = tuple(a + b for a, b in zip(g1, g2))
            out[g] = out.get(g, Fraction(0)) + c1 * c2
    return out


def _simplex_moments(w0, edges, max_degree, dim):
    """Exact integrals over the affine image of the standard simplex.

    x = w0 + u @ edges for u in the standard simplex; returns a dict
    multi-index -> integral of x^beta, including the |det| Jacobian.
    """
    if dim == 1:
        det = edges[0][0]
    else:
        det = edges[0][0] * edges[1][1] - edges[0][1] * edges[1][0]
    jac = abs(Fraction(det))
    zero = (0,) * dim
    # linear form for each coordinate as a polynomial in u
    coords = []
    for j in range(dim):
        lin = {zero: Fraction(w0[j])}
        for i in range(dim):
            g = tuple(1 if k == i else 0 for k in range(dim))
            lin[g] = lin.get(g, Fraction(0)) + Fraction(edges[i][j])
        coords.append(lin)

    fact = [1]
    for k in range(1, max_degree + dim + 1):
        fact.append(fact[-1] * k)

    out = {}
    for beta in itertools.product(range(max_degree + 1), repeat=dim):
        if sum(beta) > max_degree:
            continue
        poly = {zero: Fraction(1)}
        for j in range(dim):
            for _ in range(beta[j]):
                poly = _poly_mul(poly, coords[j])
        total = Fraction(0)
        for g, c in poly.items():
            num = Fraction(1)
            for gi in g:
                num *= fact[gi]
            total += c * num / fact[dim + sum(g)]
        out[beta] = jac * total
    return out


def polytope_moments(P, max_degree):
    """Exact rational integrals of all monomials p^beta, |beta| <= max_degree.

    Simplex decomposition: fan over the vertex average (an interior rational
    point; any interior apex yields the same exact values).
    """
    if max_degree < 0:
        raise PolytopeError("max_degree must be nonnegative")
    out = {}
    if P.dim == 1:
        (a,), (b,) = P.vertices
        pieces = [((Fraction(a),), ((Fraction(b - a),),))]
    else:
        k = len(P.vertices)
        apex = tuple(Fraction(sum(v[j] for v in P.vertices), k) for j in range(2))
        pieces = []
        for i in range(k):
            v, w = P.vertices[i], P.vertices[(i + 1) % k]
            e1 = tuple(Fraction(v[j]) - apex[j] for j in range(2))
            e2 = tuple(Fraction(w[j]) - apex[j] for j in range(2))
            pieces.append((apex, (e1, e2)))
    for w0, edges in pieces:
        for beta, val in _simplex_moments(w0, edges, max_degree, P.dim).items():
            out[beta] = out.get(beta, Fraction(0)) + val
    return out


def volume(P):
    return polytope_moments(P, 0)[(0,) * P.dim]


def barycenter(P):
    mom = polytope_moments(P, 1)
    vol = mom[(0,) * P.dim]
    out = []
    for j in range(P.dim):
        beta = tuple(1 if k == j else 0 for k in range(P.dim))
        out.append(mom[beta] / vol)
    return tuple(out)


# --- Demazure roots -----------------------------------------------------------


def demazure_roots(P):
    """All lattice vectors pairing to -1 with exactly one facet normal, >= 0 with the rest.

    Root count + n is the dimension of the holomorphic automorphism algebra;
    the numerical kernel counts downstream are checked against it.
    """
    lo = [min(v[j] for v in P.vertices) for j in range(P.dim)]
    hi = [max(v[j] for v in P.vertices) for j in range(P.dim)]
    roots = []
    for alpha in itertools.product(*(range(lo[j], hi[j] + 1) for j in range(P.dim))):
        if all(c == 0 for c in alpha):
            continue
        hit = -1
        ok = True
        for idx, (normal, _off) in enumerate(P.facets):
            s = _dot(alpha, normal)
            if s == -1:
                if hit >= 0:
                    ok = False
                    break
                hit = idx
            elif s < 0:
                ok = False
                break
        if ok and hit >= 0:
            roots.append(DemazureRoot(weight=alpha, facet_index=hit))
    roots.sort(key=lambda r: r.weight)
    return roots


def dim_h(P):
    """Dimension of the holomorphic vector field algebra: n + #roots."""
    return P.dim + len(demazure_roots(P))


# --- extremal affine function -------------------------------------------------


def _interior_lattice_point(P):
    lo = [min(v[j] for v in P.vertices) for j in range(P.dim)]
    hi = [max(v[j] for v in P.vertices) for j in range(P.dim)]
    pts = [
        p
        for p in itertools.product(*(range(lo[j] + 1, hi[j]) for j in range(P.dim)))
        if P.contains(p, strict=True)
    ]
    if len(pts) != 1:
        raise PolytopeError(
            f"expected a unique interior lattice point, found {len(pts)}: {pts}"
        )
    return pts[0]


def _solve_exact(A, b):
    # Gauss-Jordan over Fractions; A is small and symmetric positive definite.
    n = len(b)
    M = [row[:] + [b[i]] for i, row in enumerate(A)]
    for col in range(n):
        piv = next((r for r in range(col, n) if M[r][col] != 0), None)
        if piv is None:
            raise PolytopeError("singular Gram matrix; polytope degenerate")
        M[col], M[piv] = M[piv], M[col]
        pv = M[col][col]
        M[col] = [x / pv for x in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col]
                M[r] = [x - f * y for x, y in zip(M[r], M[col])]
    return [M[r][n] for r in range(n)]


def extremal_affine(P):
    """The affine function ell whose L^2(P) pairings realize the Ding pairing.

    Gram system over {1, p_1, .., p_n}: <ell, a>_{L^2(P)} must equal
    D(a) = integral of a over P minus a(t0) vol(P), where t0 is the unique
    interior lattice point (the canonical normalization point; the origin for
    a reflexive polytope in standard position). Using t0 rather than the raw
    origin makes ell equivariant under lattice translations of the vertex data.
    """
    n = P.dim
    mom = polytope_moments(P, 2)
    t0 = _interior_lattice_point(P)
    vol = mom[(0,) * n]

    def e(j):
        return tuple(1 if k == j else 0 for k in range(n))

    A = [[Fraction(0)] * (n + 1) for _ in range(n + 1)]
    A[0][0] = vol
    for j in range(n):
        A[0][j + 1] = A[j + 1][0] = mom[e(j)]
        for k in range(n):
            A[j + 1][k + 1] = mom[tuple(a + b for a, b in zip(e(j), e(k)))]
    rhs = [Fraction(0)]
    for j in range(n):
        rhs.append(mom[e(j)] - Fraction(t0[j]) * vol)

    sol = _solve_exact(A, rhs)
    ell = AffineFunction(constant=sol[0], gradient=tuple(sol[1:]))
    bc = tuple(mom[e(j)] / vol for j in range(n))
    margin = 1 - max(ell(v) for v in P.vertices)
    predicted = {
        r.weight: MATSUSHIMA_SIGN * _dot(ell.gradient, r.weight)
        for r in demazure_roots(P)
    }
    return ExtremalData(
        ell=ell, barycenter=bc, obstruction_margin=margin, predicted_lambdas=predicted
    )


def ell_l2_norm_sq(P, ell=None):
    """Exact integral of ell^2 over P; the energy lower bound."""
    if ell is None:
        ell = extremal_affine(P).ell
    n = P.dim
    mom = polytope_moments(P, 2)

    def e(j):
        return tuple(1 if k == j else 0 for k in range(n))

    total = ell.constant**2 * mom[(0,) * n]
    for j in range(n):
        total += 2 * ell.constant * ell.gradient[j] * mom[e(j)]
        for k in range(n):
            total += ell.gradient[j] * ell.gradient[k] * mom[
                tuple(a + b for a, b in zip(e(j), e(k)))
            ]
    return total


def ding_pairing_exact(P, a):
    """Closed form of the Ding pairing: vol(P) <b_a, barycenter - t0>."""
    t0 = _interior_lattice_point(P)
    bc = barycenter(P)
    vol = volume(P)
    return vol * sum(b * (c - t) for b, c, t in zip(a.gradient, bc, t0))
