"""Spectral questions about a metric state: generalized eigensolves, kernel
counts per weight sector, and the eigenvalue decomposition report.

Two measured facts shape the implementation. The assembled sector matrices
carry second-difference rows whose scale grows like the inverse metric toward
the box edge while the quadrature mass collapses there; symmetrizing the full
mass-weighted pencil couples those weakly constrained edge rows into every
eigenvector at order-one strength, and the kernel does not survive (at the
round 1025-node fixture the symmetrized pencil has no eigenvalue within 1e-2
of zero although the exact kernel is two-dimensional). At the same time the
low-lying eigenfunctions are tame objects: polynomials in the moment
coordinates, times an explicit facet envelope in nonzero sectors. Kernel and
gap extraction therefore run as a Rayleigh-Ritz projection onto that resolved
family. On the subspace the symmetrization defect is bounded by the stencil
error on resolved fields, the projected pencil is small and well scaled, and
a dense symmetric solve is reliable at every grid this package builds.

All Ritz pairings run against the quadrature mass with the boundary shell
zeroed out. Near the box walls the inverse metric amplifies stencil error on
any field that still varies there, by nine orders of magnitude on the wider
fixtures, while the honest mass of those nodes is negligible; paired at full
mass those rows inject order-one garbage into the projected matrices. The
trusted-region pairing is the measure-level form of the boundary-artifact
exclusion the counting rules demand, and on the resolved family it changes
resolved eigenvalues only at the stencil error.

Counting rules: eigenvectors carrying more than half their mass in the outer
coordinate shell are boundary artifacts and never counted; at weight zero the
constant function is removed from the reported count; Ritz values within a
factor-ten window of the threshold make the count ambiguous and a range is
reported alongside the point count.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.polynomial import chebyshev

from . import sector_ops, toric
from .constants import (
    BOUNDARY_MASS_LIMIT,
    CERTIFICATION_GRAD_TOL,
    KERNEL_THRESHOLD,
    MATSUSHIMA_SIGN,
)

EIGEN_RESIDUAL_TOL = 1e-8
DENSE_NODE_CUTOFF = 4200
TRIAL_DEGREE = {1: 24, 2: 14}
AMBIGUITY_WINDOW = 10.0


class SpectraError(ValueError):
    pass


# --- generalized eigensolve ------------------------------------------------


@dataclass(frozen=True)
class EigenResult:
    """Eigenpairs of a symmetric-definite pencil, ascending, M-normalized."""

    values: np.ndarray
    vectors: np.ndarray            # columns v with v^T M v = 1
    residuals: np.ndarray          # ||A v - lambda M v|| / ||M v||, honest
    floors: np.ndarray             # float evaluation floor per pair


def _row_scale(A):
    if sp.issparse(A):
        return float(np.abs(A).sum(axis=1).max())
    return float(np.abs(np.asarray(A)).sum(axis=1).max())


def _fix_sign(v):
    lead = np.argmax(np.abs(v))
    return -v if v[lead] < 0 else v


def eigensolve(A, M, k, tol=EIGEN_RESIDUAL_TOL):
    """k smallest eigenpairs of the pencil A v = lambda M v.

    A must be symmetric against the diagonal mass M up to discretization
    error. The solve runs on the congruent matrix M^{-1/2} A M^{-1/2},
    explicitly symmetrized, so a backward stable solver delivers absolute
    eigenvalue error on the order of machine epsilon times the matrix scale.
    The residual reported per pair is the plain two-norm ratio evaluated with
    the original A. In floating point that ratio cannot fall below roughly
    eps times the largest row scale of A over ||M v|| no matter the
    algorithm, so pairs are accepted against max(tol, evaluation floor) and
    a breakdown above that raises with the achieved residual.
    """
    M = np.asarray(M, dtype=float).ravel()
    n = M.size
    if np.any(M <= 0):
        raise SpectraError("mass must be strictly positive")
    if not 1 <= k <= n:
        raise SpectraError(f"k={k} outside the pencil dimension {n}")
    d = np.sqrt(M)
    if n <= DENSE_NODE_CUTOFF:
        Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
        C = Ad / np.outer(d, d)
        C = 0.5 * (C + C.T)
        vals, vecs = sla.eigh(C)
        vals, vecs = vals[:k], vecs[:, :k]
    else:
        # large problems: same congruence, iterated; only sensible for well
        # scaled inputs, the sector pipelines never come through here
        if k > n - 1:
            raise SpectraError(f"k={k} too large for the iterative path ({n} nodes)")
        Dinv = sp.diags(1.0 / d)
        C = Dinv @ (A if sp.issparse(A) else sp.csr_matrix(A)) @ Dinv
        C = (0.5 * (C + C.T)).tocsc()
        v0 = np.full(n, 1.0 / np.sqrt(n))
        vals, vecs = spla.eigsh(C, k=k, which="SA", v0=v0, maxiter=50 * n)
        order = np.argsort(vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]

    scale = _row_scale(A)
    eps = np.finfo(float).eps
    vectors = np.empty((n, k))
    residuals = np.empty(k)
    floors = np.empty(k)
    for j in range(k):
        v = vecs[:, j] / d
        v = _fix_sign(v / np.sqrt(np.sum(M * v * v)))
        mv = M * v
        nmv = float(np.linalg.norm(mv))
        r = float(np.linalg.norm(A @ v - vals[j] * mv)) / nmv
        floor = 64.0 * eps * scale * float(np.linalg.norm(v)) / nmv
        if r > max(tol, floor):
            raise SpectraError(
                f"eigensolve breakdown at eigenvalue {vals[j]:.6e}: residual "
                f"{r:.3e} exceeds tol {tol:.1e} and evaluation floor {floor:.3e}")
        vectors[:, j], residuals[j], floors[j] = v, r, floor
    return EigenResult(values=np.asarray(vals, dtype=float), vectors=vectors,
                       residuals=residuals, floors=floors)


# --- resolved trial families -------------------------------------------------


def _chebyshev_products(mu_hat, degree):
    # ascending total degree, then lexicographic: deterministic, and the
    # leading columns are exactly the affine moment functions
    cols = []
    if len(mu_hat) == 1:
        for a in range(degree + 1):
            cols.append(chebyshev.chebval(mu_hat[0], [0.0] * a + [1.0]))
        return cols
    for total in range(degree + 1):
        for a in range(total + 1):
            Ta = chebyshev.chebval(mu_hat[0], [0.0] * a + [1.0])
            Tb = chebyshev.chebval(mu_hat[1], [0.0] * (total - a) + [1.0])
            cols.append(Ta * Tb)
    return cols


def _sector_envelope(op):
    """Shared decay profile of the weight-m trial functions.

    e^{<m, x>} alone is unbounded on the box. Every facet whose pairing with
    the weight is negative contributes its affine facet function evaluated in
    the moment image, and e^{<m,x>} prod_F ell_F(mu)^{-<m, n_F>} is bounded
    with the decay of the expected kernel elements, which are exactly this
    envelope times affine functions of the moment coordinates. Assembled in
    log space so no factor overflows on wide boxes.
    """
    grid = op.grid
    m = op.weight
    logenv = np.zeros(op.size)
    for j, mj in enumerate(m):
        if mj:
            logenv = logenv + mj * np.ravel(np.broadcast_to(grid.coords[j], grid.shape))
    for normal, offset in op.polytope.facets:
        power = -int(np.dot(np.asarray(normal, dtype=float), np.asarray(m, dtype=float)))
        if power > 0:
            ell = float(offset) + np.zeros(op.size)
            for j, nj in enumerate(normal):
                ell = ell + nj * op.moment[j]
            logenv = logenv + power * np.log(np.clip(ell, 1e-300, None))
    return np.exp(logenv - logenv.max())


def trusted_mass(grid, mass):
    """Ritz pairing measure: the quadrature mass with the shell zeroed."""
    keep = ~np.ravel(grid.boundary_shell_mask())
    return np.where(keep, np.asarray(mass, dtype=float).ravel(), 0.0)


def _mass_orthonormalize(cols, mass, drop_tol=1e-8):
    # drop test against max(incoming norm, 1): a column arriving already
    # dead, e.g. the constant after an external projection, must not pass a
    # purely relative test, since its residue points back along the very
    # direction that was projected off
    kept = []
    for col in cols:
        v = np.array(col, dtype=float)
        before = np.sqrt(np.sum(mass * v * v))
        for _ in range(2):
            for q in kept:
                v = v - q * np.sum(mass * q * v)
        nrm = np.sqrt(np.sum(mass * v * v))
        if nrm > drop_tol * max(before, 1.0):
            kept.append(v / nrm)
    if not kept:
        raise SpectraError("trial family collapsed under orthonormalization")
    return np.stack(kept, axis=1)


def trial_basis(op, degree=None, mass=None):
    """Mass-orthonormal resolved trial family for one sector.

    Chebyshev products in the moment coordinates, rescaled per axis to the
    moment image of the polytope; nonzero weights multiply in the facet
    envelope. The family contains the constants, the moment coordinates and
    the expected kernel elements of every sector, so Rayleigh-Ritz on it
    resolves kernels and low eigenvalues without ever factorizing the
    edge-dominated full matrices.
    """
    grid = op.grid
    if degree is None:
        degree = TRIAL_DEGREE[grid.dim]
    mass = trusted_mass(grid, op.mass) if mass is None \
        else np.asarray(mass, dtype=float).ravel()
    verts = np.asarray(op.polytope.vertices, dtype=float).reshape(-1, grid.dim)
    mu_hat = []
    for j in range(grid.dim):
        lo, hi = verts[:, j].min(), verts[:, j].max()
        mu_hat.append((2.0 * op.moment[j] - lo - hi) / (hi - lo))
    cols = _chebyshev_products(mu_hat, degree)
    if any(op.weight):
        env = _sector_envelope(op)
        cols = [c * env for c in cols]
    return _mass_orthonormalize(cols, mass)


def rayleigh_ritz(apply_fn, mass, basis):
    """Eigenpairs of the mass-symmetrized operator restricted to a trial span.

    Returns Ritz values ascending, full-grid vectors (columns, mass
    orthonormal) and the relative symmetrization defect of the projected
    pencil; the defect bounds the bias the symmetrization introduced, and on
    resolved families it sits at the stencil error instead of the order-one
    level of the full-matrix version.
    """
    AB = apply_fn(basis)
    S = basis.T @ (mass[:, None] * AB)
    scale = float(np.abs(S).max())
    defect = float(np.abs(S - S.T).max()) / scale if scale > 0 else 0.0
    S = 0.5 * (S + S.T)
    res = eigensolve(S, np.ones(S.shape[0]), S.shape[0])
    return res.values, basis @ res.vectors, defect


# --- kernel extraction -------------------------------------------------------


@dataclass(frozen=True)
class KernelResult:
    weight: tuple
    basis: np.ndarray              # columns, mass-orthonormal
    eigenvalues: np.ndarray        # Ritz values of the counted kernel vectors
    count: int
    count_range: tuple             # (strict, loose) under the ambiguity window
    ambiguous: bool
    boundary_excluded: int
    threshold: float
    ritz_defect: float


def _drop_constant(vecs, vals, mass):
    """Remove the constant direction from a weight-zero kernel cluster.

    Constants are exact kernel elements by construction and always show up;
    the reported count excludes them. Degenerate clusters return an arbitrary
    rotation of the eigenspace, so the constant need not appear as its own
    column: the vector with the largest constant overlap is dropped and the
    direction projected off the survivors.
    """
    c = np.ones(vecs.shape[0]) / np.sqrt(np.sum(mass))
    overlaps = [abs(np.sum(mass * c * vecs[:, i])) for i in range(vecs.shape[1])]
    drop = int(np.argmax(overlaps))
    keep = [i for i in range(vecs.shape[1]) if i != drop]
    if not keep:
        return np.zeros((vecs.shape[0], 0)), np.zeros(0)
    cols = [vecs[:, i] - c * np.sum(mass * c * vecs[:, i]) for i in keep]
    return _mass_orthonormalize(cols, mass), vals[keep]


def kernel_of_L(op, threshold=KERNEL_THRESHOLD, degree=None):
    """Near-kernel of one sector operator, boundary artifacts excluded.

    Ritz values below the threshold in magnitude are kernel candidates;
    candidates holding more than BOUNDARY_MASS_LIMIT of their mass in the
    outer coordinate shell are discarded as truncation artifacts. At weight
    zero the constant is removed from the count. Values landing within a
    factor of AMBIGUITY_WINDOW of the threshold on either side flag the
    count as ambiguous and widen the reported range.
    """
    pair_mass = trusted_mass(op.grid, op.mass)
    basis = trial_basis(op, degree, mass=pair_mass)
    values, vectors, defect = rayleigh_ritz(op.apply, pair_mass, basis)
    absval = np.abs(values)

    shell = np.ravel(op.grid.boundary_shell_mask())
    boundary_excluded = 0
    kept_idx = []
    for i in np.nonzero(absval < threshold)[0]:
        v = vectors[:, i]
        if float(np.sum(op.mass[shell] * v[shell] ** 2)) > BOUNDARY_MASS_LIMIT:
            boundary_excluded += 1
        else:
            kept_idx.append(int(i))
    kern_vecs = vectors[:, kept_idx]
    kern_vals = values[kept_idx]

    if not any(op.weight) and kern_vecs.shape[1] > 0:
        kern_vecs, kern_vals = _drop_constant(kern_vecs, kern_vals, pair_mass)

    count = kern_vecs.shape[1]
    strict = int(np.sum(np.abs(kern_vals) < threshold / AMBIGUITY_WINDOW))
    outside_near = int(np.sum((absval >= threshold) & (absval < threshold * AMBIGUITY_WINDOW)))
    ambiguous = outside_near > 0 or strict < count
    return KernelResult(
        weight=op.weight,
        basis=kern_vecs,
        eigenvalues=kern_vals,
        count=count,
        count_range=(strict, count + outside_near),
        ambiguous=ambiguous,
        boundary_excluded=boundary_excluded,
        threshold=threshold,
        ritz_defect=defect,
    )


# --- spectral gap of the stripped operator -----------------------------------


@dataclass(frozen=True)
class GapReport:
    gap: float
    multiplicity: int
    values: tuple
    ritz_defect: float


def spectral_gap(state, degree=None, tol=1e-3, keep=10):
    """Smallest nonzero eigenvalue of the stripped weight-zero operator.

    The pencil is the de-weighted sector operator against the e^f mass. The
    constant direction, its exact kernel, is projected off the trial family
    before the Ritz solve, so the first Ritz value is the gap itself; the
    multiplicity counts Ritz values within tol of it.
    """
    m0 = (0,) * state.grid.dim
    A, mass_f = sector_ops.weighted_laplacian(state, m0)
    op = sector_ops.assemble_sector(state, m0)
    pair_mass = trusted_mass(state.grid, mass_f)
    basis = trial_basis(op, degree, mass=pair_mass)
    c = np.ones(op.size) / np.sqrt(np.sum(pair_mass))
    cols = [basis[:, j] - c * np.sum(pair_mass * c * basis[:, j])
            for j in range(basis.shape[1])]
    basis = _mass_orthonormalize(cols, pair_mass)
    values, _, defect = rayleigh_ritz(lambda X: A @ X, pair_mass, basis)
    gap = float(values[0])
    multiplicity = int(np.sum(np.abs(values - gap) <= tol))
    return GapReport(gap=gap, multiplicity=multiplicity,
                     values=tuple(float(v) for v in values[:keep]),
                     ritz_defect=defect)


# --- decomposition report ----------------------------------------------------


@dataclass(frozen=True)
class DecompositionReport:
    """Kernel dimensions by weight and the eigenvalue ladder on the kernel."""

    kernel_dims: dict
    kernel_ranges: dict
    h_dim: int
    h_dim_predicted: int
    eigen_pairs: tuple             # merged (lambda, multiplicity), ascending
    lambdas_by_weight: dict
    predicted: dict                # weight -> sign * <b_ell, weight>
    sign: int
    grad_norm: float
    certified: bool
    flags: tuple

    @property
    def scale(self):
        top = max((abs(l) for l, _ in self.eigen_pairs), default=0.0)
        return max(1.0, top)


def _merge_pairs(values, atol):
    pairs = []
    for v in sorted(values):
        if pairs and abs(v - pairs[-1][0]) <= atol:
            lam, mult = pairs[-1]
            pairs[-1] = ((lam * mult + v) / (mult + 1), mult + 1)
        else:
            pairs.append((v, 1))
    return tuple((float(l), int(m)) for l, m in pairs)


def matsushima_decomposition(state, sectors=None, threshold=KERNEL_THRESHOLD,
                             sign=MATSUSHIMA_SIGN, degree=None):
    """Split the holomorphy kernel by weight and read off the eigenvalue
    ladder of the conjugate operator restricted to it.

    Per sector: extract the kernel, restrict the opposite-pairing operator
    through the mass projection, and take its eigenvalues; results merge
    across sectors into (lambda, multiplicity) pairs. The affine prediction
    from the extremal vector is attached for comparison, with the global
    sign convention frozen in constants. Certification requires a small
    gradient norm and no ambiguity or invariant flags.
    """
    dim = state.grid.dim
    ext = toric.extremal_affine(state.polytope)
    if sectors is None:
        sectors = [(0,) * dim] + sorted(tuple(m) for m in ext.predicted_lambdas)
    grad_norm = sector_ops.first_variation_norm(state)

    flags = []
    kernel_dims, kernel_ranges, lambdas_by_weight = {}, {}, {}
    collected = []
    for m in sectors:
        op = sector_ops.assemble_sector(state, m)
        kern = kernel_of_L(op, threshold=threshold, degree=degree)
        kernel_dims[kern.weight] = kern.count
        kernel_ranges[kern.weight] = kern.count_range
        if kern.ambiguous:
            flags.append(f"ambiguous kernel count in sector {kern.weight}")
        if kern.count == 0:
            lambdas_by_weight[kern.weight] = ()
            continue
        B = kern.basis
        pair_mass = trusted_mass(op.grid, op.mass)
        R = B.T @ (pair_mass[:, None] * op.apply_bar(B))
        vals = np.linalg.eigvals(R)
        scale = max(1.0, float(np.abs(vals).max()))
        if float(np.abs(vals.imag).max()) > 1e-6 * scale:
            flags.append(f"non-real restricted eigenvalue in sector {kern.weight}")
        lam = np.sort(vals.real)
        if lam[0] < -1e-6 * scale:
            flags.append(f"negative restricted eigenvalue {lam[0]:.3e} "
                         f"in sector {kern.weight}")
        lambdas_by_weight[kern.weight] = tuple(float(v) for v in lam)
        collected.extend(lam)

    h_dim = int(sum(kernel_dims.values()))
    scale = max(1.0, max((abs(v) for v in collected), default=0.0))
    return DecompositionReport(
        kernel_dims=kernel_dims,
        kernel_ranges=kernel_ranges,
        h_dim=h_dim,
        h_dim_predicted=int(toric.dim_h(state.polytope)),
        eigen_pairs=_merge_pairs(collected, atol=1e-4 * scale),
        lambdas_by_weight=lambdas_by_weight,
        predicted={tuple(m): float(sign) * float(v)
                   for m, v in ext.predicted_lambdas.items()},
        sign=int(sign),
        grad_norm=grad_norm,
        certified=bool(grad_norm <= CERTIFICATION_GRAD_TOL and not flags),
        flags=tuple(flags),
    )


def hessian_ritz_values(state, m, degree=None):
    """Ritz spectrum of the sector Hessian form on the resolved family.

    Both factors L u and Lbar w are formed on full grid vectors and paired
    over the trusted mass; composing nothing keeps the kernel floor at the
    inner application's residual. Returns ascending eigenvalues of the
    projected pencil. The smallest one is the positivity diagnostic quoted
    by criticality reports.
    """
    op = sector_ops.assemble_sector(state, m)
    B = trial_basis(op, degree)
    pm = trusted_mass(op.grid, op.mass)
    LB = np.column_stack([op.apply(B[:, j]) for j in range(B.shape[1])])
    LbB = np.column_stack([op.apply_bar(B[:, j]) for j in range(B.shape[1])])
    H = 2.0 * np.real(np.conj(LB).T @ (pm[:, None] * LbB))
    G = np.real(np.conj(B).T @ (pm[:, None] * B))
    vals = sla.eigh(0.5 * (H + H.T), 0.5 * (G + G.T), eigvals_only=True)
    return np.asarray(vals)
