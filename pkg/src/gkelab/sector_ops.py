"""Weight-sector reduction of the stability operators on a toric metric state.

On a torus-invariant metric the relevant operators preserve each Fourier
weight: a test function v(x) e^{i<m, theta>} stays in its sector, with theta
derivatives replaced by weight factors. After the reduction every coefficient
is real, so sectors are assembled as real sparse matrices acting on nodal
profiles v(x). The two operators of interest differ only in the sign with
which the weight enters the first-order pairing against the Ricci potential
gradient; their difference is therefore a multiplication operator, an exact
matrix-level identity that bracket_identity_check certifies at any state.

Sector conventions, with Phi^{jk} the inverse Hessian of phi and f the Ricci
potential of the state:

    twisted Laplacian   D_m v = (1/2) Phi^{jk} (v_{,jk} - m_j m_k v)
    descent pairing     (1/2) Phi^{jk} f_{,j} (v_{,k} - m_k v)
    L_m v  = e^{f} (-D_m v - (1/2) Phi^{jk} f_{,j} (v_{,k} - m_k v) - v + mean)
    Lbar_m = same with the opposite weight sign in the pairing

where the mean term (1/vol) integral of v e^{f} dmu exists only at m = 0 (the
theta integration kills it elsewhere) and is carried as an explicit rank-one
correction so the sparse part stays sparse. Both operators are assembled
independently from their own pairing signs; nothing below derives one from
the other, which is what keeps the bracket and commutator checks meaningful.

L_m is self-adjoint for the det-weighted product <<u, v>> and the stripped
operator A_m = -D_m - pairing is self-adjoint and nonnegative for the
e^{f}-weighted product; integration by parts uses that det Phi^{jk} has
divergence-free rows, so the discrete versions hold only to stencil accuracy
and the residuals here quantify exactly that.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import kahler_state, mesh, toric
from .constants import (
    BRACKET_SIGN,
    CERTIFICATION_GRAD_TOL,
    DEFAULT_SEED,
    MAX_SECTOR_WEIGHT,
)


class SectorError(ValueError):
    pass


# --- assembly ----------------------------------------------------------------


def _lifted_derivatives(grid, accuracy):
    """First and second derivative matrices on the flattened grid, per axis."""
    D1 = sp.csr_matrix(grid.diff_matrix(1, accuracy))
    D2 = sp.csr_matrix(grid.diff_matrix(2, accuracy))
    if grid.dim == 1:
        return [(D1, D2)]
    eye = sp.identity(grid.N, format="csr")
    return [
        (sp.kron(D1, eye, format="csr"), sp.kron(D2, eye, format="csr")),
        (sp.kron(eye, D1, format="csr"), sp.kron(eye, D2, format="csr")),
    ]


def _coefficient_fields(state):
    """Inverse-Hessian entries, f gradient, and their contraction, flattened."""
    fgrad = mesh.gradient(state.grid, state.f, state.accuracy)
    if state.grid.dim == 1:
        (ixx,) = state.inv_hess
        inv = ((ixx.ravel(),),)
        descent = (inv[0][0] * fgrad[0].ravel(),)
    else:
        ixx, ixy, iyy = (a.ravel() for a in state.inv_hess)
        inv = ((ixx, ixy), (ixy, iyy))
        fx, fy = (a.ravel() for a in fgrad)
        descent = (ixx * fx + ixy * fy, ixy * fx + iyy * fy)
    return inv, descent


def _validated_weight(state, m):
    if np.isscalar(m):
        m = (m,)
    m = tuple(int(c) for c in m)
    if len(m) != state.grid.dim:
        raise SectorError(f"weight {m} has wrong length for dim {state.grid.dim}")
    if max(abs(c) for c in m) > MAX_SECTOR_WEIGHT:
        raise SectorError(f"weight {m} exceeds the sector limit {MAX_SECTOR_WEIGHT}")
    return m


@dataclass(frozen=True)
class SectorOperator:
    """Assembled sector: sparse parts plus the explicit m = 0 rank-one mean."""

    weight: tuple
    L: sp.csr_matrix
    Lbar: sp.csr_matrix
    mean_left: np.ndarray          # None unless weight == 0
    mean_right: np.ndarray
    mass: np.ndarray               # diagonal of <<.,.>>, w * det
    mass_f: np.ndarray             # diagonal of the e^f-weighted product
    ef: np.ndarray
    pair_cross: np.ndarray         # Phi^{jk} f_{,j} m_k, flattened
    volume: float
    state_ref: str
    shape: tuple
    grid: object = None            # mesh.Grid, for boundary-shell diagnostics
    polytope: object = None
    moment: tuple = ()             # nabla phi per axis, flattened; the trial
                                   # bases for kernel extraction live on it

    @property
    def size(self):
        return self.L.shape[0]

    @property
    def has_mean(self):
        return self.mean_left is not None

    def _rank_one(self, flat):
        if self.mean_left is None:
            return 0.0
        return self.mean_left[:, None] * (self.mean_right @ flat) if flat.ndim == 2 \
            else self.mean_left * (self.mean_right @ flat)

    def apply(self, v):
        flat = np.asarray(v).reshape(self.size, -1) if np.ndim(v) > 1 else np.ravel(v)
        return self.L @ flat + self._rank_one(flat)

    def apply_bar(self, v):
        flat = np.asarray(v).reshape(self.size, -1) if np.ndim(v) > 1 else np.ravel(v)
        return self.Lbar @ flat + self._rank_one(flat)

    def dense(self, which="L"):
        out = (self.L if which == "L" else self.Lbar).toarray()
        if self.mean_left is not None:
            out += np.outer(self.mean_left, self.mean_right)
        return out


def assemble_sector(state, m):
    """Build the weight-m sector operators of a metric state.

    States are immutable with all caches built at construction, so f is
    always current; the historical staleness failure mode cannot occur here.
    """
    m = _validated_weight(state, m)
    grid = state.grid
    mats = _lifted_derivatives(grid, state.accuracy)
    inv, descent = _coefficient_fields(state)
    n = grid.size

    second = sp.csr_matrix((n, n))
    for j in range(grid.dim):
        for k in range(grid.dim):
            if j == k:
                Djk = mats[j][1]
            elif k > j:
                Djk = mats[j][0] @ mats[k][0]   # matches hessian_entries' composition
            else:
                continue
            coeff = inv[j][k] if k < len(inv[j]) else inv[k][j]
            factor = 1.0 if j == k else 2.0
            second = second + sp.diags(-0.5 * factor * coeff) @ Djk

    first = sp.csr_matrix((n, n))
    for k in range(grid.dim):
        first = first + sp.diags(-0.5 * descent[k]) @ mats[k][0]

    quad = np.zeros(n)
    for j in range(grid.dim):
        for k in range(grid.dim):
            coeff = inv[j][k] if k < len(inv[j]) else inv[k][j]
            quad = quad + 0.5 * m[j] * m[k] * coeff
    cross = np.zeros(n)
    for k in range(grid.dim):
        cross = cross + descent[k] * m[k]

    ef = state.ef.ravel()
    eye = sp.identity(n, format="csr")
    base = second + first + sp.diags(quad) - eye
    Ef = sp.diags(ef)
    L = (Ef @ (base + sp.diags(0.5 * cross))).tocsr()
    Lbar = (Ef @ (base - sp.diags(0.5 * cross))).tocsr()

    mass = state.mass.ravel()
    mass_f = state.mass_f.ravel()
    vol = float(toric.volume(state.polytope))
    is_zero = all(c == 0 for c in m)
    # the measured mass, not vol, so the mean is an exact projector and
    # constants stay in Ker L_0 despite the box-truncated quadrature
    return SectorOperator(
        weight=m,
        L=L,
        Lbar=Lbar,
        mean_left=ef.copy() if is_zero else None,
        mean_right=mass_f / float(np.sum(mass_f)) if is_zero else None,
        mass=mass,
        mass_f=mass_f,
        ef=ef,
        pair_cross=cross,
        volume=vol,
        state_ref=state.state_ref,
        shape=grid.shape,
        grid=grid,
        polytope=state.polytope,
        moment=tuple(np.ravel(c) for c in mesh.gradient(grid, state.phi, state.accuracy)),
    )


def weighted_laplacian(state, m):
    """The stripped operator A_m = -D_m - descent pairing, with its measure.

    Self-adjoint and nonnegative against mass_f; its spectral gap at one is
    the quantity the eigenvalue floor checks are about. Returned as the
    (matrix, mass_f diagonal) pair the eigensolver consumes.
    """
    op = assemble_sector(state, m)
    n = op.size
    # L = e^f (A - I + mean): peel the multiplier and the shift back off
    inv_ef = sp.diags(1.0 / op.ef)
    A = (inv_ef @ op.L + sp.identity(n, format="csr")).tocsr()
    return A, op.mass_f


# --- gradient and Hessian ------------------------------------------------------


def first_variation(state):
    """Riesz representative of the energy differential: g = 2 L_0(e^f)."""
    op = assemble_sector(state, (0,) * state.grid.dim)
    return (2.0 * op.apply(op.ef)).reshape(state.grid.shape)


def first_variation_norm(state):
    """Certification norm of the energy gradient, boundary shell excluded.

    The shell rows divide by quadrature mass that underflows toward the
    walls while the inverse metric amplifies rounding of the log
    determinant; what they contribute is evaluation noise, not gradient.
    Criticality thresholds refer to this trusted-region norm.
    """
    g = first_variation(state)
    keep = ~state.grid.boundary_shell_mask()
    return float(np.sqrt(np.sum((state.mass * g * g)[keep])))


@dataclass(frozen=True)
class HessianForm:
    """Second variation in one sector, H = 2 L Lbar taken with mass adjoints.

    The quadratic form is evaluated as 2 (L u)^T M (Lbar w), which agrees
    with pairing 2 L Lbar u against w by self-adjointness of L in M but
    never applies a second unbounded operator to the first one's output.
    Composing the matrices literally would amplify the kernel residual of
    the inner application by the outer one's 1/h^2 entries; kernel
    directions then report form values thousands of times their true size.
    At m = 0 the two factors coincide and the form is exactly positive
    semi-definite with exact zeros on Ker L.
    """

    weight: tuple
    op: SectorOperator
    grad_norm: float
    certified: bool
    commutator: float

    def form(self, u, w):
        lu = self.op.apply(np.ravel(u))
        lbw = self.op.apply_bar(np.ravel(w))
        return 2.0 * float(np.real(np.sum(self.op.mass * np.conj(lu) * lbw)))

    def matvec(self, v):
        lbv = self.op.apply_bar(np.ravel(v))
        return 2.0 * (self.op.L.T @ (self.op.mass * lbv)) / self.op.mass

    def dense(self, node_limit=6000):
        """Form matrix F with u^T F w = form(u, w); pair with mass for spectra."""
        if self.op.size > node_limit:
            raise SectorError(f"dense Hessian refused at {self.op.size} nodes")
        Ld = self.op.dense("L")
        Lbd = self.op.dense("Lbar")
        return 2.0 * Ld.T @ (self.op.mass[:, None] * Lbd)


def hessian_form(state, m, grad_norm=None, with_commutator=True):
    """Assemble H_m = 2 L_m Lbar_m; flagged non-certified away from critical points."""
    op = assemble_sector(state, m)
    if grad_norm is None:
        grad_norm = first_variation_norm(state)
    comm = commutator_residual(op, probe_basis(state)) if with_commutator else float("nan")
    return HessianForm(
        weight=op.weight,
        op=op,
        grad_norm=grad_norm,
        certified=grad_norm <= CERTIFICATION_GRAD_TOL,
        commutator=comm,
    )


# --- operator identities ---------------------------------------------------------
#
# Every residual below is evaluated on a seeded batch of density-tapered smooth
# directions rather than on raw matrix norms. The stencil matrices are not
# summation-by-parts operators: entrywise, M L - (M L)^T carries commutators of
# coefficient diagonals with stencils, which are O(coefficient gradient / h)
# regardless of how accurate the discretization is. Those entries cancel when
# the matrices act on resolved functions, so the meaningful statement of each
# identity is its restriction to the subspace the grid can represent.


def probe_basis(state, count=24, seed=DEFAULT_SEED):
    """Orthonormal (in <<.,.>>) basis of tapered smooth directions, (n, k)."""
    raw = kahler_state.tapered_probes(state, count, seed)
    mass = state.mass.ravel()
    basis = []
    for psi in raw:
        v = psi.ravel().copy()
        for b in basis:
            v -= np.sum(mass * b * v) * b
        nrm = np.sqrt(np.sum(mass * v * v))
        if nrm > 1e-10:
            basis.append(v / nrm)
    if not basis:
        raise SectorError("no independent probes survived orthonormalization")
    return np.stack(basis, axis=1)


def _batch_m_norm(op, cols):
    return float(np.sqrt(np.sum(op.mass[:, None] * cols * cols)))


def commutator_residual(op, basis):
    """Relative size of L Lbar - Lbar L on the resolved subspace.

    Frobenius norm of the basis-projected commutator over that of the
    projected product; the basis columns are <<.,.>>-orthonormal so the
    projection is a compression, not a change of metric.
    """
    lb = op.apply(op.apply_bar(basis))
    bl = op.apply_bar(op.apply(basis))
    weighted = op.mass[:, None] * basis
    comm = weighted.T @ (lb - bl)
    prod = weighted.T @ lb
    den = np.linalg.norm(prod)
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(comm) / den)


def bracket_identity_check(op, basis, sign=None):
    """Residual of (Lbar - L) against the predicted multiplication operator.

    The difference must equal multiplication by sign * e^{f} Phi^{jk} f_{,j}
    m_k; the identity is algebraic, holding at every metric. The residual is
    measured relative to the larger of the multiplication's own action and
    the sector operators' action, so states where both sides vanish (any
    m = 0 sector, any constant-f metric) report zero instead of noise ratios.
    """
    sign = BRACKET_SIGN if sign is None else float(sign)
    predicted = (sign * op.ef * op.pair_cross)[:, None] * basis
    diff = op.apply_bar(basis) - op.apply(basis) - predicted
    op_scale = max(_batch_m_norm(op, op.apply(basis)),
                   _batch_m_norm(op, op.apply_bar(basis)))
    den = max(_batch_m_norm(op, predicted), op_scale)
    if den == 0.0:
        return 0.0
    return _batch_m_norm(op, diff) / den


def self_adjointness_residual(op, basis, which="L"):
    """Asymmetry of <<L u, v>> - <<u, L v>> over the probe basis, relative."""
    act = op.apply(basis) if which == "L" else op.apply_bar(basis)
    gram = basis.T @ (op.mass[:, None] * act)
    den = np.linalg.norm(gram)
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(gram - gram.T) / den)
