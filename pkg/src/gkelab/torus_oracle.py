"""Full-coordinate oracle for one-dimensional fans: no invariance assumed.

Everything else in this package reduces over the torus angle before it
discretizes. This module keeps the angle: potentials live on the full
(x, theta) grid, the density is the genuine two-dimensional one, and energy
differences are taken by brute force. Agreement between this backend and the
weight-sector machinery is the strongest evidence available that the sector
reduction, its factor bookkeeping, and the assembled Hessian forms mean what
they claim. The angle direction is periodic and uniform, so its derivatives
are taken spectrally; the x direction reuses the stencil matrices.

Deliberately n = 1 only. A full grid in two torus dimensions is
four-dimensional and outside desk scale, which is exactly why the reduced
backend exists.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import kahler_state, mesh, toric

THETA_POINTS = 64


class OracleError(ValueError):
    pass


def _theta_lap(arr, ntheta):
    """Second theta-derivative along axis 1, spectral on the periodic axis."""
    k = np.fft.rfftfreq(ntheta, d=1.0 / ntheta)
    return np.fft.irfft(-(k ** 2)[None, :] * np.fft.rfft(arr, axis=1),
                        n=ntheta, axis=1)


@dataclass(frozen=True)
class FullState:
    """Nodal potential on the (x, theta) box with its density and Ricci data."""

    polytope: toric.LatticePolytope
    xgrid: mesh.Grid
    ntheta: int
    accuracy: int
    phi: np.ndarray                # (Nx, ntheta)
    rho: np.ndarray                # phi_xx + phi_thetatheta, positive
    f: np.ndarray
    c_norm: float

    @property
    def node_measure(self):
        """Quadrature weight of dx dtheta/(2 pi) per node."""
        return self.xgrid.weights[:, None] / float(self.ntheta)


def make_full_state(P, xgrid, phi, accuracy=None):
    from .constants import DEFAULT_ACCURACY

    accuracy = DEFAULT_ACCURACY if accuracy is None else accuracy
    if P.dim != 1 or xgrid.dim != 1:
        raise OracleError("the full-torus oracle only exists for 1-d fans")
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] != xgrid.N:
        raise OracleError(f"phi must be (Nx, ntheta), got {phi.shape}")
    ntheta = phi.shape[1]
    if ntheta < 4 or ntheta % 2:
        raise OracleError(f"ntheta must be even and at least 4, got {ntheta}")

    D2 = sp.csr_matrix(xgrid.diff_matrix(2, accuracy))
    D1 = sp.csr_matrix(xgrid.diff_matrix(1, accuracy))
    rho = D2 @ phi + _theta_lap(phi, ntheta)
    if np.min(rho) <= 0.0:
        j, k = np.unravel_index(int(np.argmin(rho)), rho.shape)
        raise OracleError(
            f"density {rho[j, k]:.3e} <= 0 at x = {xgrid.axis[j]:.3f}, "
            f"theta node {k}; the perturbation is too large for this backend, "
            "retry with a smaller amplitude")

    # same normalization recipe as the invariant backend, per theta column,
    # so invariant data reproduces c to rounding
    moment = D1 @ phi
    vol = float(toric.volume(P))
    top = float(np.min(phi))
    shifted = phi - top
    box = float(np.sum(xgrid.weights[:, None] * np.exp(-2.0 * shifted)) / ntheta)
    tail = 0.0
    for k in range(ntheta):
        tail += kahler_state._face_tail_correction(
            xgrid, shifted[:, k], (moment[:, k],))
    tail /= ntheta
    c = float(np.log(vol) - (np.log(box + tail) - 2.0 * top))
    f = c - 2.0 * phi - np.log(rho)
    return FullState(polytope=P, xgrid=xgrid, ntheta=ntheta, accuracy=accuracy,
                     phi=phi, rho=rho, f=f, c_norm=c)


def from_invariant(state, ntheta=THETA_POINTS):
    """Embed an invariant metric state as a theta-constant full state."""
    phi = np.repeat(np.asarray(state.phi)[:, None], ntheta, axis=1)
    return make_full_state(state.polytope, state.grid, phi, state.accuracy)


def full_energy(fs):
    """The defect energy integral(1 - e^f)^2 rho dx dtheta/(2 pi)."""
    integrand = (1.0 - np.exp(fs.f)) ** 2 * fs.rho
    return float(np.sum(fs.node_measure * integrand))


def energy_gradient(fs):
    """dE/dphi per node, exact adjoint of the discrete energy.

    Differentiates the assembled expression, normalization constant
    included, rather than re-deriving the continuum gradient; the only
    dropped term is the phi-dependence of the face tail, which is bounded
    by the tail itself. Used to check that the flow direction of the full
    backend stays torus-invariant on invariant data.
    """
    W = fs.node_measure
    ef = np.exp(fs.f)
    G = (1.0 - ef) ** 2
    Gp = -2.0 * ef * (1.0 - ef)          # dG/df

    mu = W * np.exp(-2.0 * fs.phi)
    dc = 2.0 * np.sum(W * Gp * fs.rho) * (mu / float(np.sum(mu)))

    direct = -2.0 * W * Gp * fs.rho
    S = W * (G - Gp)
    D2 = sp.csr_matrix(fs.xgrid.diff_matrix(2, fs.accuracy))
    through_rho = D2.T @ S + _theta_lap(S, fs.ntheta)
    return dc + direct + through_rho


def full_fd_hessian(base, v, m, eps):
    """Second central energy difference along eps (v e^{i m theta} + conj).

    The base state is an invariant MetricState; the probe profile v may be
    complex. The displacement follows the half-step bookkeeping used by
    perturb: phi moves by (eps / 2)(v e^{i m theta} + conj), so the stored
    field changes by eps Re(v e^{i m theta}). The return value is the raw
    quotient; the factor between it and a sector Hessian form is part of
    what a caller verifies: the perturbation carries both the +m and -m
    Fourier lines, and at m = 0 the conjugate doubles the real amplitude.
    """
    if base.grid.dim != 1:
        raise OracleError("the full-torus oracle only exists for 1-d fans")
    if eps <= 0:
        raise OracleError(f"step must be positive, got {eps}")
    ntheta = THETA_POINTS
    theta = 2.0 * np.pi * np.arange(ntheta) / ntheta
    v = np.asarray(v).reshape(-1)
    wave = v[:, None] * np.exp(1j * int(m) * theta)[None, :]
    delta = eps * np.real(wave)

    phi0 = np.repeat(np.asarray(base.phi)[:, None], ntheta, axis=1)
    E0 = full_energy(make_full_state(base.polytope, base.grid, phi0, base.accuracy))
    Ep = full_energy(make_full_state(base.polytope, base.grid, phi0 + delta, base.accuracy))
    Em = full_energy(make_full_state(base.polytope, base.grid, phi0 - delta, base.accuracy))
    return (Ep - 2.0 * E0 + Em) / eps ** 2
