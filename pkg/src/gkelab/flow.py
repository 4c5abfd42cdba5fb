"""Inverse Monge-Ampere flow with an energy guard.

The stored potential evolves by d(phi)/dt = MA_FLOW_RATE * (1 - e^f); the
rate constant converts the additive-potential equation into stored units and
is pinned once by the finite-difference energy check, never at run time.
Stepping is plain explicit Euler. Stability is not negotiated with the
operator: a step that raises the energy or loses nodal convexity is thrown
away and retried at half the size, so the recorded trace is non-increasing
by construction and the accepted step settles near the stability boundary of
the stiffest resolved node. Wall nodes own that boundary, since the inverse
metric there grows exponentially in the box radius; flow grids trade box
radius against step size and wall clock.

Checkpoints are handed to a buffered writer thread so serialization never
blocks stepping; the writer drains before run_flow returns.
"""

import queue
import threading
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from . import kahler_state, sector_ops, spectra, toric
from .constants import CERTIFICATION_GRAD_TOL, MA_FLOW_RATE


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowParams:
    """Controller knobs. dt halves on every rejection and grows by
    grow_factor after grow_after consecutive accepts; dt below dt_min is a
    terminal condition, not an error."""

    dt0: float = 0.0          # 0 means 0.9 * estimate_stable_step(initial)
    t_max: float = 10.0
    tol_conv: float = 1e-6
    recenter_every: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str = ""
    record_every: int = 1
    dt_min: float = 1e-14
    dt_max: float = 0.0       # 0 means the same stability estimate
    max_steps: int = 2_000_000
    grow_factor: float = 1.2
    grow_after: int = 5
    pin_width: int = -1       # -1 means the stencil half-width for the accuracy


@dataclass(frozen=True)
class FlowRecord:
    t: float
    dt: float
    energy: float
    grad_norm: float
    c_norm: float
    min_ef: float
    bary_drift: float
    tail_error: float

    COLUMNS: ClassVar[tuple] = ("t", "dt", "energy", "grad_norm", "c_norm",
                                "min_ef", "bary_drift", "tail_error")

    def row(self):
        return (self.t, self.dt, self.energy, self.grad_norm, self.c_norm,
                self.min_ef, self.bary_drift, self.tail_error)


@dataclass
class FlowTrace:
    records: list
    status: str
    accepted: int
    rejected: int
    notes: tuple = ()

    @property
    def energies(self):
        return np.array([r.energy for r in self.records])


def convergence_norm(state):
    """Volume-averaged <<1 - e^f>> norm, the flow's stopping functional."""
    r = 1.0 - state.ef
    mf = state.mass_f
    return float(np.sqrt(np.sum(mf * r * r) / np.sum(mf)))


def barycenter_drift(state):
    """Distance from the pushforward barycenter to the polytope barycenter.

    Gauge diagnostic: translations of phi move the e^{-2 phi} density, and
    with it the discrete pushforward, off the exact barycenter.
    """
    total = np.sum(state.mass)
    b = np.array([np.sum(state.mass * p) for p in state.moment]) / total
    return float(np.linalg.norm(b - np.asarray(toric.barycenter(state.polytope))))


def default_pin_width(accuracy):
    """Rows slaved to the interior, per side: the one-sided stencil rows."""
    del accuracy  # the grading leaves exactly one one-sided row per side
    return 1


def evolving_mask(grid, pin_width):
    """True where the flow evolves the potential by the equation.

    The truncated box has no boundary condition of its own, and the
    one-sided closure row turns the semi-discrete flow unstable: its
    second-derivative stencil carries a positive self-coefficient, so at
    the outermost node raising f lowers phi, which lowers det D^2 phi,
    which raises f again. That ratchet is a property of the direction
    field, not of the step size, and it ends in convexity loss at the
    wall. The frame row is therefore slaved: after every step its
    deviation copies the adjacent evolving value, the zero-slope closure
    the deviation's flat far field actually satisfies. Richer closures
    re-create the problem: freezing the frame plants a corner whose second
    difference poisons f by O(drift / h^2), and polynomial extrapolation
    pushes the positive self-coefficient one row inward.
    """
    w = int(pin_width)
    keep = np.ones(grid.shape, dtype=bool)
    for ax in range(grid.dim):
        idx = np.arange(grid.N)
        inner = (idx >= w) & (idx < grid.N - w)
        shape = [1] * grid.dim
        shape[ax] = grid.N
        keep &= inner.reshape(shape)
    return keep


def _fill_frame(g, dim, width):
    """Zero-slope continuation of the deviation onto the frame, per axis."""
    out = np.array(g, dtype=float)
    for ax in range(dim):
        out = np.swapaxes(out, 0, ax)
        out[:width] = out[width]
        out[out.shape[0] - width:] = out[out.shape[0] - width - 1]
        out = np.swapaxes(out, 0, ax)
    return out


def estimate_stable_step(state, pin_width=-1):
    """Explicit stability boundary of the linearized flow, node by node.

    The update map linearizes to I - dt * (1/2) e^f (Phi : D^2 + 2), so the
    classical bound is 2 over the largest nodal rate among evolving nodes;
    row sums of the actual stencil matrices stand in for operator norms.
    Steps above this boundary can pass the energy guard for a while: the
    interior descent hides the growing wall oscillation until it has gone
    nonlinear, and from such a state the flow direction no longer descends
    at any step size. Starting at or below the boundary is the cheap
    insurance, which is what run_flow defaults to.
    """
    grid, acc = state.grid, state.accuracy
    if pin_width < 0:
        pin_width = default_pin_width(acc)
    rs1 = np.abs(grid.diff_matrix(1, acc)) @ np.ones(grid.N)
    rs2 = np.abs(grid.diff_matrix(2, acc)) @ np.ones(grid.N)
    if grid.dim == 1:
        rate = state.inv_hess[0] * rs2
    else:
        pxx, pxy, pyy = state.inv_hess
        rate = (pxx * rs2[:, None] + pyy * rs2[None, :]
                + 2.0 * np.abs(pxy) * rs1[:, None] * rs1[None, :])
    nodal = 0.5 * state.ef * (rate + 2.0)
    worst = float(np.max(nodal[evolving_mask(grid, pin_width)]))
    return 2.0 / worst


def flow_step(state, dt, pin_width=-1):
    """One explicit update phi <- phi + dt * MA_FLOW_RATE * (1 - e^f).

    The equation acts on the evolving nodes and the closure frame is
    refilled by extrapolation; see evolving_mask for why. Convexity loss
    inside the rebuild propagates as ConvexityError; the controller treats
    it as a rejection, direct callers as a real error.
    """
    if dt <= 0:
        raise FlowError(f"step size must be positive, got {dt}")
    if pin_width < 0:
        pin_width = default_pin_width(state.accuracy)
    keep = evolving_mask(state.grid, pin_width)
    g = state.deviation + dt * MA_FLOW_RATE * np.where(keep, 1.0 - state.ef, 0.0)
    g = _fill_frame(g, state.grid.dim, pin_width)
    return kahler_state.make_state(
        state.polytope, state.grid, state.reference, g, state.accuracy
    )


def _record(state, t, dt):
    return FlowRecord(
        t=float(t),
        dt=float(dt),
        energy=kahler_state.energy_RC(state),
        grad_norm=sector_ops.first_variation_norm(state),
        c_norm=state.c_norm,
        min_ef=float(np.min(state.ef)),
        bary_drift=barycenter_drift(state),
        tail_error=state.tail_error,
    )


class _CheckpointWriter:
    """Single background writer; submission never blocks the stepper."""

    def __init__(self):
        self._q = queue.Queue()
        self._worker = threading.Thread(target=self._drain, daemon=True)
        self._failures = []
        self._worker.start()

    def _drain(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            state, path, extra = item
            try:
                kahler_state.save_state(state, path, extra)
            except OSError as exc:  # surfaced at close, stepping goes on
                self._failures.append(f"checkpoint {path}: {exc}")

    def submit(self, state, path, extra):
        self._q.put((state, path, extra))

    def close(self):
        self._q.put(None)
        self._worker.join()
        return tuple(self._failures)


def run_flow(initial, params=None, **overrides):
    """Integrate until converged, out of time, or out of step size.

    Returns (FlowTrace, final MetricState). Terminal status: 'converged'
    when the <<1 - e^f>> norm drops below tol_conv; 'max_time' at t_max or
    the step budget; 'step_underflow' when halving goes below dt_min;
    'convexity_loss' when it does so with convexity as the last rejection,
    meaning no admissible step this small exists. Recentering is attempted
    every recenter_every accepted steps, skipped with a note whenever it
    would raise the recorded energy or leave the truncation box.
    """
    if params is None:
        params = FlowParams(**overrides)
    elif overrides:
        raise FlowError("pass either params or keyword overrides, not both")

    state = initial
    energy = kahler_state.energy_RC(state)
    pin = (params.pin_width if params.pin_width >= 0
           else default_pin_width(initial.accuracy))
    boundary = estimate_stable_step(initial, pin)
    dt = float(params.dt0) if params.dt0 > 0 else 0.9 * boundary
    dt_max = float(params.dt_max) if params.dt_max > 0 else max(dt, boundary)
    if dt <= 0:
        raise FlowError(f"dt0 must be positive, got {params.dt0}")
    t = 0.0

    writer = _CheckpointWriter() if params.checkpoint_every > 0 else None
    records = [_record(state, t, dt)]
    notes = []
    accepted = rejected = streak = 0
    since_record = 0
    last_reject_convex = False
    status = None

    while True:
        if convergence_norm(state) < params.tol_conv:
            status = "converged"
            break
        if t >= params.t_max or accepted + rejected >= params.max_steps:
            status = "max_time"
            break
        if dt < params.dt_min:
            status = "convexity_loss" if last_reject_convex else "step_underflow"
            break

        try:
            candidate = flow_step(state, dt, pin)
            cand_energy = kahler_state.energy_RC(candidate)
        except kahler_state.ConvexityError:
            rejected += 1
            streak = 0
            last_reject_convex = True
            dt *= 0.5
            continue
        if not np.isfinite(cand_energy) or cand_energy > energy:
            rejected += 1
            streak = 0
            last_reject_convex = False
            dt *= 0.5
            continue

        t += dt
        state, energy = candidate, cand_energy
        accepted += 1
        streak += 1
        since_record += 1

        if params.recenter_every > 0 and accepted % params.recenter_every == 0:
            try:
                centered = kahler_state.recenter(state)
                cen_energy = kahler_state.energy_RC(centered)
                if cen_energy <= energy:
                    state, energy = centered, cen_energy
                else:
                    notes.append(f"recenter skipped at step {accepted}: "
                                 f"energy would rise by {cen_energy - energy:.3e}")
            except kahler_state.RecenterError as exc:
                notes.append(f"recenter failed at step {accepted}: {exc}")

        if since_record >= params.record_every:
            records.append(_record(state, t, dt))
            since_record = 0
        if writer is not None and accepted % params.checkpoint_every == 0:
            path = f"{params.checkpoint_dir or '.'}/flow_{accepted:08d}.npz"
            writer.submit(state, path, {"t": t, "dt": dt, "accepted": accepted})

        if streak >= params.grow_after:
            dt = min(dt * params.grow_factor, dt_max)
            streak = 0

    if since_record > 0:
        records.append(_record(state, t, dt))
    if writer is not None:
        notes.extend(writer.close())
    trace = FlowTrace(records=records, status=status,
                      accepted=accepted, rejected=rejected, notes=tuple(notes))
    return trace, state


@dataclass(frozen=True)
class CriticalityReport:
    grad_norm: float
    certified: bool
    commutators: dict
    min_hessian_eig: dict

    @property
    def worst_commutator(self):
        return max(self.commutators.values()) if self.commutators else 0.0

    @property
    def min_eig(self):
        return min(self.min_hessian_eig.values())


def criticality_report(state, sectors=None):
    """Gradient norm, root-sector commutators, minimal Hessian Ritz value.

    Certification is the gradient test alone; the other two diagnostics
    measure how much of the critical-point structure the state carries, and
    at random states the root commutators are the ones expected to be
    strictly positive.
    """
    dim = state.grid.dim
    if sectors is None:
        roots = [tuple(r.weight) for r in toric.demazure_roots(state.polytope)]
        sectors = [(0,) * dim] + roots
    grad = sector_ops.first_variation_norm(state)
    probes = sector_ops.probe_basis(state)
    commutators = {}
    min_eig = {}
    for m in sectors:
        m = tuple(m)
        op = sector_ops.assemble_sector(state, m)
        if any(m):
            commutators[m] = sector_ops.commutator_residual(op, probes)
        min_eig[m] = float(spectra.hessian_ritz_values(state, m).min())
    return CriticalityReport(
        grad_norm=grad,
        certified=bool(grad <= CERTIFICATION_GRAD_TOL),
        commutators=commutators,
        min_hessian_eig=min_eig,
    )
