"""Flux-pulsed one- and two-qutrit dynamics.

The two-qubit model is a pair of Duffing oscillators with a static exchange
coupling, propagated piecewise-constantly in a frame rotating at the
midpoint of the two idle frequencies.  A common frame keeps the exchange
term time-independent with unequal idle frequencies; conditional phases are
frame-invariant, and the single-qubit dynamic phases reported for
virtual-Z bookkeeping are converted to each qubit's own idle frame.

Frequencies are GHz, times ns unless suffixed otherwise; the factor 2 pi
enters only inside propagators.  Flux trajectories are offsets from the
idle bias: with a flux map attached they are in flux-quantum units, and
without one the samples are read directly as frequency offsets in GHz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq, curve_fit, minimize, minimize_scalar

from .fluxline import PulseWaveform, net_zero_pulse
from .rng import TAG_SPECTROSCOPY, substream

#: Documented propagation accuracy budget: the largest Hamiltonian
#: eigenvalue may advance at most this many cycles per sample, otherwise
#: piecewise-constant sampling cannot resolve the evolution.
MAX_CYCLES_PER_STEP = 1.0


class StepTooLarge(ValueError):
    """Sample period too coarse for the Hamiltonian's fastest phase."""


class CalibrationFailed(RuntimeError):
    """The gate objective stayed above threshold after the search."""


class NoCrossing(ValueError):
    """The spectroscopy sweep does not bracket the avoided crossing."""


class FitDivergence(RuntimeError):
    """A nonlinear fit failed to converge to a finite result."""


def _principal(phase: float) -> float:
    out = math.remainder(phase, 2.0 * math.pi)
    return math.pi if out == -math.pi else out


@dataclass(frozen=True)
class QubitSpec:
    """One Duffing qubit: idle transition frequency, anharmonicity, level
    count, and optionally a flux-to-frequency map with its idle bias."""

    idle_ghz: float
    alpha_ghz: float
    levels: int = 3
    flux_map: object = None
    idle_flux: float = 0.0

    def __post_init__(self) -> None:
        if self.levels < 3:
            raise ValueError("need at least 3 levels")
        if self.alpha_ghz >= 0.0:
            raise ValueError("anharmonicity must be negative")
        if self.idle_ghz <= 0.0:
            raise ValueError("idle frequency must be positive")

    def frequency(self, flux_offset: float) -> float:
        """ge frequency at the given trajectory sample."""
        if self.flux_map is None:
            return self.idle_ghz + flux_offset
        return self.flux_map(self.idle_flux + flux_offset)


@dataclass(frozen=True)
class DuffingPair:
    """Exchange-coupled qubit pair; j_qq is half the on-resonance splitting
    of the one-excitation manifold."""

    qubit1: QubitSpec
    qubit2: QubitSpec
    j_qq: float
    interaction_ghz: float = 5.0

    def __post_init__(self) -> None:
        if self.j_qq < 0.0:
            raise ValueError("j_qq must be non-negative")

    @property
    def frame_ghz(self) -> float:
        return 0.5 * (self.qubit1.idle_ghz + self.qubit2.idle_ghz)


@dataclass(frozen=True)
class NoiseParams:
    """Per-qubit coherence times in microseconds."""

    t1_us: tuple[float, float]
    t2_star_us: tuple[float, float]
    t2_echo_us: tuple[float, float]

    def __post_init__(self) -> None:
        for q in range(2):
            t1 = self.t1_us[q]
            for t2 in (self.t2_star_us[q], self.t2_echo_us[q]):
                if t1 <= 0.0 or t2 <= 0.0:
                    raise ValueError("coherence times must be positive")
                if t2 > 2.0 * t1:
                    raise ValueError("t2 exceeds the 2 t1 limit")

    def gamma_phi(self, qubit: int, which: str = "star") -> float:
        """Pure-dephasing rate in 1/ns from the chosen t2."""
        t2 = {"star": self.t2_star_us, "echo": self.t2_echo_us}[which][qubit]
        return 1e-3 * (1.0 / t2 - 0.5 / self.t1_us[qubit])


def _destroy(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n)), k=1)


def _pair_operators(pair: DuffingPair):
    l1, l2 = pair.qubit1.levels, pair.qubit2.levels
    a1 = np.kron(_destroy(l1), np.eye(l2))
    a2 = np.kron(np.eye(l1), _destroy(l2))
    n1 = a1.T @ a1
    n2 = a2.T @ a2
    exchange = pair.j_qq * (a1.T @ a2 + a2.T @ a1)
    kerr = (0.5 * pair.qubit1.alpha_ghz * n1 @ (n1 - np.eye(n1.shape[0]))
            + 0.5 * pair.qubit2.alpha_ghz * n2 @ (n2 - np.eye(n2.shape[0])))
    return n1, n2, exchange + kerr


def _segments(w1: PulseWaveform, w2: PulseWaveform):
    """Runs of constant (sample1, sample2) with their durations in ns."""
    if w1.sample_ns != w2.sample_ns or w1.samples.size != w2.samples.size:
        raise ValueError("trajectories must share grid and length")
    s1, s2 = w1.samples, w2.samples
    changes = np.flatnonzero((np.diff(s1) != 0.0) | (np.diff(s2) != 0.0)) + 1
    starts = np.concatenate([[0], changes])
    ends = np.concatenate([changes, [s1.size]])
    dt = w1.sample_ns
    return [(s1[a], s2[a], (b - a) * dt) for a, b in zip(starts, ends)]


def _segment_hamiltonians(pair: DuffingPair, segments):
    n1, n2, static = _pair_operators(pair)
    f_ref = pair.frame_ghz
    out = []
    for x1, x2, dur in segments:
        d1 = pair.qubit1.frequency(x1) - f_ref
        d2 = pair.qubit2.frequency(x2) - f_ref
        out.append((d1 * n1 + d2 * n2 + static, dur))
    return out


def _check_step(evals: np.ndarray, sample_ns: float) -> None:
    peak = float(np.max(np.abs(evals)))
    if peak * sample_ns > MAX_CYCLES_PER_STEP:
        raise StepTooLarge(
            "|H| of %.3g GHz advances %.2f cycles per %.2g ns sample"
            % (peak, peak * sample_ns, sample_ns))


def propagator(
    pair: DuffingPair, w1: PulseWaveform, w2: PulseWaveform
) -> np.ndarray:
    """Unitary for the trajectory pair in the common rotating frame.

    Constant runs are propagated in closed form through one
    eigendecomposition each, so long plateaus cost the same as single
    samples and the duration enters continuously.
    """
    dim = pair.qubit1.levels * pair.qubit2.levels
    u = np.eye(dim, dtype=complex)
    for h, dur in _segment_hamiltonians(pair, _segments(w1, w2)):
        evals, evecs = np.linalg.eigh(h)
        _check_step(evals, w1.sample_ns)
        phases = np.exp(-2j * np.pi * evals * dur)
        u = (evecs * phases) @ evecs.conj().T @ u
    return u


def propagate(
    pair: DuffingPair, w1: PulseWaveform, w2: PulseWaveform,
    state: np.ndarray,
) -> np.ndarray:
    """Evolve a normalized state vector along the flux trajectories."""
    state = np.asarray(state, dtype=complex)
    if abs(np.linalg.norm(state) - 1.0) > 1e-9:
        raise ValueError("initial state must be normalized")
    return propagator(pair, w1, w2) @ state


def _collapse_operators(pair: DuffingPair, noise: NoiseParams,
                        t2_kind: str) -> list[np.ndarray]:
    l1, l2 = pair.qubit1.levels, pair.qubit2.levels
    ops = []
    for q, (la, lb) in enumerate(((l1, l2), (l2, l1))):
        a = _destroy(la)
        n = a.T @ a
        gamma1 = 1e-3 / noise.t1_us[q]  # 1/ns
        gphi = noise.gamma_phi(q, t2_kind)
        lower = math.sqrt(gamma1) * a
        deph = math.sqrt(2.0 * gphi) * n
        if q == 0:
            ops += [np.kron(lower, np.eye(lb)), np.kron(deph, np.eye(lb))]
        else:
            ops += [np.kron(np.eye(lb), lower), np.kron(np.eye(lb), deph)]
    return ops


def _liouvillian(h: np.ndarray, collapse: list[np.ndarray]) -> np.ndarray:
    """Generator in column-stacked superoperator form, rates in 1/ns."""
    dim = h.shape[0]
    ident = np.eye(dim)
    lv = -2j * np.pi * (np.kron(ident, h) - np.kron(h.T, ident))
    for c in collapse:
        cdc = c.conj().T @ c
        lv += (np.kron(c.conj(), c)
               - 0.5 * np.kron(ident, cdc)
               - 0.5 * np.kron(cdc.T, ident))
    return lv


def lindblad_propagate(
    pair: DuffingPair, w1: PulseWaveform, w2: PulseWaveform,
    noise: NoiseParams, rho: np.ndarray, t2_kind: str = "star",
) -> np.ndarray:
    """Density-matrix evolution with per-qubit relaxation and dephasing.

    Collapse operators are sqrt(1/t1) a (relaxation, sqrt(n)-scaled to
    higher levels) and sqrt(2 Gamma_phi) n with
    Gamma_phi = 1/t2 - 1/(2 t1).
    """
    dim = pair.qubit1.levels * pair.qubit2.levels
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (dim, dim):
        raise ValueError("density matrix has wrong shape")
    collapse = _collapse_operators(pair, noise, t2_kind)
    vec = rho.reshape(-1, order="F")
    for h, dur in _segment_hamiltonians(pair, _segments(w1, w2)):
        _check_step(np.linalg.eigvalsh(h), w1.sample_ns)
        vec = expm(_liouvillian(h, collapse) * dur) @ vec
    return vec.reshape(dim, dim, order="F")


def _idle_frame_rotation(pair: DuffingPair, duration_ns: float) -> np.ndarray:
    """Diagonal that converts common-frame phases to per-qubit idle frames."""
    n1, n2, _ = _pair_operators(pair)
    d1 = pair.qubit1.idle_ghz - pair.frame_ghz
    d2 = pair.qubit2.idle_ghz - pair.frame_ghz
    ang = 2.0 * np.pi * duration_ns * (d1 * np.diag(n1) + d2 * np.diag(n2))
    return np.exp(1j * ang)


def _comp_indices(pair: DuffingPair) -> list[int]:
    l2 = pair.qubit2.levels
    return [0, 1, l2, l2 + 1]  # gg, ge, eg, ee


def _idle_dressing(pair: DuffingPair):
    """Idle eigenbasis, columns labeled by the bare states they connect to.

    The exchange coupling is always on, so the states the device prepares
    and reads out are idle eigenstates, not bare products.  Channels
    composed for benchmarking must live in this basis, or the J/Delta
    beating of the bare basis shows up as a spurious swap error an
    adiabatic pulse does not actually make.  Returns (v, e) with column
    v[:, b] the eigenvector assigned to bare label b (strongest-overlap
    assignment, dominant component phased real positive) and e[b] its
    frequency in the common frame.
    """
    n1, n2, static = _pair_operators(pair)
    h = ((pair.qubit1.idle_ghz - pair.frame_ghz) * n1
         + (pair.qubit2.idle_ghz - pair.frame_ghz) * n2 + static)
    evals, evecs = np.linalg.eigh(h)
    dim = evals.size
    weights = np.abs(evecs) ** 2
    order = np.full(dim, -1)
    taken = np.zeros(dim, dtype=bool)
    for _, b, k in sorted(((weights[b, k], b, k) for b in range(dim)
                           for k in range(dim)), reverse=True):
        if order[b] >= 0 or taken[k]:
            continue
        order[b] = k
        taken[k] = True
    v = evecs[:, order]
    phase = np.exp(-1j * np.angle(v[np.arange(dim), np.arange(dim)]))
    return v * phase[None, :], evals[order]


@dataclass(frozen=True)
class GateReport:
    """Calibrated two-qubit gate summary.

    `dynamic_phases` are the single-qubit phases (radians, per-qubit idle
    frames) that virtual-Z gates must unwind; `virtual_z` holds those
    corrections with the sign ready to apply.
    """

    conditional_phase: float
    leakage: float
    dynamic_phases: tuple[float, float]
    total_ns: float
    amplitude: float
    half_plateau_ns: float
    objective: float
    error_estimate: float | None = None

    @property
    def virtual_z(self) -> tuple[float, float]:
        return (-self.dynamic_phases[0], -self.dynamic_phases[1])

    def as_dict(self) -> dict:
        d = {
            "conditional_phase_rad": self.conditional_phase,
            "leakage": self.leakage,
            "dynamic_phases_rad": list(self.dynamic_phases),
            "virtual_z_rad": list(self.virtual_z),
            "total_ns": self.total_ns,
            "amplitude": self.amplitude,
            "half_plateau_ns": self.half_plateau_ns,
            "objective": self.objective,
        }
        if self.error_estimate is not None:
            d["error_estimate"] = self.error_estimate
        return d


def _dressed_gate(pair: DuffingPair, u: np.ndarray,
                  duration_ns: float) -> np.ndarray:
    """Propagator re-expressed between idle eigenstates with their idle
    evolution removed; pure idling maps to the exact identity."""
    v, e_idle = _idle_dressing(pair)
    rot = np.exp(2j * np.pi * duration_ns * e_idle)
    return rot[:, None] * (v.conj().T @ u @ v)


def gate_phases(pair: DuffingPair, u: np.ndarray, duration_ns: float):
    """(conditional phase, qubit-1 phase, qubit-2 phase) of a propagator.

    Phases are measured between the idle eigenstates, the states a device
    actually prepares and reads out, so the conditional phase includes
    the exchange dressing the pulse accumulates on top of the bare-state
    value; this is the frame in which benchmarking channels compose.
    """
    ui = _dressed_gate(pair, u, duration_ns)
    gg, ge, eg, ee = (ui[i, i] for i in _comp_indices(pair))
    cond = _principal(float(np.angle(ee * gg / (eg * ge))))
    th1 = _principal(float(np.angle(eg / gg)))
    th2 = _principal(float(np.angle(ge / gg)))
    return cond, th1, th2


def computational_leakage(pair: DuffingPair, u: np.ndarray) -> float:
    """Mean population left outside the computational subspace (spanned by
    the idle eigenstates) over the four computational basis inputs."""
    comp = _comp_indices(pair)
    v, _ = _idle_dressing(pair)
    block = (v.conj().T @ u @ v)[np.ix_(comp, comp)]
    return float(1.0 - np.mean(np.sum(np.abs(block) ** 2, axis=0)))


def _raised_cosine_ramp(n: int) -> np.ndarray:
    # Half-period raised cosine from 0 to 1 across n samples.
    return 0.5 * (1.0 - np.cos(np.pi * (np.arange(1, n + 1)) / (n + 1)))


def cz_envelope(
    amplitude: float, half_plateau_ns: float, ramp_ns: float = 4.0,
    sample_ns: float = 0.5,
) -> PulseWaveform:
    """Net-zero flux envelope: raised-cosine ramp in, positive plateau,
    sign flip, negative plateau, ramp out.  The two halves mirror exactly,
    so the sample sum is zero to the last bit.  The flip happens between
    samples: a slew-limited line crosses zero well inside one step at
    these rates, and holding even a single sample at zero yanks the pair
    back to its idle dressing hard enough to imprint a percent-scale
    exchange error on the single-excitation states.  The crossing is
    therefore diabatic while the outer ramps carry all the adiabaticity.

    The plateau duration is continuous: the fractional remainder beyond a
    whole number of samples becomes one amplitude-scaled trim sample at
    each outer plateau edge, where the qubits are not yet entangled and a
    partial-amplitude sample only stretches the ramp, so the calibration
    objective stays smooth on the fixed sample grid.
    """
    n_ramp = int(round(ramp_ns / sample_ns))
    steps = half_plateau_ns / sample_ns
    n_plateau = int(math.floor(steps))
    frac = steps - n_plateau
    up = _raised_cosine_ramp(n_ramp)
    half = np.concatenate([up, [frac], np.ones(n_plateau)])
    return PulseWaveform(
        amplitude * np.concatenate([half, -half[::-1]]), sample_ns)


def pulse_amplitude_for(q: QubitSpec, target_ghz: float) -> float:
    """Trajectory amplitude that parks the qubit's ge frequency on target."""
    if q.flux_map is None:
        return target_ghz - q.idle_ghz
    grid = np.linspace(-0.5, 0.5, 201)
    vals = np.array([q.frequency(x) - target_ghz for x in grid])
    sign = np.sign(vals)
    flips = np.flatnonzero(np.diff(sign) != 0.0)
    if flips.size == 0:
        raise CalibrationFailed(
            "flux map cannot reach %.4f GHz" % target_ghz)
    # Take the crossing closest to the idle bias.
    best = flips[np.argmin(np.abs(grid[flips]))]
    return brentq(lambda x: q.frequency(x) - target_ghz,
                  grid[best], grid[best + 1], xtol=1e-12)


def chevron_scan(
    pair: DuffingPair, durations_ns: np.ndarray, amplitudes: np.ndarray,
):
    """Qubit-1 ground population from |ee> on a duration-amplitude grid.

    Qubit 1 is parked at the interaction frequency; the flat qubit-2 pulse
    amplitude is swept.  Output rows follow durations, columns amplitudes.
    """
    durations = np.asarray(durations_ns, dtype=float)
    amplitudes = np.asarray(amplitudes, dtype=float)
    if durations.size == 0 or amplitudes.size == 0:
        raise ValueError("grids must be non-empty")
    a1 = pulse_amplitude_for(pair.qubit1, pair.interaction_ghz)
    n1, n2, static = _pair_operators(pair)
    f_ref = pair.frame_ghz
    d1 = pair.qubit1.frequency(a1) - f_ref
    l2 = pair.qubit2.levels
    ee = l2 + 1
    p_g = np.empty((durations.size, amplitudes.size))
    for j, amp in enumerate(amplitudes):
        d2 = pair.qubit2.frequency(amp) - f_ref
        h = d1 * n1 + d2 * n2 + static
        evals, evecs = np.linalg.eigh(h)
        start = evecs.conj().T[:, ee]
        for i, dur in enumerate(durations):
            final = evecs @ (np.exp(-2j * np.pi * evals * dur) * start)
            pops = np.abs(final) ** 2
            p_g[i, j] = float(np.sum(pops[:l2]))
    return ChevronMap(durations, amplitudes, p_g)


@dataclass(frozen=True)
class ChevronMap:
    durations_ns: np.ndarray
    amplitudes: np.ndarray
    p_ground: np.ndarray

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("duration_ns," + ",".join(
                repr(a) for a in self.amplitudes) + "\n")
            for t, row in zip(self.durations_ns, self.p_ground):
                fh.write(repr(t) + "," + ",".join(
                    repr(v) for v in row) + "\n")


def calibrate_cz(
    pair: DuffingPair, noise: NoiseParams | None = None,
    ramp_ns: float = 9.0, buffer_ns: float = 20.0, sample_ns: float = 0.25,
    w_phase: float = 1.0, w_leak: float = 1.0, threshold: float = 1e-4,
    max_eval: int = 800,
):
    """Calibrate the net-zero CZ: coarse grid, then a simplex on the
    qubit-2 amplitude and half-plateau duration.

    Both qubits receive the same net-zero envelope; qubit 1's amplitude is
    fixed by the interaction frequency and qubit 2's is searched around the
    ef-resonance estimate.  Returns (GateReport, (waveform1, waveform2)).
    The reported values come from re-propagating the final sampled pulse;
    when noise is given, a Lindblad average-gate-error estimate is attached.
    """
    if pair.j_qq <= 0.0:
        raise CalibrationFailed("no exchange coupling; CZ impossible")
    a1 = pulse_amplitude_for(pair.qubit1, pair.interaction_ghz)
    # ef of qubit 2 on resonance with ge of qubit 1.
    a2_guess = pulse_amplitude_for(
        pair.qubit2, pair.interaction_ghz - pair.qubit2.alpha_ghz)

    # One full |ee>-|gf> cycle across both halves, minus the ramps' share.
    swap_ns = 1.0 / (2.0 * math.sqrt(2.0) * pair.j_qq)
    plateau_guess = max(sample_ns, 0.5 * (swap_ns - 2.0 * ramp_ns))

    # Frequency lever arm of the amplitude at the guess point.
    eps = 1e-6
    lever = (pair.qubit2.frequency(a2_guess + eps)
             - pair.qubit2.frequency(a2_guess - eps)) / (2.0 * eps)
    da = abs(4.0 * pair.j_qq / lever)

    n1, n2, static = _pair_operators(pair)
    f_ref = pair.frame_ghz
    d1_on = pair.qubit1.frequency(a1) - f_ref
    l2 = pair.qubit2.levels
    i_ee, i_gf = l2 + 1, 2

    def dressed_gap(amp):
        d2 = pair.qubit2.frequency(amp) - f_ref
        evals_, evecs = np.linalg.eigh(d1_on * n1 + d2 * n2 + static)
        weights = np.abs(evecs) ** 2
        e_ee = evals_[int(np.argmax(weights[i_ee]))]
        e_gf = evals_[int(np.argmax(weights[i_gf]))]
        return abs(e_ee - e_gf)

    # Stage 1: resonant amplitude from the dressed ee-gf gap minimum; the
    # conditional phase wraps many times per gap width, so a blind grid
    # cannot seed the simplex reliably.
    gap = minimize_scalar(dressed_gap, bounds=(a2_guess - 2.0 * da,
                                               a2_guess + 2.0 * da),
                          method="bounded", options={"xatol": 1e-13})
    a2_res = float(gap.x)

    def build(amp, plateau):
        env = cz_envelope(1.0, plateau, ramp_ns, sample_ns)
        w1 = PulseWaveform(a1 * env.samples, sample_ns)
        w2 = PulseWaveform(amp * env.samples, sample_ns)
        return w1, w2

    evals = 0

    def evaluate(amp, plateau):
        nonlocal evals
        evals += 1
        w1, w2 = build(amp, plateau)
        u = propagator(pair, w1, w2)
        cond, _, _ = gate_phases(pair, u, w1.samples.size * sample_ns)
        leak = computational_leakage(pair, u)
        return _principal(cond - math.pi), leak

    def objective(x):
        amp, plateau = x
        if plateau < 0.0:
            return 10.0
        dphi, leak = evaluate(amp, plateau)
        return w_phase * dphi ** 2 + w_leak * leak

    # Stage 2: alternate exact one-dimensional solves.  The plateau is set
    # to the leakage minimum (a complete exchange cycle) and the amplitude
    # to the conditional-phase root; the two knobs are nearly decoupled
    # there, so a few rounds converge far inside the tolerance.  The root
    # bracket widens on demand because long ramps shift the phase zero
    # several linewidths off the gap minimum.
    def leak_min_plateau(amp, p_center, span):
        grid = np.arange(max(0.0, p_center - span), p_center + span,
                         0.5 * sample_ns)
        leaks = [evaluate(amp, p)[1] for p in grid]
        p0 = float(grid[int(np.argmin(leaks))])
        pol = minimize_scalar(
            lambda p: evaluate(amp, p)[1] if p >= 0.0 else 1.0,
            bounds=(max(0.0, p0 - sample_ns), p0 + sample_ns),
            method="bounded", options={"xatol": 1e-11})
        return float(pol.x)

    def phase_root(amp, plateau):
        for width in (0.3, 0.6, 1.2, 2.4):
            lo, hi = amp - width * da, amp + width * da
            dlo, dhi = evaluate(lo, plateau)[0], evaluate(hi, plateau)[0]
            if dlo * dhi < 0.0:
                return brentq(lambda a: evaluate(a, plateau)[0], lo, hi,
                              xtol=1e-14)
        return amp

    span0 = max(7.0, ramp_ns)
    amp, plateau = a2_res, leak_min_plateau(a2_res, plateau_guess, span0)
    for _ in range(3):
        amp = phase_root(amp, plateau)
        plateau = leak_min_plateau(amp, plateau, 2.0)

    # Stage 3: simplex polish of both knobs on the combined objective.
    res = minimize(
        objective, x0=[amp, plateau], method="Nelder-Mead",
        options={"xatol": 1e-13, "fatol": 1e-18,
                 "initial_simplex": [[amp, plateau],
                                     [amp + 0.005 * da, plateau],
                                     [amp, plateau + 0.1 * sample_ns]],
                 "maxfev": max(1, max_eval - evals)})
    if objective(res.x) < objective([amp, plateau]):
        amp, plateau = float(res.x[0]), float(res.x[1])

    w1, w2 = build(amp, plateau)
    u = propagator(pair, w1, w2)
    duration = w1.samples.size * sample_ns
    cond, th1, th2 = gate_phases(pair, u, duration)
    leak = computational_leakage(pair, u)
    obj = w_phase * _principal(cond - math.pi) ** 2 + w_leak * leak
    if obj > threshold:
        raise CalibrationFailed(
            "objective %.3g above threshold %.3g after %d evaluations"
            % (obj, threshold, evals))

    error = None
    if noise is not None:
        error = average_gate_error(
            pair, w1, w2, noise, t2_kind="echo",
            virtual_z=(-th1, -th2))
    report = GateReport(
        conditional_phase=cond, leakage=leak, dynamic_phases=(th1, th2),
        total_ns=duration + 2.0 * buffer_ns, amplitude=amp,
        half_plateau_ns=plateau, objective=obj, error_estimate=error)
    return report, (w1, w2)


def ideal_cz(pair: DuffingPair) -> np.ndarray:
    """CZ on the computational subspace, identity on leakage levels."""
    dim = pair.qubit1.levels * pair.qubit2.levels
    u = np.eye(dim, dtype=complex)
    ee = pair.qubit2.levels + 1
    u[ee, ee] = -1.0
    return u


def gate_superoperator(
    pair: DuffingPair, w1: PulseWaveform, w2: PulseWaveform,
    noise: NoiseParams | None = None, t2_kind: str = "echo",
    virtual_z: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Column-stacked superoperator of a flux-pulse gate on the full pair
    Hilbert space, expressed in the idle eigenbasis and rotating frame
    (pure idling maps to the exact identity) with the given virtual-Z
    corrections folded in per excitation label.  noise=None gives the
    closed-system channel; this is the object channel-level benchmarking
    executes."""
    dim = pair.qubit1.levels * pair.qubit2.levels
    duration = w1.samples.size * w1.sample_ns

    collapse = ([] if noise is None
                else _collapse_operators(pair, noise, t2_kind))
    prop = np.eye(dim * dim, dtype=complex)
    for h, dur in _segment_hamiltonians(pair, _segments(w1, w2)):
        _check_step(np.linalg.eigvalsh(h), w1.sample_ns)
        prop = expm(_liouvillian(h, collapse) * dur) @ prop

    v, e_idle = _idle_dressing(pair)
    w = np.kron(v.conj(), v)
    prop = w.conj().T @ prop @ w
    n1, n2, _ = _pair_operators(pair)
    rot = np.exp(2j * np.pi * duration * e_idle)
    zcorr = np.exp(1j * (virtual_z[0] * np.diag(n1)
                         + virtual_z[1] * np.diag(n2)))
    frame = rot * zcorr
    return np.diag(np.kron(frame.conj(), frame)) @ prop


def average_gate_error(
    pair: DuffingPair, w1: PulseWaveform, w2: PulseWaveform,
    noise: NoiseParams, t2_kind: str = "echo",
    virtual_z: tuple[float, float] = (0.0, 0.0),
) -> float:
    """Average infidelity of the noisy gate against the ideal CZ.

    The Lindblad channel is evaluated on the 16 computational basis
    matrices, virtual-Z corrections and the idle-frame rotation are folded
    in, and the average gate fidelity follows from the process overlap
    F_avg = (tr(S_ideal^dag S) / d + 1) / (d + 1) on the computational
    block (leakage shows up as trace loss and correctly lowers F).
    """
    comp = _comp_indices(pair)
    dim = pair.qubit1.levels * pair.qubit2.levels
    prop = gate_superoperator(pair, w1, w2, noise, t2_kind, virtual_z)

    d = 4
    s_act = np.empty((d * d, d * d), dtype=complex)
    for col, (k, l) in enumerate(
            (k, l) for l in range(d) for k in range(d)):
        e = np.zeros((dim, dim), dtype=complex)
        e[comp[k], comp[l]] = 1.0
        out = (prop @ e.reshape(-1, order="F")).reshape(dim, dim, order="F")
        s_act[:, col] = out[np.ix_(comp, comp)].reshape(-1, order="F")

    u_ideal = np.diag([1.0, 1.0, 1.0, -1.0]).astype(complex)
    s_id = np.kron(u_ideal.conj(), u_ideal)
    f_pro = float(np.real(np.trace(s_id.conj().T @ s_act))) / (d * d)
    f_avg = (f_pro * d + 1.0) / (d + 1.0)
    return 1.0 - f_avg


def single_qubit_gate(
    angle: float, axis_phase: float = 0.0, duration_ns: float = 40.0,
    sample_ns: float = 0.5,
):
    """Squared-cosine drive envelope and the ideal 2x2 rotation.

    The envelope area satisfies 2 pi integral(Omega) dt = angle, with
    Omega in GHz; virtual-Z rotations are zero-duration frame updates and
    have no waveform.
    """
    if duration_ns <= 0.0:
        raise ValueError("duration must be positive")
    n = int(round(duration_ns / sample_ns))
    t = (np.arange(n) + 0.5) * sample_ns
    env = np.sin(np.pi * t / duration_ns) ** 2
    env *= angle / (2.0 * np.pi * np.sum(env) * sample_ns)
    half = 0.5 * angle
    axis = np.array([
        [math.cos(half), -1j * np.exp(-1j * axis_phase) * math.sin(half)],
        [-1j * np.exp(1j * axis_phase) * math.sin(half), math.cos(half)],
    ])
    return PulseWaveform(env, sample_ns), axis


def virtual_z(angle: float, levels: int = 2) -> np.ndarray:
    """Frame update: diag(exp(-i k angle)) on k excitations, no duration."""
    return np.diag(np.exp(-1j * angle * np.arange(levels)))


def _drive_hamiltonian(amp: float, axis_phase: float, alpha_ghz: float,
                       levels: int) -> np.ndarray:
    a = _destroy(levels)
    n = a.T @ a
    kerr = 0.5 * alpha_ghz * n @ (n - np.eye(levels))
    drive = 0.5 * amp * (np.exp(1j * axis_phase) * a
                         + np.exp(-1j * axis_phase) * a.T)
    return kerr + drive


def single_qubit_propagator(
    w: PulseWaveform, alpha_ghz: float, axis_phase: float = 0.0,
    levels: int = 3,
) -> np.ndarray:
    """Propagate a resonant drive envelope on one Duffing qubit (rotating
    frame at the ge frequency); exposes leakage through the third level."""
    u = np.eye(levels, dtype=complex)
    for amp in w.samples:
        h = _drive_hamiltonian(amp, axis_phase, alpha_ghz, levels)
        evals, evecs = np.linalg.eigh(h)
        _check_step(evals, w.sample_ns)
        u = (evecs * np.exp(-2j * np.pi * evals * w.sample_ns)) \
            @ evecs.conj().T @ u
    return u


def single_qubit_superop(
    w: PulseWaveform, alpha_ghz: float, t1_us: float, t2_star_us: float,
    axis_phase: float = 0.0, levels: int = 3,
) -> np.ndarray:
    """Lindblad superoperator of one driven qutrit, for channel-based
    benchmarking backends."""
    a = _destroy(levels)
    n = a.T @ a
    gphi = 1e-3 * (1.0 / t2_star_us - 0.5 / t1_us)
    if gphi < 0.0:
        raise ValueError("t2 exceeds the 2 t1 limit")
    collapse = [math.sqrt(1e-3 / t1_us) * a, math.sqrt(2.0 * gphi) * n]
    prop = np.eye(levels * levels, dtype=complex)
    for amp, dur in _scalar_segments(w):
        h = _drive_hamiltonian(amp, axis_phase, alpha_ghz, levels)
        prop = expm(_liouvillian(h, collapse) * dur) @ prop
    return prop


def _scalar_segments(w: PulseWaveform):
    s = w.samples
    changes = np.flatnonzero(np.diff(s) != 0.0) + 1
    starts = np.concatenate([[0], changes])
    ends = np.concatenate([changes, [s.size]])
    return [(s[a], (b - a) * w.sample_ns) for a, b in zip(starts, ends)]


@dataclass(frozen=True)
class SpectroscopyResult:
    """One-excitation branch frequencies vs flux and the splitting fit."""

    fluxes: np.ndarray
    branches: np.ndarray
    two_j_ghz: float
    two_j_err_ghz: float

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("flux,branch_low_ghz,branch_high_ghz\n")
            for x, (lo, hi) in zip(self.fluxes, self.branches):
                fh.write("%r,%r,%r\n" % (x, lo, hi))


def spectroscopy_lines(
    pair: DuffingPair, fluxes: np.ndarray, noise_mhz: float = 0.0,
    seed: int = 0,
) -> SpectroscopyResult:
    """Avoided-crossing branches while sweeping qubit 2, plus a hyperbola
    fit of the splitting that estimates 2 j_qq.

    `fluxes` are qubit-2 trajectory amplitudes (flux offsets with a map,
    otherwise GHz offsets); qubit 1 stays at idle.  The splitting is
    fitted against the mapped detuning f2(x) - f1, where the two-level
    hyperbola is exact; fitting against raw flux would fold the map's
    curvature into the extracted coupling.
    """
    fluxes = np.asarray(fluxes, dtype=float)
    if fluxes.size < 5:
        raise ValueError("need at least 5 sweep points")
    f1 = pair.qubit1.idle_ghz
    branches = np.empty((fluxes.size, 2))
    detuning = np.empty(fluxes.size)
    for i, x in enumerate(fluxes):
        f2 = pair.qubit2.frequency(x)
        detuning[i] = f2 - f1
        h = np.array([[f1, pair.j_qq], [pair.j_qq, f2]])
        branches[i] = np.linalg.eigvalsh(h)
    if noise_mhz > 0.0:
        gen = substream(seed, TAG_SPECTROSCOPY)
        branches = branches + 1e-3 * noise_mhz * gen.standard_normal(
            branches.shape)

    sep = branches[:, 1] - branches[:, 0]
    k = int(np.argmin(sep))
    if k == 0 or k == fluxes.size - 1:
        raise NoCrossing("minimum splitting sits at the sweep edge")

    def model(x, two_j, x0):
        return np.sqrt((x - x0) ** 2 + two_j ** 2)

    try:
        popt, pcov = curve_fit(
            model, detuning, sep,
            p0=[max(sep[k], 1e-6), detuning[k]], maxfev=10000)
    except RuntimeError as exc:
        raise FitDivergence(str(exc)) from exc
    two_j = abs(float(popt[0]))
    err = float(np.sqrt(np.abs(pcov[0, 0])))
    return SpectroscopyResult(fluxes, branches, two_j, err)


@dataclass(frozen=True)
class RelaxometryResult:
    times_us: np.ndarray
    populations: np.ndarray
    time_constant_us: float
    stderr_us: float


def _single_qubit_noise(t1_us: float, t2_us: float):
    gphi = 1e-3 * (1.0 / t2_us - 0.5 / t1_us)
    if gphi < -1e-15:
        raise ValueError("t2 exceeds the 2 t1 limit")
    a = _destroy(3)
    n = a.T @ a
    return [math.sqrt(1e-3 / t1_us) * a,
            math.sqrt(2.0 * max(gphi, 0.0)) * n]


def relaxometry(
    kind: str, times_us: np.ndarray, t1_us: float, t2_star_us: float,
    detuning_mhz: float = 0.0,
):
    """Simulate a t1 / ramsey / echo experiment on one qutrit and fit it.

    Pulses are ideal instantaneous rotations; waits evolve under the
    Lindblad generator with the detuning on the excited level.  With white
    dephasing the echo decay equals the Ramsey decay by construction.
    """
    times = np.asarray(times_us, dtype=float)
    if times.size == 0 or np.any(np.diff(times) <= 0.0):
        raise ValueError("times must be non-empty ascending")
    if kind not in ("t1", "ramsey", "echo"):
        raise ValueError("kind must be t1, ramsey, or echo")

    delta = 1e-3 * detuning_mhz  # GHz
    h = np.diag([0.0, delta, 2.0 * delta - 0.160])
    collapse = _single_qubit_noise(t1_us, t2_star_us)
    lv = _liouvillian(h, collapse)

    x90 = np.eye(3, dtype=complex)
    x90[:2, :2] = np.array([[1.0, -1j], [-1j, 1.0]]) / math.sqrt(2.0)
    x180 = np.eye(3, dtype=complex)
    x180[:2, :2] = np.array([[0.0, -1j], [-1j, 0.0]])

    def super_u(u):
        return np.kron(u.conj(), u)

    def wait(ns):
        return expm(lv * ns)

    pops = np.empty(times.size)
    rho_g = np.zeros((3, 3), dtype=complex)
    rho_g[0, 0] = 1.0
    vec_g = rho_g.reshape(-1, order="F")
    for i, t in enumerate(times):
        ns = 1e3 * t
        if kind == "t1":
            vec = super_u(x180) @ vec_g
            vec = wait(ns) @ vec
        elif kind == "ramsey":
            vec = super_u(x90) @ vec_g
            vec = wait(ns) @ vec
            vec = super_u(x90) @ vec
        else:
            vec = super_u(x90) @ vec_g
            vec = wait(0.5 * ns) @ vec
            vec = super_u(x180) @ vec
            vec = wait(0.5 * ns) @ vec
            vec = super_u(x90) @ vec
        rho = vec.reshape(3, 3, order="F")
        pops[i] = float(np.real(rho[1, 1]))

    try:
        if kind == "t1":
            def model(t, a, tau, c):
                return a * np.exp(-t / tau) + c
            p0 = [pops[0] - pops[-1], max(times[-1] / 2.0, 1e-3), pops[-1]]
            popt, pcov = curve_fit(model, times, pops, p0=p0, maxfev=10000)
            tau, err = popt[1], math.sqrt(abs(pcov[1, 1]))
        elif kind == "ramsey":
            def model(t, a, tau, f, phi, c):
                return a * np.exp(-t / tau) * np.cos(
                    2.0 * np.pi * f * t + phi) + c
            # Seed the fringe frequency from the dominant FFT bin.
            demean = pops - pops.mean()
            freqs = np.fft.rfftfreq(times.size, d=times[1] - times[0])
            f0 = freqs[1 + int(np.argmax(
                np.abs(np.fft.rfft(demean)[1:])))] if times.size > 3 else 0.1
            p0 = [0.5, max(times[-1] / 2.0, 1e-3), f0, 0.0, 0.5]
            popt, pcov = curve_fit(model, times, pops, p0=p0, maxfev=20000)
            tau, err = popt[1], math.sqrt(abs(pcov[1, 1]))
        else:
            def model(t, a, tau, c):
                return a * np.exp(-t / tau) + c
            p0 = [pops[0] - pops[-1], max(times[-1] / 2.0, 1e-3), pops[-1]]
            popt, pcov = curve_fit(model, times, pops, p0=p0, maxfev=10000)
            tau, err = popt[1], math.sqrt(abs(pcov[1, 1]))
    except RuntimeError as exc:
        raise FitDivergence(str(exc)) from exc
    if not math.isfinite(tau) or tau <= 0.0:
        raise FitDivergence("fitted time constant %r is unusable" % tau)
    return RelaxometryResult(times, pops, float(tau), float(err))
