"""Flux-control-line distortion model and pre-distortion design.

The line is modeled as a DC gain, a short FIR ripple and a set of
first-order IIR settling terms with step response
s(t) = gain * (1 + sum_k a_k exp(-t / tau_k)).  Pre-distortion inverts the
IIR terms exactly (pole-zero matching at the sample period) and the FIR
ripple by ridge-regularized least-squares deconvolution.  The cryoscope
reconstruction recovers the in-situ qubit frequency excursion from
phase-vs-truncation-time data and can be inverted to flux through a
qubit-frequency sensitivity function.

All times are ns; flux amplitudes are in units of the flux quantum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter


class SampleRateMismatch(ValueError):
    """Waveform and filter sample periods differ."""


class UnstableTerm(ValueError):
    """An IIR term has no stable causal inverse."""


class IllConditioned(RuntimeError):
    """The deconvolution normal system is numerically singular."""


class UnwrapFailure(RuntimeError):
    """Adjacent phase samples differ by >= pi; sampling too coarse."""


@dataclass(frozen=True)
class IIRTerm:
    """One settling term: amplitude (dimensionless) and time constant, ns."""

    amplitude: float
    tau_ns: float

    def __post_init__(self) -> None:
        if not abs(self.amplitude) < 1.0:
            raise ValueError("|amplitude| must be < 1")
        if self.tau_ns <= 0.0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class TransferFunction:
    """Flux-line response: DC gain, IIR settling terms, FIR ripple."""

    dc_gain: float
    iir_terms: tuple[IIRTerm, ...]
    fir_taps: tuple[float, ...]
    sample_ns: float

    def __post_init__(self) -> None:
        if self.sample_ns <= 0.0:
            raise ValueError("sample period must be positive")
        if self.dc_gain == 0.0:
            raise ValueError("dc gain must be nonzero")
        total = math.fsum(self.fir_taps)
        if not self.fir_taps or not math.isfinite(total) or total == 0.0:
            raise ValueError("fir taps must sum to a finite nonzero value")
        object.__setattr__(self, "iir_terms", tuple(self.iir_terms))
        object.__setattr__(
            self, "fir_taps", tuple(float(t) for t in self.fir_taps))

    def as_dict(self) -> dict:
        return {
            "dc_gain": self.dc_gain,
            "iir_terms": [
                {"amplitude": t.amplitude, "tau_ns": t.tau_ns}
                for t in self.iir_terms],
            "fir_taps": list(self.fir_taps),
            "sample_ns": self.sample_ns,
        }

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "TransferFunction":
        return cls(
            dc_gain=float(d["dc_gain"]),
            iir_terms=tuple(
                IIRTerm(float(t["amplitude"]), float(t["tau_ns"]))
                for t in d["iir_terms"]),
            fir_taps=tuple(float(t) for t in d["fir_taps"]),
            sample_ns=float(d["sample_ns"]),
        )

    @classmethod
    def from_json(cls, path: str) -> "TransferFunction":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class PulseWaveform:
    """Sampled flux pulse; amplitudes in flux-quantum units."""

    samples: np.ndarray
    sample_ns: float
    start_ns: float = 0.0

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=float)
        if samples.size == 0:
            raise ValueError("waveform must be non-empty")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform samples must be finite")
        if self.sample_ns <= 0.0:
            raise ValueError("sample period must be positive")
        object.__setattr__(self, "samples", samples)

    def times(self) -> np.ndarray:
        return self.start_ns + self.sample_ns * np.arange(self.samples.size)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("time_ns,amplitude\n")
            for t, a in zip(self.times(), self.samples):
                fh.write("%r,%r\n" % (t, a))


@dataclass(frozen=True)
class CryoscopeTrace:
    """Reconstructed qubit frequency offsets (MHz) vs time (ns)."""

    times: np.ndarray
    offsets_mhz: np.ndarray

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(times) <= 0.0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(
            self, "offsets_mhz", np.asarray(self.offsets_mhz, dtype=float))


def default_line_model() -> TransferFunction:
    """Synthetic ground-truth line: settling terms spanning 1-20 us plus
    a short ripple, at the 0.5 ns sample period."""
    return TransferFunction(
        dc_gain=1.0,
        iir_terms=(IIRTerm(0.03, 1000.0), IIRTerm(0.01, 20000.0)),
        fir_taps=(0.985, 0.02, -0.012, 0.007),
        sample_ns=0.5,
    )


def default_suite() -> tuple[TransferFunction, ...]:
    """Representative line models used by the round-trip checks."""
    return (
        default_line_model(),
        TransferFunction(1.0, (IIRTerm(0.05, 200.0),), (1.0,), 0.5),
        TransferFunction(0.98, (IIRTerm(-0.02, 5000.0),), (1.0,), 0.5),
        TransferFunction(
            1.02,
            (IIRTerm(0.02, 200.0), IIRTerm(0.015, 2000.0),
             IIRTerm(0.01, 20000.0)),
            (0.99, 0.013, -0.003), 0.5),
    )


def _iir_response(
    x: np.ndarray, terms: tuple[IIRTerm, ...], gain: float, dt: float
) -> np.ndarray:
    # Each term contributes v[n] = p v[n-1] + a (x[n] - x[n-1]); summed with
    # the passthrough this reproduces gain (1 + sum a exp(-t/tau)) exactly
    # at the sample times for a step input.
    y = x.copy()
    for term in terms:
        p = math.exp(-dt / term.tau_ns)
        a = term.amplitude
        y += lfilter([a, -a], [1.0, -p], x)
    return gain * y


def apply_transfer(w: PulseWaveform, tf: TransferFunction) -> PulseWaveform:
    """Distort a waveform: causal FIR convolution, then the IIR settling
    model.  Linear and time-invariant; the input is assumed to start from
    a line at rest."""
    if w.sample_ns != tf.sample_ns:
        raise SampleRateMismatch(
            "waveform at %g ns, filter at %g ns" % (w.sample_ns, tf.sample_ns))
    x = np.convolve(w.samples, tf.fir_taps)[:w.samples.size]
    y = _iir_response(x, tf.iir_terms, tf.dc_gain, tf.sample_ns)
    return PulseWaveform(y, w.sample_ns, w.start_ns)


@dataclass(frozen=True)
class FilterCascade:
    """First-order correction sections (b0 + b1 z^-1) / (1 - r z^-1) applied
    in sequence, with an overall scale."""

    scale: float
    sections: tuple[tuple[float, float, float], ...]
    sample_ns: float

    def apply(self, w: PulseWaveform) -> PulseWaveform:
        if w.sample_ns != self.sample_ns:
            raise SampleRateMismatch(
                "waveform at %g ns, filter at %g ns"
                % (w.sample_ns, self.sample_ns))
        y = self.scale * w.samples
        for b0, b1, r in self.sections:
            y = lfilter([b0, b1], [1.0, -r], y)
        return PulseWaveform(y, w.sample_ns, w.start_ns)

    def compose(self, other: "FilterCascade") -> "FilterCascade":
        if other.sample_ns != self.sample_ns:
            raise SampleRateMismatch("sample periods differ")
        return FilterCascade(self.scale * other.scale,
                             self.sections + other.sections, self.sample_ns)


def invert_iir(tf: TransferFunction) -> FilterCascade:
    """Exact digital inverse of the IIR part (and the DC gain).

    The settling terms act in parallel, so the line is the rational filter
    H(x) = B(x) / A(x) in x = z^-1 with A(x) = prod_k (1 - p_k x),
    p_k = exp(-dt/tau_k), and B carrying the term amplitudes.  The inverse
    cascades one first-order section per term, pairing the zeros p_k with
    the roots of B; inverting jointly rather than term by term removes the
    O(a_j a_k) cross residue of naive per-term inversion.  Terms with
    a = 0 are dropped (identity correction).
    """
    for term in tf.iir_terms:
        if term.amplitude <= -1.0:
            raise UnstableTerm("term amplitude %g <= -1" % term.amplitude)
    terms = [t for t in tf.iir_terms if t.amplitude != 0.0]
    if not terms:
        return FilterCascade(1.0 / tf.dc_gain, (), tf.sample_ns)

    poles = [math.exp(-tf.sample_ns / t.tau_ns) for t in terms]
    # The line is H(x) = B(x)/A(x) in x = z^-1 with A = prod (1 - p_k x).
    # All roots cluster at x ~ 1, so work in u = 1 - x where each factor
    # becomes (q_k + p_k u), q_k = 1 - p_k, and coefficients stay free of
    # cancellation: B(u) = prod(q + p u) + u sum_k a_k prod_{j!=k}(q + p u).
    q = [1.0 - p for p in poles]
    b_u = np.array([1.0])
    for k in range(len(terms)):
        b_u = np.convolve(b_u, [q[k], poles[k]])
    for k, t in enumerate(terms):
        partial = np.array([0.0, t.amplitude])
        for j in range(len(terms)):
            if j != k:
                partial = np.convolve(partial, [q[j], poles[j]])
        b_u = b_u + partial
    roots_u = np.roots(b_u[::-1])
    if np.any(np.abs(roots_u.imag) > 1e-12 * np.abs(roots_u.real)):
        raise UnstableTerm("joint inverse has complex poles; no first-order"
                           " section decomposition")
    inv_poles = 1.0 / (1.0 - roots_u.real)
    if np.any(np.abs(inv_poles) >= 1.0):
        raise UnstableTerm("joint inverse has a pole outside the unit circle")
    sections = tuple(
        (1.0, -z, r)
        for z, r in zip(sorted(poles, reverse=True),
                        sorted(inv_poles, reverse=True)))
    # B(x=0) = B(u=1) = 1 + sum a_k exactly.
    scale = 1.0 / (tf.dc_gain * (1.0 + math.fsum(t.amplitude for t in terms)))
    return FilterCascade(scale, sections, tf.sample_ns)


def design_fir_inverse(
    response: np.ndarray, n_taps: int, ridge: float = 1e-8
) -> np.ndarray:
    """Ridge least-squares taps that flatten a measured short step response.

    The response is differenced into an impulse response h, taps c solve
    min ||conv(h, c) - delta||^2 + ridge ||c||^2, and the result is
    rescaled exactly so that sum(c) = 1 / (steady-state gain).
    """
    response = np.asarray(response, dtype=float)
    if response.size < n_taps:
        raise ValueError("response shorter than the requested tap count")
    if n_taps < 1:
        raise ValueError("need at least one tap")
    h = np.diff(response, prepend=0.0)
    m = response.size
    col = np.zeros(m)
    col[:h.size] = h
    conv = np.empty((m, n_taps))
    for j in range(n_taps):
        conv[:, j] = np.roll(col, j)
        conv[:j, j] = 0.0
    target = np.zeros(m)
    target[0] = 1.0
    normal = conv.T @ conv + ridge * np.eye(n_taps)
    rhs = conv.T @ target
    if not np.all(np.isfinite(normal)) or np.linalg.cond(normal) > 1e12:
        raise IllConditioned("regularized normal system is singular")
    taps = np.linalg.solve(normal, rhs)
    gain = response[-1]
    if gain == 0.0 or taps.sum() == 0.0:
        raise IllConditioned("response has no usable steady state")
    return taps * (1.0 / gain) / taps.sum()


@dataclass(frozen=True)
class Predistortion:
    """Complete line correction: FIR deconvolution then IIR inversion."""

    fir_taps: np.ndarray
    cascade: FilterCascade
    sample_ns: float

    def apply(self, w: PulseWaveform) -> PulseWaveform:
        if w.sample_ns != self.sample_ns:
            raise SampleRateMismatch(
                "waveform at %g ns, filter at %g ns"
                % (w.sample_ns, self.sample_ns))
        x = np.convolve(w.samples, self.fir_taps)[:w.samples.size]
        return self.cascade.apply(PulseWaveform(x, w.sample_ns, w.start_ns))


def design_predistortion(
    tf: TransferFunction, n_taps: int = 48, ridge: float = 1e-8,
    response_len: int = 400,
) -> Predistortion:
    """Build the full correction for a known line model.

    The IIR terms and gain invert exactly; the FIR taps are then designed
    from the simulated step response of the IIR-corrected line, mirroring
    the slow-settling-first calibration order used in practice.
    """
    cascade = invert_iir(tf)
    n = max(n_taps, response_len)
    step = PulseWaveform(np.ones(n), tf.sample_ns)
    resp = apply_transfer(cascade.apply(step), tf)
    fir = design_fir_inverse(resp.samples, n_taps, ridge)
    return Predistortion(fir, cascade, tf.sample_ns)


def cryoscope_phases(
    w: PulseWaveform, sensitivity, idle_flux: float = 0.0
) -> tuple[np.ndarray, np.ndarray]:
    """Forward model: accumulated phase (rad) at each truncation time.

    `sensitivity` maps flux to qubit frequency in GHz; the phase at
    truncation time t is 2 pi times the integrated frequency offset of the
    pulse-displaced qubit relative to its idle frequency.
    """
    f_idle = sensitivity(idle_flux)
    offsets = np.array([sensitivity(idle_flux + a) for a in w.samples])
    offsets -= f_idle
    phases = 2.0 * np.pi * np.cumsum(offsets) * w.sample_ns
    return w.times() + w.sample_ns, phases


def _unwrap(phases: np.ndarray) -> np.ndarray:
    steps = np.diff(phases)
    minimal = np.array([math.remainder(s, 2.0 * np.pi) for s in steps])
    if np.any(np.abs(minimal) >= np.pi * (1.0 - 1e-6)):
        raise UnwrapFailure(
            "adjacent phase step at +-pi; sample truncation times finer")
    out = np.empty_like(phases)
    out[0] = phases[0]
    out[1:] = phases[0] + np.cumsum(minimal)
    return out


def cryoscope_reconstruct(
    times: np.ndarray, phases: np.ndarray
) -> CryoscopeTrace:
    """Instantaneous frequency offsets from phase-vs-truncation-time data.

    Phases are unwrapped to minimal adjacent steps, differentiated by
    central differences and smoothed with a 3-point moving average.
    """
    times = np.asarray(times, dtype=float)
    phases = np.asarray(phases, dtype=float)
    if times.size != phases.size or times.size < 3:
        raise ValueError("need at least three matching samples")
    dt = np.diff(times)
    if np.any(dt <= 0.0) or np.ptp(dt) > 1e-9 * dt[0]:
        raise ValueError("truncation times must be uniform and increasing")
    phi = _unwrap(phases)
    freq = np.gradient(phi, times) / (2.0 * np.pi)  # GHz
    smooth = np.convolve(freq, np.ones(3) / 3.0, mode="same")
    # The ends of mode="same" average only two points; restore them.
    smooth[0] = (freq[0] + freq[1]) / 2.0
    smooth[-1] = (freq[-2] + freq[-1]) / 2.0
    return CryoscopeTrace(times, 1e3 * smooth)


def invert_to_flux(
    trace: CryoscopeTrace, sensitivity, idle_flux: float,
    step: float = 1e-6,
) -> PulseWaveform:
    """Map frequency offsets back to flux by linearizing the sensitivity
    around the idle point."""
    slope = (sensitivity(idle_flux + step)
             - sensitivity(idle_flux - step)) / (2.0 * step)  # GHz / Phi0
    if slope == 0.0:
        raise ValueError("sensitivity has zero slope at the idle flux")
    dt = float(trace.times[1] - trace.times[0])
    return PulseWaveform(
        trace.offsets_mhz / (1e3 * slope), dt, float(trace.times[0]))


def net_zero_pulse(
    amplitude: float, half_ns: float, sample_ns: float = 0.5
) -> PulseWaveform:
    """Two equal and opposite flat halves; the sample sum is exactly zero."""
    n_half = int(round(half_ns / sample_ns))
    if n_half < 2:
        raise ValueError("half duration must cover at least 2 samples")
    samples = np.concatenate(
        [np.full(n_half, amplitude), np.full(n_half, -amplitude)])
    return PulseWaveform(samples, sample_ns)
