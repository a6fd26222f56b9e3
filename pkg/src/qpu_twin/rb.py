"""Randomized benchmarking: sequences, noise models, decay fits, rates.

Sequences of uniformly random Cliffords (optionally with an interleaved
gate) end in the unique recovery inverse, so noiseless survival is exactly
one.  Execution models:

  * DepolarizingModel: each Clifford is followed by a depolarizing channel
    that keeps the state with probability `retention`; the fitted decay
    base equals `retention` exactly.
  * ChannelModel: each circuit primitive maps to a superoperator
    (column-stacked convention, matching the dynamics module), so
    Lindblad-level gate noise from dynamics plugs in directly.  Qutrit
    channels expose f-level leakage.

Survival estimates are binomially sampled.  Work is indexed by the
(length, randomization) counter so sequence and shot substreams are
reproducible regardless of execution order; per-length reductions use
numpy's pairwise summation and do not depend on task order either.

The coherence limit implements the first-order bound
    r = d / (2 (d + 1)) * sum_qubits sum_segments tau (1/T1 + 1/T2)
with T2 taken segment-wise (echo value during a flux pulse at the
interaction point, Ramsey value while idling at the sweet spot).  With
d = 2 this is the familiar r = (tau/3)(1/T1 + 1/T2); published
single-qubit limits are reproduced to better than 10% by the idle medians,
so that variant is the one implemented.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .cliffords import (
    C1, CZ, CliffordElement, X90, c1_index, c2_decompose, conjugation_key,
    sample_c2,
)
from .dynamics import (
    DuffingPair, FitDivergence, NoiseParams, PulseWaveform,
    gate_superoperator, single_qubit_gate, single_qubit_superop, virtual_z,
)
from .rng import TAG_BENCH_SEQUENCE, TAG_BENCH_SHOTS, substream

DEFAULT_LENGTHS = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)


class ModelMismatch(ValueError):
    """The noise model cannot execute a primitive in the sequence."""


class RatioOutOfRange(UserWarning):
    """Interleaved decay faster than reference: negative gate error."""


def cz_element() -> CliffordElement:
    """The bare CZ as a two-qubit Clifford (the usual interleaved gate)."""
    return CliffordElement(conjugation_key(CZ), CZ, (("cz",),), 2)


@dataclass(frozen=True)
class Sequence:
    """Random Cliffords plus the recovery inverse, ready to execute."""

    elements: tuple
    m: int
    n_qubits: int
    interleaved: bool = False


def generate_sequence(
    m: int, group: str = "c1", interleave: CliffordElement | None = None,
    seed: int = 0, index: int = 0,
) -> Sequence:
    """Draw m uniform Cliffords (interleaving `interleave` after each when
    given) and append the unique inverse of the whole composition.

    `index` selects the counter-based substream, so (seed, index) pairs
    can be dealt out to parallel workers deterministically.
    """
    if m < 1:
        raise ValueError("sequence length must be at least 1")
    if group not in ("c1", "c2"):
        raise ValueError("group must be 'c1' or 'c2'")
    gen = substream(seed, TAG_BENCH_SEQUENCE, index)

    elements = []
    dim = 2 if group == "c1" else 4
    net = np.eye(dim, dtype=complex)
    for _ in range(m):
        if group == "c1":
            elem = C1[int(gen.integers(24))]
        else:
            elem = sample_c2(gen)
        elements.append(elem)
        net = elem.unitary @ net
        if interleave is not None:
            if interleave.n_qubits != (1 if group == "c1" else 2):
                raise ValueError("interleaved gate acts on the wrong space")
            elements.append(interleave)
            net = interleave.unitary @ net

    if group == "c1":
        recovery = C1[c1_index(net.conj().T)]
    else:
        recovery = c2_decompose(net.conj().T)
    elements.append(recovery)
    return Sequence(tuple(elements), m, 1 if group == "c1" else 2,
                    interleave is not None)


# ---------------------------------------------------------------------------
# Noise models


@dataclass(frozen=True)
class DepolarizingModel:
    """Uniform depolarizing noise applied once per Clifford.

    `retention` is the probability the state is left untouched; the
    depolarizing probability is 1 - retention and the RB decay base p
    equals retention.  `interleaved_retention`, when set, replaces the
    retention on interleaved slots only, so a fixed gate can carry its own
    strength in interleaved runs while the Clifford draws keep the
    reference value.
    """

    retention: float
    n_qubits: int = 1
    interleaved_retention: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.retention <= 1.0:
            raise ValueError("retention must lie in [0, 1]")
        if self.interleaved_retention is not None \
                and not 0.0 <= self.interleaved_retention <= 1.0:
            raise ValueError("retention must lie in [0, 1]")


@dataclass(frozen=True)
class ChannelModel:
    """Primitive-level superoperator table.

    channels maps "x90" / "x180" / "cz" (or ("x90", qubit) for per-qubit
    overrides) to column-stacked superoperators on `levels`-dimensional
    qudits; virtual-Z is always the exact zero-duration frame update.
    `idle` optionally maps qubit index to a one-pulse-slot idling channel;
    when present, two-qubit layers pad the idle qubit with it so both
    qubits see wall-clock time (slots between CZs are aligned pairwise).
    """

    channels: dict
    levels: int = 2
    n_qubits: int = 1
    idle: dict | None = None

    def channel(self, name: str, qubit: int) -> np.ndarray:
        got = self.channels.get((name, qubit))
        if got is None:
            got = self.channels.get(name)
        if got is None and name == "x180":
            x90 = self.channels.get(("x90", qubit),
                                    self.channels.get("x90"))
            if x90 is not None:
                return x90 @ x90
        if got is None:
            raise ModelMismatch("model has no channel for %r" % name)
        return got


def unitary_superop(u: np.ndarray) -> np.ndarray:
    """Column-stacked superoperator of rho -> u rho u^dag."""
    return np.kron(u.conj(), u)


def _embedded(u2: np.ndarray, levels: int) -> np.ndarray:
    out = np.eye(levels, dtype=complex)
    out[:2, :2] = u2
    return out


def noiseless_channel_model(n_qubits: int = 1, levels: int = 2
                            ) -> ChannelModel:
    """Exact unitary superoperators for every primitive (leakage-free)."""
    x90 = unitary_superop(_embedded(X90, levels))
    channels = {"x90": x90, "x180": x90 @ x90}
    if n_qubits == 2:
        cz = np.eye(levels * levels, dtype=complex)
        cz[levels + 1, levels + 1] = -1.0
        channels["cz"] = unitary_superop(cz)
    return ChannelModel(channels, levels, n_qubits)


def single_qubit_channel_model(
    alpha_ghz: float, t1_us: float, t2_star_us: float,
    duration_ns: float = 40.0, sample_ns: float = 0.5, levels: int = 3,
) -> ChannelModel:
    """Dynamics-backed single-qubit model: squared-cosine pulses evolved
    under the driven Duffing Lindbladian at the idle coherence times."""
    w90, _ = single_qubit_gate(0.5 * math.pi, duration_ns=duration_ns,
                               sample_ns=sample_ns)
    w180, _ = single_qubit_gate(math.pi, duration_ns=duration_ns,
                                sample_ns=sample_ns)
    widle = PulseWaveform(np.zeros(w90.samples.size), sample_ns)
    mk = lambda w: single_qubit_superop(w, alpha_ghz, t1_us, t2_star_us,
                                        levels=levels)
    return ChannelModel(
        {"x90": mk(w90), "x180": mk(w180)}, levels, 1,
        idle={0: mk(widle)})


def cz_channel_model(
    pair: DuffingPair, w1: PulseWaveform, w2: PulseWaveform,
    noise: NoiseParams | None = None,
    virtual_z: tuple[float, float] = (0.0, 0.0),
    duration_ns: float = 40.0, sample_ns: float = 0.5,
) -> ChannelModel:
    """Dynamics-backed two-qubit model around a calibrated CZ pulse.

    Single-qubit pulses run at the idle coherence times (t2_star), the CZ
    uses the echo times via gate_superoperator, and idle slots carry plain
    decoherence so both qubits age through every layer.
    """
    levels = pair.qubit1.levels
    if pair.qubit2.levels != levels:
        raise ModelMismatch("mixed qutrit sizes are not supported")
    channels = {"cz": gate_superoperator(pair, w1, w2, noise,
                                         virtual_z=virtual_z)}
    idle = {}
    for q, spec in enumerate((pair.qubit1, pair.qubit2)):
        if noise is None:
            u90 = _embedded(X90, levels)
            channels[("x90", q)] = unitary_superop(u90)
            channels[("x180", q)] = unitary_superop(u90 @ u90)
        else:
            w90, _ = single_qubit_gate(0.5 * math.pi,
                                       duration_ns=duration_ns,
                                       sample_ns=sample_ns)
            w180, _ = single_qubit_gate(math.pi, duration_ns=duration_ns,
                                        sample_ns=sample_ns)
            widle = PulseWaveform(np.zeros(w90.samples.size), sample_ns)
            t1 = noise.t1_us[q]
            t2 = noise.t2_star_us[q]
            alpha = spec.alpha_ghz
            channels[("x90", q)] = single_qubit_superop(
                w90, alpha, t1, t2, levels=levels)
            channels[("x180", q)] = single_qubit_superop(
                w180, alpha, t1, t2, levels=levels)
            idle[q] = single_qubit_superop(widle, alpha, t1, t2,
                                           levels=levels)
    return ChannelModel(channels, levels, 2, idle=idle or None)


# ---------------------------------------------------------------------------
# Execution


def _apply_superop(s: np.ndarray, rho: np.ndarray) -> np.ndarray:
    dim = rho.shape[0]
    return (s @ rho.reshape(-1, order="F")).reshape(dim, dim, order="F")


def _apply_one_qubit(s: np.ndarray, rho: np.ndarray, levels: int,
                     qubit: int) -> np.ndarray:
    """Apply a single-qudit superoperator to one factor of a two-qudit
    density matrix."""
    l = levels
    s4 = s.reshape(l, l, l, l, order="F")  # [r', c', r, c]
    r4 = rho.reshape(l, l, l, l)           # [r1, r2, c1, c2]
    if qubit == 0:
        out = np.einsum("pqrs,rasb->paqb", s4, r4)
    else:
        out = np.einsum("pqrs,arbs->apbq", s4, r4)
    return np.ascontiguousarray(out.reshape(l * l, l * l))


def _vz_superop(theta: float, levels: int) -> np.ndarray:
    return unitary_superop(virtual_z(theta, levels))


def _split_layers(circuit):
    """Group a two-qubit circuit into per-qubit pulse slots between CZs.

    Yields ("cz",) markers and ("slots", per_qubit_lists) blocks where each
    list holds (primitive, vz-prefix) entries; virtual-Z costs no slot.
    """
    block = ([], [])
    pending_vz = [[], []]
    for prim in circuit:
        if prim[0] == "cz":
            yield "slots", block, pending_vz
            yield "cz", None, None
            block = ([], [])
            pending_vz = [[], []]
        elif prim[0] == "vz":
            pending_vz[prim[1]].append(prim)
        else:
            q = prim[1]
            block[q].append((prim, tuple(pending_vz[q])))
            pending_vz[q] = []
    yield "slots", block, pending_vz


def _apply_circuit_2q(rho, circuit, model: ChannelModel):
    lv = model.levels
    for kind, block, pending in _split_layers(circuit):
        if kind == "cz":
            rho = _apply_superop(model.channel("cz", 0), rho)
            continue
        n_slots = max(len(block[0]), len(block[1]))
        for k in range(n_slots):
            for q in (0, 1):
                if k < len(block[q]):
                    prim, vzs = block[q][k]
                    for vz in vzs:
                        rho = _apply_one_qubit(
                            _vz_superop(vz[2], lv), rho, lv, q)
                    rho = _apply_one_qubit(
                        model.channel(prim[0], q), rho, lv, q)
                elif model.idle is not None and q in model.idle:
                    rho = _apply_one_qubit(model.idle[q], rho, lv, q)
        for q in (0, 1):
            for vz in pending[q]:
                rho = _apply_one_qubit(_vz_superop(vz[2], lv), rho, lv, q)
    return rho


def _apply_circuit_1q(rho, circuit, model: ChannelModel):
    lv = model.levels
    for prim in circuit:
        if prim[0] == "vz":
            s = _vz_superop(prim[2], lv)
        else:
            s = model.channel(prim[0], 0)
        rho = _apply_superop(s, rho)
    return rho


def _ground_and_leak(rho: np.ndarray, levels: int, n_qubits: int):
    pops = np.real(np.diag(rho))
    if n_qubits == 1:
        leak = float(pops[2:].sum()) if levels > 2 else 0.0
    else:
        pops2 = pops.reshape(levels, levels)
        if levels > 2:
            leak = float(pops2[2:, :].sum() + pops2[:2, 2:].sum())
        else:
            leak = 0.0
    return float(pops[0]), leak


def _run_sequence(seq: Sequence, model) -> tuple[float, float]:
    """Exact ground-state survival and f-level population after `seq`."""
    if isinstance(model, DepolarizingModel):
        if model.n_qubits != seq.n_qubits:
            raise ModelMismatch("model acts on %d qubits, sequence on %d"
                                % (model.n_qubits, seq.n_qubits))
        d = 2 ** seq.n_qubits
        rho = np.zeros((d, d), dtype=complex)
        rho[0, 0] = 1.0
        mix = np.eye(d) / d
        # Interleaved sequences hold the fixed gate at odd slots; the
        # recovery at the end always depolarizes at the reference rate.
        for i, elem in enumerate(seq.elements):
            rho = elem.unitary @ rho @ elem.unitary.conj().T
            r = model.retention
            if (model.interleaved_retention is not None and seq.interleaved
                    and i % 2 == 1 and i < 2 * seq.m):
                r = model.interleaved_retention
            rho = r * rho + (1.0 - r) * mix
        return float(np.real(rho[0, 0])), 0.0
    if isinstance(model, ChannelModel):
        if model.n_qubits != seq.n_qubits:
            raise ModelMismatch("model acts on %d qubits, sequence on %d"
                                % (model.n_qubits, seq.n_qubits))
        dim = model.levels ** seq.n_qubits
        rho = np.zeros((dim, dim), dtype=complex)
        rho[0, 0] = 1.0
        for elem in seq.elements:
            if seq.n_qubits == 1:
                rho = _apply_circuit_1q(rho, elem.circuit, model)
            else:
                rho = _apply_circuit_2q(rho, elem.circuit, model)
        return _ground_and_leak(rho, model.levels, seq.n_qubits)
    raise ModelMismatch("unknown noise model %r" % type(model).__name__)


def execute(
    sequences, model, shots: int | None = 1000, seed: int = 0,
    index_base: int = 0, return_leakage: bool = False,
):
    """Survival estimates for each sequence via binomial sampling.

    shots=None reports exact populations.  Shot substreams are indexed by
    index_base + position, so batches dispatched to different workers stay
    reproducible.  With return_leakage the result is (survivals,
    f_populations); leakage draws its own binomial from the same stream.
    """
    survivals = np.empty(len(sequences))
    leaks = np.empty(len(sequences))
    for i, seq in enumerate(sequences):
        p, leak = _run_sequence(seq, model)
        if shots is None:
            survivals[i], leaks[i] = p, leak
        else:
            gen = substream(seed, TAG_BENCH_SHOTS, index_base + i)
            survivals[i] = gen.binomial(
                shots, min(max(p, 0.0), 1.0)) / shots
            leaks[i] = gen.binomial(
                shots, min(max(leak, 0.0), 1.0)) / shots
    if return_leakage:
        return survivals, leaks
    return survivals


def _retag(circuit, qubit: int):
    return tuple((p[0], qubit) + p[2:] for p in circuit)


def execute_simultaneous(
    sequence_pairs, models, shots: int | None = 1000, seed: int = 0,
    index_base: int = 0, zz_rad_per_layer: float = 0.0,
):
    """Independent single-qubit C1 sequences on both qubits at once;
    survival is reported per qubit, shape (n, 2).

    By default nothing couples the qubits (their pulse slots are merely
    aligned, with idle channels padding the shorter layer when the models
    carry them).  A static ZZ phase per Clifford layer can be enabled to
    model spectator error from residual coupling.
    """
    ma, mb = models
    if not (isinstance(ma, ChannelModel) and isinstance(mb, ChannelModel)):
        raise ModelMismatch("simultaneous mode needs two channel models")
    if ma.levels != mb.levels or ma.n_qubits != 1 or mb.n_qubits != 1:
        raise ModelMismatch("need two single-qubit models of equal size")
    lv = ma.levels
    idle = {}
    if ma.idle and 0 in ma.idle:
        idle[0] = ma.idle[0]
    if mb.idle and 0 in mb.idle:
        idle[1] = mb.idle[0]
    joint = ChannelModel(
        {("x90", 0): ma.channel("x90", 0), ("x180", 0): ma.channel("x180", 0),
         ("x90", 1): mb.channel("x90", 0), ("x180", 1): mb.channel("x180", 0)},
        lv, 2, idle=idle or None)
    zz = None
    if zz_rad_per_layer != 0.0:
        n = np.arange(lv)
        phase = np.exp(-1j * zz_rad_per_layer * np.outer(n, n))
        zz = unitary_superop(np.diag(phase.reshape(-1)))

    out = np.empty((len(sequence_pairs), 2))
    for i, (sa, sb) in enumerate(sequence_pairs):
        if sa.n_qubits != 1 or sb.n_qubits != 1 or sa.m != sb.m:
            raise ModelMismatch("simultaneous mode takes equal-length "
                                "single-qubit sequences")
        rho = np.zeros((lv * lv, lv * lv), dtype=complex)
        rho[0, 0] = 1.0
        for ea, eb in zip(sa.elements, sb.elements):
            layer = _retag(ea.circuit, 0) + _retag(eb.circuit, 1)
            rho = _apply_circuit_2q(rho, layer, joint)
            if zz is not None:
                rho = _apply_superop(zz, rho)
        pops = np.real(np.diag(rho)).reshape(lv, lv)
        pa = float(pops.sum(axis=1)[0])
        pb = float(pops.sum(axis=0)[0])
        if shots is None:
            out[i] = (pa, pb)
        else:
            gen = substream(seed, TAG_BENCH_SHOTS, index_base + i)
            out[i, 0] = gen.binomial(shots, min(max(pa, 0.0), 1.0)) / shots
            out[i, 1] = gen.binomial(shots, min(max(pb, 0.0), 1.0)) / shots
    return out


# ---------------------------------------------------------------------------
# Fits and rates


@dataclass(frozen=True)
class DecayFit:
    a: float
    p: float
    b: float
    covariance: np.ndarray
    clamped: bool = False

    @property
    def p_err(self) -> float:
        return float(np.sqrt(np.abs(self.covariance[1, 1])))


def fit_decay(lengths, survivals, stddevs=None, d: int = 2) -> DecayFit:
    """Weighted nonlinear least squares of A p^m + B.

    B starts at the fully mixed asymptote 1/d.  A base outside (0, 1]
    raises FitDivergence, except that numerically marginal p <= 1 + 1e-6
    is clamped to 1 and flagged.
    """
    m = np.asarray(lengths, dtype=float)
    s = np.asarray(survivals, dtype=float)
    if m.size < 3 or np.unique(m).size < 3:
        raise ValueError("need at least 3 distinct lengths")
    b0 = 1.0 / d
    if np.ptp(s) == 0.0:
        # Constant survivals carry no decay information; report no decay
        # with zero uncertainty instead of letting the optimizer wander
        # the flat a/p trade-off surface.
        return DecayFit(float(s[0]) - b0, 1.0, b0, np.zeros((3, 3)))
    a0 = s[np.argmin(m)] - b0
    if abs(a0) < 1e-3:
        a0 = 1.0 - b0
    top = s[np.argmin(m)] - b0
    bot = s[np.argmax(m)] - b0
    if top > 1e-9 and 0.0 < bot < top:
        p0 = float((bot / top) ** (1.0 / (m.max() - m.min())))
    else:
        p0 = 0.99
    sigma = None
    if stddevs is not None:
        sigma = np.asarray(stddevs, dtype=float)
        if np.any(sigma <= 0.0):
            sigma = None

    def model(x, a, p, b):
        return a * np.power(p, x) + b

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            popt, pcov = curve_fit(
                model, m, s, p0=[a0, min(p0, 1.0), b0], sigma=sigma,
                absolute_sigma=sigma is not None, maxfev=20000)
        except RuntimeError as exc:
            raise FitDivergence(str(exc)) from exc
    a, p, b = (float(v) for v in popt)
    if not np.all(np.isfinite(popt)):
        raise FitDivergence("non-finite fit parameters")
    clamped = False
    if p > 1.0 + 1e-6 or p <= 0.0:
        raise FitDivergence("decay base %g outside (0, 1]" % p)
    if p > 1.0:
        p, clamped = 1.0, True
    return DecayFit(a, p, b, np.asarray(pcov), clamped)


def error_rates(p_rb: float, p_irb: float | None = None, d: int = 2,
                divisor: float | None = None) -> dict:
    """EPC and per-gate error from decay bases.

    epc = (d-1)/d (1 - p_rb); with p_irb the interleaved-gate error is
    (d-1)/d (1 - p_irb/p_rb); otherwise divisor (physical pulses per
    Clifford) scales EPC down to a per-gate figure.  p_irb > p_rb is
    reported as a negative epg with a RatioOutOfRange warning, never
    silently clamped.
    """
    for name, p in (("p_rb", p_rb), ("p_irb", p_irb)):
        if p is not None and not 0.0 < p <= 1.0:
            raise ValueError("%s = %g outside (0, 1]" % (name, p))
    scale = (d - 1.0) / d
    out = {"epc": scale * (1.0 - p_rb), "epg": None, "warning": False}
    if p_irb is not None:
        out["epg"] = scale * (1.0 - p_irb / p_rb)
        if p_irb > p_rb:
            out["warning"] = True
            warnings.warn(RatioOutOfRange(
                "interleaved decay %g exceeds reference %g; epg is "
                "negative" % (p_irb, p_rb)))
    elif divisor is not None:
        out["epg"] = out["epc"] / divisor
    return out


def leakage_estimate(lengths, f_populations, stddevs=None,
                     gates_per_step: float = 1.0) -> dict:
    """Per-gate leakage from the rising-saturating model
    L(m) = L_inf (1 - gamma^m); the per-step rate L_inf (1 - gamma) is
    divided by gates_per_step to normalize per interleaved gate."""
    m = np.asarray(lengths, dtype=float)
    f = np.asarray(f_populations, dtype=float)
    if np.max(np.abs(f)) < 1e-12:
        return {"l_inf": 0.0, "gamma": 1.0, "per_gate": 0.0,
                "covariance": np.zeros((2, 2))}
    sigma = None
    if stddevs is not None:
        sigma = np.asarray(stddevs, dtype=float)
        if np.any(sigma <= 0.0):
            sigma = None

    def model(x, l_inf, gamma):
        return l_inf * (1.0 - np.power(gamma, x))

    linf0 = float(np.clip(np.max(f), 1e-6, 1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            popt, pcov = curve_fit(
                model, m, f, p0=[linf0, 0.99], sigma=sigma,
                absolute_sigma=sigma is not None,
                bounds=([0.0, 0.0], [1.0, 1.0]), maxfev=20000)
        except (RuntimeError, ValueError) as exc:
            raise FitDivergence(str(exc)) from exc
    l_inf, gamma = (float(v) for v in popt)
    if not np.all(np.isfinite(popt)):
        raise FitDivergence("non-finite leakage fit")
    return {"l_inf": l_inf, "gamma": gamma,
            "per_gate": l_inf * (1.0 - gamma) / gates_per_step,
            "covariance": np.asarray(pcov)}


def coherence_limit(t1_us, t2_us, duration_ns, d: int = 2) -> float:
    """First-order decoherence bound on average gate error.

    r = d/(2(d+1)) * sum over qubits and segments of tau (1/T1 + 1/T2).
    t1_us: per-qubit scalar or sequence.  duration_ns: scalar or one entry
    per segment.  t2_us: matching shape (per qubit, then per segment), so
    a flux pulse can use echo times while buffers use the idle Ramsey
    times.  Infinite times are allowed and contribute nothing.
    """
    t1 = np.atleast_1d(np.asarray(t1_us, dtype=float))
    durs = np.atleast_1d(np.asarray(duration_ns, dtype=float))
    t2 = np.asarray(t2_us, dtype=float)
    if t2.ndim == 0:
        t2 = np.full((durs.size, t1.size), float(t2))
    elif t2.ndim == 1:
        if durs.size == 1:
            t2 = t2.reshape(1, t1.size)
        elif t1.size == 1:
            t2 = t2.reshape(durs.size, 1)
        else:
            raise ValueError("ambiguous t2 shape")
    if t2.shape != (durs.size, t1.size):
        raise ValueError("t2 must be (segments, qubits)")
    if np.any(t1 <= 0.0) or np.any(t2 <= 0.0) or np.any(durs < 0.0):
        raise ValueError("times must be positive")
    rate = 0.0
    for k, tau in enumerate(durs):
        for q in range(t1.size):
            rate += 1e-3 * tau * (1.0 / t1[q] + 1.0 / t2[k, q])
    return d / (2.0 * (d + 1.0)) * rate


@dataclass(frozen=True)
class CoherenceCDF:
    """Empirical step CDF of repeated coherence-time fits."""

    values: np.ndarray
    median: float

    def evaluate(self, x) -> np.ndarray:
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.searchsorted(self.values, xs, side="right") / \
            self.values.size
        return out if np.ndim(x) else float(out[0])


def coherence_cdf(samples) -> CoherenceCDF:
    v = np.sort(np.asarray(samples, dtype=float))
    if v.size < 1:
        raise ValueError("need at least one sample")
    return CoherenceCDF(v, float(np.median(v)))


# ---------------------------------------------------------------------------
# Experiment orchestration


@dataclass(frozen=True)
class RBResult:
    """Aggregated decay data and derived error rates for one experiment."""

    lengths: np.ndarray
    survival_mean: np.ndarray
    survival_std: np.ndarray
    n_random: int
    shots: int | None
    fit: DecayFit
    epc: float
    epg: float | None = None
    leakage_per_gate: float | None = None
    warning: bool = False

    def as_dict(self) -> dict:
        return {
            "lengths": [int(v) for v in self.lengths],
            "survival_mean": list(map(float, self.survival_mean)),
            "survival_std": list(map(float, self.survival_std)),
            "n_random": self.n_random,
            "shots": self.shots,
            "fit": {"a": self.fit.a, "p": self.fit.p, "b": self.fit.b,
                    "p_err": self.fit.p_err, "clamped": self.fit.clamped,
                    "covariance": self.fit.covariance.tolist()},
            "epc": self.epc,
            "epg": self.epg,
            "leakage_per_gate": self.leakage_per_gate,
            "warning": self.warning,
        }

    def to_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=1)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("m,mean,std,n\n")
            for m, mu, sd in zip(self.lengths, self.survival_mean,
                                 self.survival_std):
                fh.write("%d,%r,%r,%d\n" % (m, mu, sd, self.n_random))


def rb_experiment(
    model, group: str = "c1", lengths=DEFAULT_LENGTHS, n_random: int = 30,
    shots: int | None = 1000, seed: int = 0,
    interleave: CliffordElement | None = None,
    divisor: float | None = None, track_leakage: bool = False,
    leak_gates_per_step: float = 1.0,
) -> RBResult:
    """Generate, execute, and fit one RB experiment.

    Tasks are indexed by (length, randomization) with counter-based
    substreams, so any execution order gives identical results.  Leakage is
    reported per sequence step unless leak_gates_per_step says how many
    leaking gates each step contains; attributing leakage to an interleaved
    gate alone is cleaner as a difference of per-step rates between the
    interleaved and reference runs.
    """
    lengths = np.asarray(lengths, dtype=int)
    d = 2 if group == "c1" else 4
    means = np.empty(lengths.size)
    stds = np.empty(lengths.size)
    leak_means = np.empty(lengths.size)
    leak_stds = np.empty(lengths.size)
    for li, m in enumerate(lengths):
        seqs = [generate_sequence(int(m), group, interleave, seed,
                                  index=li * n_random + ri)
                for ri in range(n_random)]
        surv, leak = execute(seqs, model, shots, seed,
                             index_base=li * n_random,
                             return_leakage=True)
        means[li] = np.mean(surv)
        stds[li] = (np.std(surv, ddof=1) / math.sqrt(n_random)
                    if n_random > 1 else 0.0)
        leak_means[li] = np.mean(leak)
        leak_stds[li] = (np.std(leak, ddof=1) / math.sqrt(n_random)
                         if n_random > 1 else 0.0)

    fit = fit_decay(lengths, means, stds if n_random > 1 else None, d)
    rates = error_rates(fit.p, d=d, divisor=divisor)
    leak_rate = None
    if track_leakage:
        leak_rate = leakage_estimate(
            lengths, leak_means, leak_stds if n_random > 1 else None,
            gates_per_step=leak_gates_per_step,
        )["per_gate"] if np.max(leak_means) > 0 else 0.0
    return RBResult(lengths, means, stds, n_random, shots, fit,
                    rates["epc"], rates["epg"], leak_rate,
                    rates["warning"])
