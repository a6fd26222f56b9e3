"""Dispersive readout through a resonator-filter pair.

Three layers live here:

* a two-mode input-output transmission model for the feedline scan
  (`transmission_s21`, `hybridized_linewidths`, `optimal_probe_frequency`),
* a single-shot IQ simulator that propagates the closed-form cavity response
  for each prepared state, splices in relaxation jumps during the
  integration window and adds amplifier noise via an SNR relation
  (`simulate_shots`),
* a three-class Gaussian-mixture classifier and the pre-selected 3x3
  assignment matrix built from it (`fit_classifier`, `assignment_matrix`).

Rates are full linewidths in GHz; the cavity field amplitude therefore
decays as exp(-pi kappa t) with t in ns.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .rng import TAG_READOUT, substream
from .spectrum import ChainParams, FluxPoint, dressed_observables

#: Waveform sample period used for trajectory integration, ns.
SAMPLE_NS = 0.5

#: Ring-down wait between the pre-selection and main readout windows,
#: in units of 1/kappa_r_eff.
RING_DOWN_FACTOR = 10.0

STATE_NAMES = ("g", "e", "f")
STATE_INDEX = {"g": 0, "e": 1, "f": 2}


class ModeMixing(RuntimeError):
    """Hybridized modes are too close to 50/50 to label."""


class EmptyGrid(ValueError):
    """A frequency grid with no points was supplied."""


class SingularCovariance(RuntimeError):
    """A mixture class covariance stayed singular after regularization."""


class EmptyClass(RuntimeError):
    """Pre-selection removed every shot of a prepared state."""


@dataclass(frozen=True)
class ReadoutConfig:
    """Single-shot readout settings.

    `probe_ghz = None` selects the probe frequency that maximizes the
    summed contrast of the model spectra.  `two_step` optionally drives the
    first `two_step[1]` ns at `two_step[0]` times the nominal amplitude to
    populate the resonator faster.  `residual_e` is the excited-state
    population entering state preparation; pre-selection exists to catch it.
    """

    integration_ns: float
    amplitude: float
    eta: float
    shots: int
    probe_ghz: float | None = None
    two_step: tuple[float, float] | None = None
    seed: int = 0
    residual_e: float = 0.0

    def __post_init__(self) -> None:
        if self.integration_ns <= 0.0:
            raise ValueError("integration time must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("eta must lie in (0, 1]")
        if self.shots < 100:
            raise ValueError("need at least 100 shots per prepared state")
        if not 0.0 <= self.residual_e < 1.0:
            raise ValueError("residual_e must lie in [0, 1)")


@dataclass(frozen=True)
class LinewidthReport:
    """Effective linewidths and positions of the hybridized pair, GHz."""

    kappa_r_eff: float
    kappa_p_eff: float
    f_resonator_mode: float
    f_filter_mode: float
    resonator_weight: float


def state_resonator_frequencies(
    c: ChainParams, flux: FluxPoint = FluxPoint(0.0)
) -> dict[int, float]:
    """Qubit-state-conditioned resonator frequency with the filter detached.

    These are the inputs to the two-mode feedline model, which performs the
    resonator-filter hybridization itself.
    """
    bare = dataclasses.replace(c, j_rp=0.0)
    return dressed_observables(bare, flux).f_res


def mode_linewidths(
    omega_r: float, omega_p: float, j_rp: float,
    kappa_p: float, kappa_int: float = 0.0,
) -> LinewidthReport:
    """Eigenvalues of the non-Hermitian two-mode matrix.

    The matrix is [[omega_r - i kappa_int / 2, J], [J, omega_p - i
    kappa_p / 2]]; each eigenvalue's real part is a hybridized mode
    frequency and -2x its imaginary part the mode's effective linewidth.
    Modes are labeled by eigenvector weight on the resonator entry.
    """
    m = np.array([[omega_r - 0.5j * kappa_int, j_rp],
                  [j_rp, omega_p - 0.5j * kappa_p]])
    evals, evecs = np.linalg.eig(m)
    weights = np.abs(evecs[0, :]) ** 2 / np.sum(np.abs(evecs) ** 2, axis=0)
    if np.all(np.abs(weights - 0.5) < 0.01):
        raise ModeMixing(
            "both modes within 1% of an even resonator/filter split")
    r = int(np.argmax(weights))
    p = 1 - r
    return LinewidthReport(
        kappa_r_eff=-2.0 * float(evals[r].imag),
        kappa_p_eff=-2.0 * float(evals[p].imag),
        f_resonator_mode=float(evals[r].real),
        f_filter_mode=float(evals[p].real),
        resonator_weight=float(weights[r]),
    )


def hybridized_linewidths(
    c: ChainParams, qubit_state: str = "g",
    flux: FluxPoint = FluxPoint(0.0),
) -> LinewidthReport:
    """Mode linewidths with the resonator pulled by the given qubit state."""
    f_res = state_resonator_frequencies(c, flux)[STATE_INDEX[qubit_state]]
    return mode_linewidths(f_res, c.omega_p, c.j_rp, c.kappa_p, c.kappa_int)


def two_mode_s21(
    freqs: np.ndarray, nu_r: float, nu_p: float, j_rp: float,
    kappa_p: float, kappa_int: float = 0.0,
) -> np.ndarray:
    """Feedline transmission of a filter-resonator pair, per grid point.

    Input-output model of a filter at nu_p side-coupled to the feedline at
    rate kappa_p and exchange-coupled at j_rp to a resonator at nu_r;
    |S21| -> 1 far from both modes.
    """
    freqs = np.asarray(freqs, dtype=float)
    d_p = -1j * (freqs - nu_p) + 0.5 * kappa_p
    if j_rp == 0.0:
        denom = d_p
    else:
        d_r = -1j * (freqs - nu_r) + 0.5 * kappa_int
        with np.errstate(divide="ignore", invalid="ignore"):
            shift = np.where(d_r != 0.0, j_rp ** 2 / d_r, np.inf)
        denom = d_p + shift
    with np.errstate(invalid="ignore"):
        s21 = 1.0 - 0.5 * kappa_p / denom
    return np.where(np.isinf(denom), 1.0, s21)


def transmission_s21(
    c: ChainParams, qubit_state: str, freqs: np.ndarray,
    flux: FluxPoint = FluxPoint(0.0),
) -> np.ndarray:
    """two_mode_s21 with the resonator pulled by the given qubit state."""
    nu_r = state_resonator_frequencies(c, flux)[STATE_INDEX[qubit_state]]
    return two_mode_s21(freqs, nu_r, c.omega_p, c.j_rp, c.kappa_p,
                        c.kappa_int)


def optimal_probe_frequency(
    freqs: np.ndarray, s21_g: np.ndarray, s21_e: np.ndarray,
    s21_f: np.ndarray,
) -> float:
    """Probe frequency maximizing the summed three-state contrast.

    Objective: ||S21_g| - |S21_e|| + ||S21_e| - |S21_f||, evaluated on the
    common grid; ties break toward the lowest frequency.
    """
    freqs = np.asarray(freqs, dtype=float)
    if freqs.size == 0:
        raise EmptyGrid("probe optimization needs a non-empty grid")
    contrast = (np.abs(np.abs(s21_g) - np.abs(s21_e))
                + np.abs(np.abs(s21_e) - np.abs(s21_f)))
    order = np.argsort(freqs, kind="stable")
    best = order[int(np.argmax(contrast[order]))]
    return float(freqs[best])


@dataclass
class IQShotSet:
    """Single-shot records: prepared state, main and pre-selection voltages.

    `prepared` holds state codes (0, 1, 2) = (g, e, f); voltages are complex
    integrated IQ values.  `sigma` is the per-quadrature noise applied and
    `separation` the g/e mean-voltage distance, kept for diagnostics.
    """

    prepared: np.ndarray
    voltage: np.ndarray
    presel: np.ndarray
    probe_ghz: float
    kappa_r_eff: float
    sigma: float
    separation: float
    #: Per-shot flag: the qubit state changed during the main window.
    jumped: np.ndarray = field(default=None)

    def points(self) -> np.ndarray:
        return np.column_stack([self.voltage.real, self.voltage.imag])

    def presel_points(self) -> np.ndarray:
        return np.column_stack([self.presel.real, self.presel.imag])

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("prepared_state,i,q,presel_i,presel_q\n")
            for s, v, p in zip(self.prepared, self.voltage, self.presel):
                fh.write("%s,%r,%r,%r,%r\n" % (
                    STATE_NAMES[s], v.real, v.imag, p.real, p.imag))


def _mean_trajectories(
    deltas: np.ndarray, kappa: float, drive: np.ndarray
) -> np.ndarray:
    """Closed-form cavity response per state for a piecewise-constant drive.

    Returns an array (3, n_samples) of the noiseless field trajectory for a
    qubit frozen in each state.
    """
    lam = 1j * 2.0 * np.pi * deltas + np.pi * kappa  # per-state decay rate
    decay = np.exp(-lam * SAMPLE_NS)
    gain = np.where(lam != 0.0, (1.0 - decay) / lam, SAMPLE_NS)
    out = np.zeros((3, drive.size), dtype=complex)
    alpha = np.zeros(3, dtype=complex)
    for k in range(drive.size):
        alpha = alpha * decay + drive[k] * gain
        out[:, k] = alpha
    return out


def _drive_samples(r: ReadoutConfig, n: int) -> np.ndarray:
    drive = np.full(n, r.amplitude)
    if r.two_step is not None:
        scale, dur = r.two_step
        drive[:int(round(dur / SAMPLE_NS))] *= scale
    return drive


def _jump_segments(
    start: np.ndarray, tau1: np.ndarray, tau2: np.ndarray, n: int
) -> np.ndarray:
    """Per-shot, per-sample state index given sequential decay times.

    `start` is the state at t=0.  A shot starting in f decays f->e at tau1
    (scale t1/2) and e->g at tau1+tau2; a shot starting in e decays at tau1.
    """
    t = (np.arange(n) + 1.0) * SAMPLE_NS  # state during (k dt, (k+1) dt]
    shots = start.size
    sidx = np.zeros((shots, n), dtype=np.int8)
    is_e = start == 1
    is_f = start == 2
    sidx[is_e] = np.where(t[None, :] < tau1[is_e, None], 1, 0)
    first = tau1[is_f, None]
    second = (tau1 + tau2)[is_f, None]
    sidx[is_f] = np.where(t[None, :] < first, 2,
                          np.where(t[None, :] < second, 1, 0))
    return sidx


def _integrate_shots(
    sidx: np.ndarray, deltas: np.ndarray, kappa: float,
    drive: np.ndarray, weights: np.ndarray,
) -> np.ndarray:
    """Weighted integral of per-shot trajectories with state switching."""
    lam = 1j * 2.0 * np.pi * deltas + np.pi * kappa
    decay = np.exp(-lam * SAMPLE_NS)
    gain = np.where(lam != 0.0, (1.0 - decay) / lam, SAMPLE_NS)
    alpha = np.zeros(sidx.shape[0], dtype=complex)
    v = np.zeros(sidx.shape[0], dtype=complex)
    for k in range(drive.size):
        s = sidx[:, k]
        alpha = alpha * decay[s] + drive[k] * gain[s]
        v += weights[k] * alpha
    return v * SAMPLE_NS


def simulate_shots(
    c: ChainParams, r: ReadoutConfig, t1_us: float,
    flux: FluxPoint = FluxPoint(0.0),
) -> IQShotSet:
    """Generate pre-selection and main single-shot voltages for g, e, f.

    Each prepared state gets `r.shots` records.  The qubit entering
    preparation is |e> with probability `r.residual_e` (observable in the
    pre-selection readout and corrupting the prepared state), relaxation
    jumps are drawn from counter-based exponential streams, and the noise
    standard deviation per quadrature follows
    SNR^2 = 2 eta kappa_r T_int <|alpha_e - alpha_g|^2>_t.
    """
    if t1_us <= 0.0:
        raise ValueError("t1 must be positive")
    f_res = state_resonator_frequencies(c, flux)
    lw = mode_linewidths(f_res[0], c.omega_p, c.j_rp, c.kappa_p, c.kappa_int)
    kappa = lw.kappa_r_eff

    n = int(round(r.integration_ns / SAMPLE_NS))
    drive = _drive_samples(r, n)
    probe = r.probe_ghz
    if probe is None:
        span = 6.0 * (c.kappa_p + abs(f_res[0] - c.omega_p))
        grid = np.linspace(c.omega_p - span, c.omega_p + span, 2001)
        probe = optimal_probe_frequency(
            grid, *(transmission_s21(c, s, grid, flux) for s in STATE_NAMES))
    deltas = np.array([f_res[s] for s in range(3)]) - probe

    means = _mean_trajectories(deltas, kappa, drive)
    diff = means[1] - means[0]
    norm = float(np.sqrt(np.sum(np.abs(diff) ** 2) * SAMPLE_NS))
    weights = np.conj(diff) / norm
    # Separation of the g/e mean voltages equals `norm` by construction;
    # the SNR relation then fixes sigma independent of the drive scale.
    snr = np.sqrt(2.0 * r.eta * kappa * np.sum(np.abs(diff) ** 2) * SAMPLE_NS)
    sigma = norm / snr

    t1 = 1e3 * t1_us  # ns
    gap = RING_DOWN_FACTOR / kappa
    exposure = r.integration_ns + gap  # pre-selection window plus ring-down

    prepared = []
    voltage = []
    presel = []
    jumped = []
    for target in range(3):
        gen = substream(r.seed, TAG_READOUT, target)
        u = gen.random(r.shots)
        pre_tau1 = gen.exponential(t1, r.shots)
        pre_tau2 = gen.exponential(t1, r.shots)
        main_tau1 = gen.exponential(t1, r.shots)
        main_tau2 = gen.exponential(t1, r.shots)
        noise = gen.standard_normal((r.shots, 4))

        initial = np.where(u < r.residual_e, 1, 0)
        sidx_pre = _jump_segments(initial, pre_tau1, pre_tau2, n)
        v_pre = _integrate_shots(sidx_pre, deltas, kappa, drive, weights)
        v_pre = v_pre + sigma * (noise[:, 0] + 1j * noise[:, 1])

        # State entering preparation: a residual |e> that survived the
        # pre-selection window and the ring-down gap is still |e>.
        at_prep = np.where((initial == 1) & (pre_tau1 > exposure), 1, 0)
        # Preparation maps g -> target; a leftover |e> is mis-rotated:
        # target g leaves it in e, targets e and f send it to g.
        main_state = np.where(at_prep == 0, target,
                              1 if target == 0 else 0).astype(np.int8)
        scale = np.where(main_state == 2, 0.5, 1.0)
        sidx = _jump_segments(main_state, main_tau1 * scale, main_tau2, n)
        v = _integrate_shots(sidx, deltas, kappa, drive, weights)
        v = v + sigma * (noise[:, 2] + 1j * noise[:, 3])

        prepared.append(np.full(r.shots, target, dtype=np.int8))
        voltage.append(v)
        presel.append(v_pre)
        jumped.append(sidx[:, -1] != main_state)

    return IQShotSet(
        prepared=np.concatenate(prepared),
        voltage=np.concatenate(voltage),
        presel=np.concatenate(presel),
        probe_ghz=float(probe),
        kappa_r_eff=kappa,
        sigma=float(sigma),
        separation=norm,
        jumped=np.concatenate(jumped),
    )


@dataclass
class GaussianMixture:
    """Three bivariate Gaussians with weights; classify by max posterior."""

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray
    log_likelihood: float = 0.0
    iterations: int = 0

    def _log_prob(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((x.shape[0], 3))
        for k in range(3):
            diff = x - self.means[k]
            cov = self.covs[k]
            det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
            inv = np.array([[cov[1, 1], -cov[0, 1]],
                            [-cov[1, 0], cov[0, 0]]]) / det
            maha = np.einsum("ni,ij,nj->n", diff, inv, diff)
            out[:, k] = (np.log(self.weights[k])
                         - 0.5 * (maha + np.log(det))
                         - np.log(2.0 * np.pi))
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self._log_prob(np.asarray(x)), axis=1)


def _regularize(cov: np.ndarray) -> np.ndarray:
    cov = cov + 1e-9 * np.trace(cov) * np.eye(2)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if not np.isfinite(det) or det <= 0.0:
        raise SingularCovariance("class covariance is singular")
    return cov


def fit_classifier(
    shots: IQShotSet, max_iter: int = 200, tol: float = 1e-9
) -> GaussianMixture:
    """Fit the three-class Gaussian mixture to the pooled IQ points.

    EM is initialized from the per-prepared-state sample means and
    covariances, so the fit is deterministic given the input.
    """
    x = shots.points()
    labels = shots.prepared
    if min(np.sum(labels == k) for k in range(3)) < 100:
        raise ValueError("need at least 100 shots per prepared state")

    means = np.stack([x[labels == k].mean(axis=0) for k in range(3)])
    covs = np.stack([
        _regularize(np.cov(x[labels == k].T, bias=True)) for k in range(3)])
    weights = np.array([(labels == k).mean() for k in range(3)])

    model = GaussianMixture(means, covs, weights)
    prev = -np.inf
    for it in range(1, max_iter + 1):
        logp = model._log_prob(x)
        top = logp.max(axis=1, keepdims=True)
        p = np.exp(logp - top)
        norm = p.sum(axis=1, keepdims=True)
        resp = p / norm
        ll = float(np.mean(np.log(norm[:, 0]) + top[:, 0]))

        nk = resp.sum(axis=0)
        if np.any(nk <= 0.0):
            raise SingularCovariance("a mixture class lost all weight")
        means = resp.T @ x / nk[:, None]
        covs = np.empty((3, 2, 2))
        for k in range(3):
            diff = x - means[k]
            covs[k] = _regularize(
                (resp[:, k, None] * diff).T @ diff / nk[k])
        model = GaussianMixture(means, covs, nk / x.shape[0], ll, it)
        if abs(ll - prev) < tol:
            break
        prev = ll
    return model


@dataclass(frozen=True)
class AssignmentResult:
    """3x3 assignment probabilities with pre-selection bookkeeping.

    `matrix[prepared][assigned]` rows are normalized over retained shots;
    `discarded[prepared]` is the fraction removed by pre-selection.
    """

    matrix: np.ndarray
    discarded: np.ndarray
    mean_error: float

    def as_dict(self) -> dict:
        return {
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "discarded": [float(v) for v in self.discarded],
            "mean_error": float(self.mean_error),
        }


def assignment_matrix(
    shots: IQShotSet, classifier: GaussianMixture, preselect: bool = True
) -> AssignmentResult:
    """Classify the shot set, optionally dropping non-g pre-selections."""
    assigned = classifier.predict(shots.points())
    if preselect:
        keep = classifier.predict(shots.presel_points()) == 0
    else:
        keep = np.ones(assigned.size, dtype=bool)

    matrix = np.zeros((3, 3))
    discarded = np.zeros(3)
    for prep in range(3):
        sel = shots.prepared == prep
        kept = sel & keep
        total = int(np.sum(sel))
        retained = int(np.sum(kept))
        discarded[prep] = 1.0 - retained / total
        if retained == 0:
            raise EmptyClass(
                "pre-selection removed every prepared-%s shot"
                % STATE_NAMES[prep])
        counts = np.bincount(assigned[kept], minlength=3)
        matrix[prep] = counts / retained
    return AssignmentResult(
        matrix=matrix,
        discarded=discarded,
        mean_error=float(1.0 - np.trace(matrix) / 3.0),
    )
