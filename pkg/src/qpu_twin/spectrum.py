"""Coupled transmon / readout-resonator / filter spectrum model.

The physical unit conventions used throughout the package are fixed here:
all energies and frequencies are ordinary frequencies (nu = omega / 2 pi) in
GHz, flux is expressed in units of the flux quantum, and time is in ns.
Angular factors of 2 pi appear only inside time propagators.

The workhorse is the three-mode product Hamiltonian

    H / h = sum_j eps_j |j><j|  +  nu_r a'a  +  nu_p b'b
            + i g_qr n (a' - a)  -  J_rp (a - a') (b - b')

with the transmon pre-diagonalized in the charge basis, `n` its charge
operator expressed in the kept eigenbasis, `a` the readout resonator and `b`
the filter mode.  Dressed levels are labeled by their dominant bare product
state so that downstream code can ask for, e.g., the resonator frequency
conditioned on the qubit state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla


class TruncationError(ValueError):
    """Requested more transmon eigenstates than the charge basis holds."""


class LabelAmbiguity(RuntimeError):
    """A dressed state required downstream has no dominant bare label."""


@dataclass(frozen=True)
class FluxPoint:
    """External flux through the SQUID loop, in units of the flux quantum."""

    phi: float = 0.0


@dataclass(frozen=True)
class TransmonParams:
    """Asymmetric-SQUID transmon parameters.

    Attributes
    ----------
    ej_max:
        Maximum Josephson energy E_J,max / h in GHz.
    ec:
        Charging energy E_c / h in GHz.
    asym:
        Junction asymmetry d in [0, 1); the qubit frequency at half a flux
        quantum scales with sqrt(d).
    charge_cutoff:
        Charge basis spans n in [-charge_cutoff, charge_cutoff].
    levels_kept:
        Number of transmon eigenstates kept in product-space models.
    """

    ej_max: float
    ec: float
    asym: float = 0.0
    charge_cutoff: int = 20
    levels_kept: int = 5

    def __post_init__(self) -> None:
        if self.ej_max <= 0.0 or self.ec <= 0.0:
            raise ValueError("ej_max and ec must be positive")
        if self.ej_max / self.ec <= 10.0:
            raise ValueError("ej_max / ec must exceed 10 (transmon regime)")
        if not 0.0 <= self.asym < 1.0:
            raise ValueError("asym must lie in [0, 1)")
        if self.charge_cutoff < 10:
            raise ValueError("charge_cutoff must be at least 10")
        if self.levels_kept < 3:
            raise ValueError("levels_kept must be at least 3")
        if self.levels_kept > 2 * self.charge_cutoff + 1:
            raise TruncationError(
                "levels_kept exceeds the charge-basis dimension")


@dataclass(frozen=True)
class ChainParams:
    """One qubit's readout chain: transmon, resonator and filter.

    Rates (kappa_p, kappa_int) are full widths in ordinary frequency (GHz),
    matching the linewidths read off a transmission scan.
    """

    transmon: TransmonParams
    omega_r_bare: float
    omega_p: float
    g_qr: float
    j_rp: float
    kappa_p: float
    kappa_int: float = 0.0
    n_r: int = 5
    n_p: int = 5

    def __post_init__(self) -> None:
        if self.omega_r_bare <= 0.0 or self.omega_p <= 0.0:
            raise ValueError("mode frequencies must be positive")
        if self.g_qr < 0.0 or self.j_rp < 0.0:
            raise ValueError("couplings must be non-negative")
        if self.kappa_p < 0.0 or self.kappa_int < 0.0:
            raise ValueError("decay rates must be non-negative")
        if self.n_r < 3 or self.n_p < 3:
            raise ValueError("n_r and n_p must be at least 3")
        for phi in (0.0, 0.5):
            f_est = transmon_frequency_estimate(self.transmon, FluxPoint(phi))
            if self.g_qr >= abs(self.omega_r_bare - f_est):
                warnings.warn(
                    "qubit-resonator detuning at phi=%g is below g_qr; "
                    "dispersive labeling may fail" % phi,
                    stacklevel=2)
                break


def josephson_energy(t: TransmonParams, f: FluxPoint) -> float:
    """Flux-dependent Josephson energy of the asymmetric SQUID, in GHz.

    E_J(phi) = ej_max sqrt(cos^2(pi phi) + asym^2 sin^2(pi phi)).

    The flux is reduced with an exact IEEE remainder first, so the result is
    periodic in phi with period 1 and even in phi to the bit.
    """
    r = abs(math.remainder(f.phi, 1.0))
    if r == 0.0:
        return t.ej_max
    if r == 0.5:
        return t.ej_max * t.asym
    c = math.cos(math.pi * r)
    s = math.sin(math.pi * r)
    return t.ej_max * math.sqrt(c * c + (t.asym * s) ** 2)


def transmon_frequency_estimate(t: TransmonParams, f: FluxPoint) -> float:
    """Asymptotic ge frequency sqrt(8 E_J E_c) - E_c at the given flux."""
    ej = josephson_energy(t, f)
    return math.sqrt(8.0 * ej * t.ec) - t.ec


def transmon_levels(
    t: TransmonParams, f: FluxPoint
) -> tuple[np.ndarray, np.ndarray]:
    """Diagonalize the transmon charge-basis Hamiltonian at one flux point.

    Returns
    -------
    energies:
        The lowest `levels_kept` eigenfrequencies in GHz, relative to the
        ground state.
    n_mat:
        Charge operator in the kept eigenbasis (real, levels x levels).
    """
    ej = josephson_energy(t, f)
    n = np.arange(-t.charge_cutoff, t.charge_cutoff + 1, dtype=float)
    diag = 4.0 * t.ec * n ** 2
    offdiag = np.full(n.size - 1, -ej / 2.0)
    evals, evecs = sla.eigh_tridiagonal(
        diag, offdiag, select="i", select_range=(0, t.levels_kept - 1),
        check_finite=False)
    # Fix the eigenvector gauge so charge matrix elements are reproducible.
    peak = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[peak, np.arange(evecs.shape[1])])
    evecs = evecs * signs
    n_mat = evecs.T @ (n[:, None] * evecs)
    # Symmetrize away the last-bit asymmetry of the matrix product.
    n_mat = 0.5 * (n_mat + n_mat.T)
    return evals - evals[0], n_mat


def _destroy(dim: int) -> np.ndarray:
    a = np.zeros((dim, dim))
    np.fill_diagonal(a[:, 1:], np.sqrt(np.arange(1, dim)))
    return a


def _kron3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.kron(np.kron(a, b), c)


def build_hamiltonian(
    c: ChainParams, f: FluxPoint
) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Assemble the three-mode product Hamiltonian at one flux point.

    Returns the Hermitian matrix (complex, GHz) and the bare basis labels
    (transmon level, resonator photons, filter photons) in matrix order.
    """
    eps, n_mat = transmon_levels(c.transmon, f)
    nt, nr, npp = c.transmon.levels_kept, c.n_r, c.n_p
    it, ir, ip = np.eye(nt), np.eye(nr), np.eye(npp)
    a = _destroy(nr)
    b = _destroy(npp)
    num_r = a.T @ a
    num_p = b.T @ b

    h = _kron3(np.diag(eps), ir, ip)
    h = h + c.omega_r_bare * _kron3(it, num_r, ip)
    h = h + c.omega_p * _kron3(it, ir, num_p)
    h = h + 1j * c.g_qr * _kron3(n_mat, a.T - a, ip)
    h = h - c.j_rp * _kron3(it, a - a.T, b - b.T)

    labels = [(j, m, k)
              for j in range(nt) for m in range(nr) for k in range(npp)]
    return h, labels


@dataclass
class DressedSpectrum:
    """Diagonalized product spectrum with bare-state labels.

    `energies` are sorted ascending and referenced to the ground state.
    `labels[k]` is the bare product label assigned to eigenstate k by a
    greedy maximum-overlap matching in which each bare label is used once;
    `overlaps[k]` is the squared overlap with that bare state.
    """

    energies: np.ndarray
    labels: list[tuple[int, int, int]]
    overlaps: np.ndarray
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._index = {lab: k for k, lab in enumerate(self.labels)}

    def energy(self, label: tuple[int, int, int]) -> float:
        """Energy of the dressed state labeled `label`, in GHz.

        Raises LabelAmbiguity when the assignment is not dominant
        (squared overlap at or below 0.5).
        """
        k = self._index.get(label)
        if k is None:
            raise LabelAmbiguity("no dressed state labeled %r" % (label,))
        if self.overlaps[k] <= 0.5:
            raise LabelAmbiguity(
                "label %r has overlap %.3f <= 0.5" % (label, self.overlaps[k]))
        return float(self.energies[k])

    def overlap(self, label: tuple[int, int, int]) -> float:
        k = self._index[label]
        return float(self.overlaps[k])


def diagonalize(
    h: np.ndarray,
    labels: list[tuple[int, int, int]],
    required: list[tuple[int, int, int]] | None = None,
) -> DressedSpectrum:
    """Diagonalize a product Hamiltonian and label the dressed states.

    Labels are assigned greedily: the largest squared overlap between any
    unassigned eigenstate and any unused bare state is claimed first, then
    the next largest, and so on, so every bare label is used exactly once.
    If `required` labels are given, each must end up with overlap > 0.5.
    """
    evals, evecs = np.linalg.eigh(h)
    dim = evals.size
    p = np.abs(evecs) ** 2  # p[bare, eig]

    assigned = [None] * dim
    overlaps = np.zeros(dim)
    work = p.copy()
    for _ in range(dim):
        flat = int(np.argmax(work))
        bare, eig = divmod(flat, dim)
        assigned[eig] = labels[bare]
        overlaps[eig] = p[bare, eig]
        work[bare, :] = -1.0
        work[:, eig] = -1.0

    spectrum = DressedSpectrum(
        energies=evals - evals[0], labels=assigned, overlaps=overlaps)
    if required is not None:
        for lab in required:
            spectrum.energy(lab)  # raises LabelAmbiguity when not dominant
    return spectrum


_OBSERVABLE_LABELS = [(0, 0, 0), (1, 0, 0), (2, 0, 0),
                      (0, 1, 0), (1, 1, 0), (2, 1, 0)]


@dataclass(frozen=True)
class DressedObservables:
    """Dressed frequencies a characterization run compares against.

    All values in GHz.  `f_res` maps the transmon level (0, 1, 2) to the
    resonator-like mode frequency conditioned on that level, and `chi` is
    half the difference between the level-1 and level-0 resonator
    frequencies, so 2 chi = f_res[1] - f_res[0].
    """

    f_ge: float
    f_ef: float
    anharmonicity: float
    f_res: dict[int, float]
    chi: float


def dressed_observables(c: ChainParams, f: FluxPoint) -> DressedObservables:
    """Diagonalize the chain at one flux point and extract dressed values."""
    h, labels = build_hamiltonian(c, f)
    spec = diagonalize(h, labels, required=_OBSERVABLE_LABELS)
    e = spec.energy
    f_ge = e((1, 0, 0))
    f_ef = e((2, 0, 0)) - e((1, 0, 0))
    f_res = {s: e((s, 1, 0)) - e((s, 0, 0)) for s in (0, 1, 2)}
    return DressedObservables(
        f_ge=f_ge,
        f_ef=f_ef,
        anharmonicity=f_ef - f_ge,
        f_res=f_res,
        chi=0.5 * (f_res[1] - f_res[0]),
    )
