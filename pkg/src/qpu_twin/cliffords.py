"""Single- and two-qubit Clifford groups compiled to physical primitives.

Elements carry a conjugation tableau (signed Pauli images of the generators,
phase-free and therefore a canonical group label), the exact unitary of the
compiled circuit, and the circuit itself as a tuple of primitives:
("vz", qubit, angle), ("x90", qubit), ("x180", qubit), ("cz",).  Circuit
order is temporal; matrices multiply in reverse.

Single-qubit elements compile to Z(t1) X90 Z(t2) X90 Z(t3): zero-angle Z
stages are elided, the four pure Z rotations drop both pulses and are fully
virtual, and the remaining twenty elements keep exactly two X90s.  Two-qubit
elements follow the four-class coset construction (local, CZ-like,
iSWAP-like, SWAP-like) with class sizes 576 / 5184 / 5184 / 576 summing to
the full group order 11520.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .rng import TAG_BENCH_SEQUENCE, substream

_HALF = 1.0 / math.sqrt(2.0)
X90 = np.array([[_HALF, -1j * _HALF], [-1j * _HALF, _HALF]])
PAULIS = (
    np.eye(2, dtype=complex),
    np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    np.array([[0.0, -1j], [1j, 0.0]]),
    np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
)
CZ = np.diag([1.0, 1.0, 1.0, -1.0]).astype(complex)


class NotClifford(ValueError):
    """The unitary does not normalize the Pauli group."""


def vz_matrix(theta: float) -> np.ndarray:
    return np.diag([1.0, np.exp(-1j * theta)])


def _pauli_basis(n_qubits: int):
    if n_qubits == 1:
        return PAULIS
    return tuple(np.kron(a, b) for a in PAULIS for b in PAULIS)


def _generators(n_qubits: int):
    if n_qubits == 1:
        return (PAULIS[1], PAULIS[3])
    eye = PAULIS[0]
    return (np.kron(PAULIS[1], eye), np.kron(PAULIS[3], eye),
            np.kron(eye, PAULIS[1]), np.kron(eye, PAULIS[3]))


def conjugation_key(u: np.ndarray) -> tuple:
    """Signed Pauli images of the X/Z generators under u; global-phase free.

    This is the element's tableau: two (or four) generator images determine
    the Clifford up to phase, so the tuple is a canonical dictionary key.
    """
    n = 1 if u.shape[0] == 2 else 2
    dim = u.shape[0]
    key = []
    for g in _generators(n):
        img = u @ g @ u.conj().T
        for idx, p in enumerate(_pauli_basis(n)):
            c = np.trace(p.conj().T @ img) / dim
            if abs(c) > 0.5:
                break
        else:
            raise NotClifford("generator image has no Pauli component")
        sign = int(round(c.real))
        if abs(c - sign) > 1e-9 or sign not in (-1, 1) or idx == 0:
            raise NotClifford("generator image is not a signed Pauli")
        key.append((idx, sign))
    return tuple(key)


@dataclass(frozen=True, eq=False)
class CliffordElement:
    """One group element: tableau key, compiled circuit, exact unitary."""

    key: tuple
    unitary: np.ndarray
    circuit: tuple
    n_qubits: int = 1

    @property
    def pulse_count(self) -> int:
        return sum(1 for p in self.circuit if p[0] in ("x90", "x180"))

    @property
    def cz_count(self) -> int:
        return sum(1 for p in self.circuit if p[0] == "cz")


def _circuit_unitary_1q(circuit) -> np.ndarray:
    u = np.eye(2, dtype=complex)
    for prim in circuit:
        if prim[0] == "vz":
            u = vz_matrix(prim[2]) @ u
        elif prim[0] == "x90":
            u = X90 @ u
        elif prim[0] == "x180":
            u = (X90 @ X90) @ u
        else:
            raise ValueError("not a single-qubit primitive: %r" % (prim,))
    return u


def _build_c1() -> tuple:
    angles = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)

    def stage(theta):
        return (("vz", 0, theta),) if theta != 0.0 else ()

    # Virtual (pulse-free) forms first so Z rotations never burn a pulse;
    # everything else keeps both X90 stages, which is what the default
    # pulses-per-Clifford divisor of 2 in error_rates assumes.
    candidates = []
    for a in angles:
        candidates.append(stage(a))
    for a in angles:
        for b in angles:
            for c in angles:
                candidates.append(
                    stage(a) + (("x90", 0),) + stage(b)
                    + (("x90", 0),) + stage(c))

    elements: dict[tuple, CliffordElement] = {}
    for circuit in candidates:
        u = _circuit_unitary_1q(circuit)
        key = conjugation_key(u)
        if key not in elements:
            elements[key] = CliffordElement(key, u, circuit, 1)
    if len(elements) != 24:
        raise AssertionError("C1 enumeration found %d elements" % len(elements))
    return tuple(elements.values())


C1 = _build_c1()
_C1_BY_KEY = {e.key: i for i, e in enumerate(C1)}


def clifford_group_c1() -> tuple:
    """All 24 single-qubit Cliffords with XZ circuits, fixed order."""
    return C1


def c1_index(u: np.ndarray) -> int:
    return _C1_BY_KEY[conjugation_key(u)]


def c1_compose(a: CliffordElement, b: CliffordElement) -> CliffordElement:
    """Group product: (a then b), returned as the table element."""
    return C1[c1_index(b.unitary @ a.unitary)]


def c1_inverse(a: CliffordElement) -> CliffordElement:
    return C1[c1_index(a.unitary.conj().T)]


def _find_c1(x_img, z_img) -> int:
    return _C1_BY_KEY[(x_img, z_img)]


# Axis-permutation subgroup used by the coset construction: identity plus
# the two cyclic rotations X->Y->Z->X and X->Z->Y->X.
_S3 = (
    _find_c1((1, 1), (3, 1)),
    _find_c1((2, 1), (1, 1)),
    _find_c1((3, 1), (2, 1)),
)

_HADAMARD = _find_c1((3, 1), (1, 1))

ISWAP = np.array([
    [1, 0, 0, 0],
    [0, 0, 1j, 0],
    [0, 1j, 0, 0],
    [0, 0, 0, 1],
], dtype=complex)
SWAP = np.array([
    [1, 0, 0, 0],
    [0, 0, 1, 0],
    [0, 1, 0, 0],
    [0, 0, 0, 1],
], dtype=complex)


def _local_unitary(ia: int, ib: int) -> np.ndarray:
    return np.kron(C1[ia].unitary, C1[ib].unitary)


def _layer_circuit(ia: int, ib: int) -> tuple:
    out = tuple(p for p in C1[ia].circuit)
    out += tuple((p[0], 1) + p[2:] for p in C1[ib].circuit)
    return out


def _factor_local(u: np.ndarray):
    """Split u into (a, b) with u = a (x) b up to global phase, or None."""
    m = u.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    w, s, vh = np.linalg.svd(m)
    if s[1] > 1e-9:
        return None
    a = (w[:, 0] * math.sqrt(s[0])).reshape(2, 2)
    b = (vh[0] * math.sqrt(s[0])).reshape(2, 2)
    # Normalize each factor to a unitary (strip the split of the phase).
    a = a / np.sqrt(np.abs(np.linalg.det(a)))
    b = b / np.sqrt(np.abs(np.linalg.det(b)))
    return a, b


def _discover_iswap_core():
    """Circuit locals (l, m, r) with iSWAP = L . CZ . M . CZ . R up to phase."""
    for im_a in range(24):
        for im_b in range(24):
            q = CZ @ _local_unitary(im_a, im_b) @ CZ
            # iSWAP = L q R  =>  L = iSWAP R^dag q^dag; try R = identity
            # first, then scan a single-qubit basis change on the right.
            for ir_a in range(24):
                got = _factor_local(
                    ISWAP @ _local_unitary(ir_a, ir_a).conj().T
                    @ q.conj().T)
                if got is None:
                    continue
                try:
                    il_a, il_b = c1_index(got[0]), c1_index(got[1])
                except (KeyError, NotClifford):
                    continue
                return (il_a, il_b), (im_a, im_b), (ir_a, ir_a)
    raise AssertionError("no 2-CZ iSWAP decomposition found")


_ISWAP_CORE = None


def _iswap_core():
    global _ISWAP_CORE
    if _ISWAP_CORE is None:
        _ISWAP_CORE = _discover_iswap_core()
    return _ISWAP_CORE


def _core_circuit(cls: int) -> tuple:
    """Primitive circuit of the class core (identity, CZ, iSWAP, SWAP)."""
    if cls == 0:
        return ()
    if cls == 1:
        return (("cz",),)
    if cls == 2:
        (la, lb), (ma, mb), (ra, rb) = _iswap_core()
        return (_layer_circuit(ra, rb) + (("cz",),)
                + _layer_circuit(ma, mb) + (("cz",),)
                + _layer_circuit(la, lb))
    ident = _find_c1((1, 1), (3, 1))
    h = _HADAMARD
    return (_layer_circuit(ident, h) + (("cz",),)
            + _layer_circuit(h, h) + (("cz",),)
            + _layer_circuit(h, h) + (("cz",),)
            + _layer_circuit(ident, h))


def _core_unitary(cls: int) -> np.ndarray:
    return (np.eye(4, dtype=complex), CZ, ISWAP, SWAP)[cls]


CLASS_SIZES = (576, 5184, 5184, 576)
C2_ORDER = 11520


@functools.lru_cache(maxsize=None)
def _c2_from_params(cls: int, ia: int, ib: int, sa: int, sb: int
                    ) -> CliffordElement:
    """Element (C1a (x) C1b) . core . (S3a (x) S3b) with its circuit."""
    u = _core_unitary(cls) @ _local_unitary(ia, ib)
    circuit = _layer_circuit(ia, ib) + _core_circuit(cls)
    if cls in (1, 2):
        js, ks = _S3[sa], _S3[sb]
        u = _local_unitary(js, ks) @ u
        circuit = circuit + _layer_circuit(js, ks)
    return CliffordElement(conjugation_key(u), u, circuit, 2)


def sample_c2(seed) -> CliffordElement:
    """Uniform two-qubit Clifford drawn with the class weights 576 : 5184 :
    5184 : 576; the coset parameterization is bijective so in-class uniform
    draws are uniform over the group.  seed is an integer (one-shot
    substream) or a Generator to draw a stream of samples from."""
    if isinstance(seed, np.random.Generator):
        gen = seed
    else:
        gen = substream(int(seed), TAG_BENCH_SEQUENCE)
    r = int(gen.integers(C2_ORDER))
    bounds = np.cumsum(CLASS_SIZES)
    cls = int(np.searchsorted(bounds, r, side="right"))
    ia = int(gen.integers(24))
    ib = int(gen.integers(24))
    if cls in (1, 2):
        sa = int(gen.integers(3))
        sb = int(gen.integers(3))
    else:
        sa = sb = 0
    return _c2_from_params(cls, ia, ib, sa, sb)


def c2_decompose(u: np.ndarray) -> CliffordElement:
    """Rebuild the table element for an arbitrary two-qubit Clifford unitary
    by inverting the coset parameterization; raises NotClifford if u is not
    in the group."""
    key = conjugation_key(u)  # raises NotClifford early for non-members
    for cls in range(4):
        core = _core_unitary(cls)
        s_range = range(3) if cls in (1, 2) else range(1)
        for sa in s_range:
            for sb in s_range:
                right = core.conj().T
                if cls in (1, 2):
                    right = right @ _local_unitary(
                        _S3[sa], _S3[sb]).conj().T
                got = _factor_local(right @ u)
                if got is None:
                    continue
                try:
                    ia, ib = c1_index(got[0]), c1_index(got[1])
                except (KeyError, NotClifford):
                    continue
                elem = _c2_from_params(cls, ia, ib, sa, sb)
                if elem.key == key:
                    return elem
    raise NotClifford("unitary is not in the two-qubit Clifford group")


def c2_inverse(e: CliffordElement) -> CliffordElement:
    return c2_decompose(e.unitary.conj().T)


def is_clifford(u: np.ndarray) -> bool:
    try:
        conjugation_key(u)
    except NotClifford:
        return False
    return True
