"""Device description files and the bundled reference sets.

A description gathers everything the other modules need about one chip:
per-qubit readout chains (spectrum.ChainParams), operating flux points,
coherence times, measured transition frequencies for parameter fitting,
qubit-qubit couplers, device-level readout defaults, and the flux-line
transfer function used as the simulation ground truth.

Configs are flat dotted-key text, one ``key = value`` per line, with ``#``
comments and blank lines ignored.  Values parse as int, float, a bare
token, or a space-separated list.  A ``.json`` file holding the same tree
is accepted everywhere a ``.cfg`` is.  Units are explicit in key names.

Schema::

    device.id                           token
    device.qubits                       ordered id list
    qubit.<id>.ej_max_ghz               transmon Josephson energy (summed)
    qubit.<id>.ec_ghz                   charging energy
    qubit.<id>.asym                     junction asymmetry d, default 0
    qubit.<id>.omega_r_bare_ghz         bare readout resonator
    qubit.<id>.omega_p_ghz              Purcell filter mode
    qubit.<id>.g_qr_ghz                 qubit-resonator coupling
    qubit.<id>.j_rp_ghz                 resonator-filter coupling
    qubit.<id>.kappa_p_ghz              filter linewidth
    qubit.<id>.kappa_int_ghz            internal resonator loss, default 0
    qubit.<id>.flux_phi0                operating point, flux quanta
    qubit.<id>.t1_us                    relaxation at the operating point
    qubit.<id>.t2_star_us               Ramsey dephasing
    qubit.<id>.t2_echo_us               echo dephasing
    qubit.<id>.t2_echo_interaction_us   echo at the gate interaction point,
                                        optional
    qubit.<id>.readout.<field>          per-qubit ReadoutConfig overrides
    qubit.<id>.observed.<name>          measured transitions, see below
    readout.integration_ns              device-level ReadoutConfig defaults
    readout.amplitude
    readout.eta
    readout.shots
    readout.residual_e                  optional, default 0
    readout.probe_ghz                   optional, default auto
    readout.two_step                    optional "factor ns" list
    readout.seed                        optional, default 0
    coupler.<n>.qubits                  two distinct qubit ids
    coupler.<n>.j_qq_ghz                exchange coupling
    coupler.<n>.interaction_ghz         CZ interaction frequency
    fluxline.dc_gain
    fluxline.sample_ns
    fluxline.fir_taps                   list
    fluxline.iir.<n>.amplitude          one settling term per index
    fluxline.iir.<n>.tau_ns

Observed-transition names: ge_at_max_ghz, ge_at_min_ghz (required for a
fit), anharmonicity_ghz, res_at_max_ghz, res_at_min_ghz (optional).  A
qubit block without observed keys simply cannot be fitted.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .dynamics import DuffingPair, NoiseParams, QubitSpec
from .fitting import SpectralObservations
from .fluxline import IIRTerm, TransferFunction
from .readout import ReadoutConfig
from .spectrum import ChainParams, FluxPoint, TransmonParams, transmon_levels


class ValidationError(ValueError):
    """Config file missing, malformed, or inconsistent."""


_QUBIT_REQUIRED = ("ej_max_ghz", "ec_ghz", "omega_r_bare_ghz",
                   "omega_p_ghz", "g_qr_ghz", "j_rp_ghz", "kappa_p_ghz",
                   "t1_us", "t2_star_us", "t2_echo_us")
_QUBIT_OPTIONAL = ("asym", "kappa_int_ghz", "flux_phi0",
                   "t2_echo_interaction_us", "readout", "observed")
_OBSERVED_NAMES = ("ge_at_max_ghz", "ge_at_min_ghz", "anharmonicity_ghz",
                   "res_at_max_ghz", "res_at_min_ghz")
_READOUT_REQUIRED = ("integration_ns", "amplitude", "eta", "shots")
_READOUT_OPTIONAL = ("probe_ghz", "two_step", "seed", "residual_e")


@dataclass(frozen=True)
class QubitNoise:
    """Coherence times at the operating point; the interaction-point echo
    time is only used while a pair is parked on a gate resonance."""

    t1_us: float
    t2_star_us: float
    t2_echo_us: float
    t2_echo_interaction_us: float | None = None


@dataclass(frozen=True)
class QubitRecord:
    chain: ChainParams
    flux: FluxPoint
    noise: QubitNoise
    readout: dict = field(default_factory=dict)
    observed: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CouplerRecord:
    qubits: tuple[str, str]
    j_qq: float
    interaction_ghz: float


@dataclass(frozen=True)
class DeviceDescription:
    """Everything the toolkit knows about one chip, in one value."""

    device_id: str
    qubits: dict[str, QubitRecord]
    couplers: tuple[CouplerRecord, ...]
    readout: ReadoutConfig
    fluxline: TransferFunction

    def validate(self) -> "DeviceDescription":
        for cp in self.couplers:
            a, b = cp.qubits
            if a == b:
                raise ValidationError(f"coupler joins {a} to itself")
            for q in cp.qubits:
                if q not in self.qubits:
                    raise ValidationError(f"coupler references unknown "
                                          f"qubit {q!r}")
            if cp.j_qq < 0:
                raise ValidationError("negative j_qq")
        for qid, rec in self.qubits.items():
            n = rec.noise
            if min(n.t1_us, n.t2_star_us, n.t2_echo_us) <= 0:
                raise ValidationError(f"{qid}: coherence times must be "
                                      "positive")
            if n.t2_echo_interaction_us is not None \
                    and n.t2_echo_interaction_us <= 0:
                raise ValidationError(f"{qid}: interaction echo time must "
                                      "be positive")
        return self

    # -- views used by the experiment commands ----------------------------

    def qubit(self, qid: str) -> QubitRecord:
        try:
            return self.qubits[qid]
        except KeyError:
            raise ValidationError(
                f"unknown qubit {qid!r}; device {self.device_id} has "
                f"{' '.join(self.qubits)}") from None

    def readout_config(self, qid: str, **overrides) -> ReadoutConfig:
        merged = dict(self.qubit(qid).readout)
        merged.update(overrides)
        bad = set(merged) - set(_READOUT_REQUIRED) - set(_READOUT_OPTIONAL)
        if bad:
            raise ValidationError(f"unknown readout fields {sorted(bad)}")
        if "two_step" in merged and merged["two_step"] is not None:
            merged["two_step"] = tuple(merged["two_step"])
        return replace(self.readout, **merged)

    def observations(self, qid: str) -> SpectralObservations | None:
        rec = self.qubit(qid)
        obs = rec.observed
        if "ge_at_max_ghz" not in obs or "ge_at_min_ghz" not in obs:
            return None
        return SpectralObservations(
            ge_at_max=obs["ge_at_max_ghz"],
            ge_at_min=obs["ge_at_min_ghz"],
            omega_r_bare=rec.chain.omega_r_bare,
            omega_p=rec.chain.omega_p,
            j_rp=rec.chain.j_rp,
            anharmonicity_at_max=obs.get("anharmonicity_ghz"),
            res_at_max=obs.get("res_at_max_ghz"),
            res_at_min=obs.get("res_at_min_ghz"),
        )

    def coupler(self, qid_a: str, qid_b: str) -> CouplerRecord:
        want = {qid_a, qid_b}
        for cp in self.couplers:
            if set(cp.qubits) == want:
                return cp
        raise ValidationError(f"no coupler joins {qid_a!r} and {qid_b!r}")

    def duffing_pair(self, cp: CouplerRecord, levels: int = 3
                     ) -> DuffingPair:
        """Time-domain pair model at the configured operating points."""
        specs = []
        for qid in cp.qubits:
            rec = self.qubit(qid)
            gmap = transition_map(rec.chain.transmon)
            lv, _ = transmon_levels(rec.chain.transmon, rec.flux)
            alpha = (lv[2] - lv[1]) - (lv[1] - lv[0])
            specs.append(QubitSpec(
                idle_ghz=gmap(rec.flux.phi), alpha_ghz=alpha, levels=levels,
                flux_map=gmap, idle_flux=rec.flux.phi))
        return DuffingPair(specs[0], specs[1], j_qq=cp.j_qq,
                           interaction_ghz=cp.interaction_ghz)

    def pair_noise(self, cp: CouplerRecord,
                   interaction: bool = True) -> NoiseParams:
        """Pair coherence times; interaction=True swaps in the
        interaction-point echo times where the config has them."""
        recs = [self.qubit(q).noise for q in cp.qubits]

        def echo(n: QubitNoise) -> float:
            if interaction and n.t2_echo_interaction_us is not None:
                return n.t2_echo_interaction_us
            return n.t2_echo_us

        return NoiseParams(
            t1_us=tuple(n.t1_us for n in recs),
            t2_star_us=tuple(n.t2_star_us for n in recs),
            t2_echo_us=tuple(echo(n) for n in recs),
        )

    # -- serialization -----------------------------------------------------

    def as_tree(self) -> dict:
        qubits = {}
        for qid, rec in self.qubits.items():
            t = rec.chain.transmon
            block = {
                "ej_max_ghz": t.ej_max, "ec_ghz": t.ec, "asym": t.asym,
                "omega_r_bare_ghz": rec.chain.omega_r_bare,
                "omega_p_ghz": rec.chain.omega_p,
                "g_qr_ghz": rec.chain.g_qr,
                "j_rp_ghz": rec.chain.j_rp,
                "kappa_p_ghz": rec.chain.kappa_p,
                "kappa_int_ghz": rec.chain.kappa_int,
                "flux_phi0": rec.flux.phi,
                "t1_us": rec.noise.t1_us,
                "t2_star_us": rec.noise.t2_star_us,
                "t2_echo_us": rec.noise.t2_echo_us,
            }
            if rec.noise.t2_echo_interaction_us is not None:
                block["t2_echo_interaction_us"] = \
                    rec.noise.t2_echo_interaction_us
            if rec.readout:
                block["readout"] = dict(rec.readout)
            if rec.observed:
                block["observed"] = dict(rec.observed)
            qubits[qid] = block
        r = self.readout
        readout = {"integration_ns": r.integration_ns,
                   "amplitude": r.amplitude, "eta": r.eta, "shots": r.shots,
                   "residual_e": r.residual_e, "seed": r.seed}
        if r.probe_ghz is not None:
            readout["probe_ghz"] = r.probe_ghz
        if r.two_step is not None:
            readout["two_step"] = list(r.two_step)
        tree = {
            "device": {"id": self.device_id, "qubits": list(self.qubits)},
            "qubit": qubits,
            "readout": readout,
            "fluxline": {
                "dc_gain": self.fluxline.dc_gain,
                "sample_ns": self.fluxline.sample_ns,
                "fir_taps": list(self.fluxline.fir_taps),
                "iir": {str(i): {"amplitude": term.amplitude,
                                 "tau_ns": term.tau_ns}
                        for i, term in enumerate(self.fluxline.iir_terms)},
            },
        }
        if self.couplers:
            tree["coupler"] = {
                str(i): {"qubits": list(cp.qubits), "j_qq_ghz": cp.j_qq,
                         "interaction_ghz": cp.interaction_ghz}
                for i, cp in enumerate(self.couplers)}
        return tree

    @classmethod
    def from_tree(cls, tree: dict) -> "DeviceDescription":
        try:
            return _device_from_tree(cls, tree).validate()
        except (KeyError, TypeError, AttributeError) as exc:
            raise ValidationError(f"bad device tree: {exc!r}") from exc


def transition_map(t: TransmonParams):
    """Cached flux -> qubit frequency map for the bare transmon; feeds the
    time-domain flux_map hooks."""

    @functools.lru_cache(maxsize=None)
    def ge(phi: float) -> float:
        lv, _ = transmon_levels(t, FluxPoint(phi))
        return lv[1] - lv[0]

    return ge


def _need(block: dict, key: str, where: str):
    if key not in block:
        raise ValidationError(f"{where}: missing {key}")
    return block[key]


def _no_extras(block: dict, allowed, where: str):
    bad = set(block) - set(allowed)
    if bad:
        raise ValidationError(f"{where}: unknown keys {sorted(bad)}")


def _device_from_tree(cls, tree: dict) -> DeviceDescription:
    _no_extras(tree, ("device", "qubit", "readout", "coupler", "fluxline"),
               "top level")
    dev = _need(tree, "device", "config")
    _no_extras(dev, ("id", "qubits"), "device")
    device_id = str(_need(dev, "id", "device"))
    ids = _need(dev, "qubits", "device")
    if isinstance(ids, str):
        ids = [ids]
    ids = [str(q) for q in ids]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate qubit ids")

    blocks = _need(tree, "qubit", "config")
    if set(blocks) != set(ids):
        raise ValidationError(
            f"device.qubits lists {ids} but qubit blocks exist for "
            f"{sorted(blocks)}")

    qubits = {}
    for qid in ids:
        b = blocks[qid]
        where = f"qubit.{qid}"
        _no_extras(b, _QUBIT_REQUIRED + _QUBIT_OPTIONAL, where)
        for key in _QUBIT_REQUIRED:
            _need(b, key, where)
        chain = ChainParams(
            TransmonParams(float(b["ej_max_ghz"]), float(b["ec_ghz"]),
                           float(b.get("asym", 0.0))),
            omega_r_bare=float(b["omega_r_bare_ghz"]),
            omega_p=float(b["omega_p_ghz"]), g_qr=float(b["g_qr_ghz"]),
            j_rp=float(b["j_rp_ghz"]), kappa_p=float(b["kappa_p_ghz"]),
            kappa_int=float(b.get("kappa_int_ghz", 0.0)))
        t2i = b.get("t2_echo_interaction_us")
        noise = QubitNoise(float(b["t1_us"]), float(b["t2_star_us"]),
                           float(b["t2_echo_us"]),
                           None if t2i is None else float(t2i))
        rd = dict(b.get("readout", {}))
        _no_extras(rd, _READOUT_REQUIRED + _READOUT_OPTIONAL,
                   where + ".readout")
        obs = {k: float(v) for k, v in dict(b.get("observed", {})).items()}
        _no_extras(obs, _OBSERVED_NAMES, where + ".observed")
        qubits[qid] = QubitRecord(chain, FluxPoint(float(b.get("flux_phi0",
                                                               0.0))),
                                  noise, rd, obs)

    rb_ = _need(tree, "readout", "config")
    _no_extras(rb_, _READOUT_REQUIRED + _READOUT_OPTIONAL, "readout")
    for key in _READOUT_REQUIRED:
        _need(rb_, key, "readout")
    two_step = rb_.get("two_step")
    readout = ReadoutConfig(
        integration_ns=float(rb_["integration_ns"]),
        amplitude=float(rb_["amplitude"]), eta=float(rb_["eta"]),
        shots=int(rb_["shots"]),
        probe_ghz=(None if rb_.get("probe_ghz") is None
                   else float(rb_["probe_ghz"])),
        two_step=None if two_step is None else tuple(two_step),
        seed=int(rb_.get("seed", 0)),
        residual_e=float(rb_.get("residual_e", 0.0)))

    couplers = []
    for i in sorted(tree.get("coupler", {}), key=int):
        c = tree["coupler"][i]
        where = f"coupler.{i}"
        _no_extras(c, ("qubits", "j_qq_ghz", "interaction_ghz"), where)
        pair = _need(c, "qubits", where)
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ValidationError(f"{where}: qubits must list two ids")
        couplers.append(CouplerRecord(
            (str(pair[0]), str(pair[1])),
            j_qq=float(_need(c, "j_qq_ghz", where)),
            interaction_ghz=float(_need(c, "interaction_ghz", where))))

    fl = _need(tree, "fluxline", "config")
    _no_extras(fl, ("dc_gain", "sample_ns", "fir_taps", "iir"), "fluxline")
    taps = fl.get("fir_taps", [1.0])
    if not isinstance(taps, (list, tuple)):
        taps = [taps]
    terms = tuple(
        IIRTerm(float(fl["iir"][i]["amplitude"]),
                float(fl["iir"][i]["tau_ns"]))
        for i in sorted(fl.get("iir", {}), key=int))
    fluxline = TransferFunction(
        dc_gain=float(_need(fl, "dc_gain", "fluxline")),
        iir_terms=terms, fir_taps=tuple(float(x) for x in taps),
        sample_ns=float(_need(fl, "sample_ns", "fluxline")))

    return cls(device_id, qubits, tuple(couplers), readout, fluxline)


# ---------------------------------------------------------------------------
# Flat key-value text format


def _parse_scalar(token: str):
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        return token


def parse_kv(text: str) -> dict:
    """Dotted-key lines to a nested tree; inverse of format_kv."""
    tree: dict = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {ln}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ValidationError(f"line {ln}: empty key or value")
        tokens = value.split()
        parsed = ([_parse_scalar(t) for t in tokens] if len(tokens) > 1
                  else _parse_scalar(tokens[0]))
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"line {ln}: {key} descends into a "
                                      "scalar")
        if parts[-1] in node:
            raise ValidationError(f"line {ln}: duplicate key {key}")
        node[parts[-1]] = parsed
    return tree


def _format_scalar(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_kv(tree: dict) -> str:
    """Sorted dotted-key rendering of a tree; values round-trip exactly."""
    lines = []

    def walk(prefix: str, node):
        if isinstance(node, dict):
            for key in sorted(node):
                walk(f"{prefix}.{key}" if prefix else str(key), node[key])
        elif isinstance(node, (list, tuple)):
            lines.append(f"{prefix} = "
                         + " ".join(_format_scalar(v) for v in node))
        else:
            lines.append(f"{prefix} = {_format_scalar(node)}")

    walk("", tree)
    return "\n".join(lines) + "\n"


def load_device(path) -> DeviceDescription:
    """Read a .cfg (dotted key-value) or .json device description."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {p}: {exc}") from exc
    if p.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            tree = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{p}: {exc}") from exc
    else:
        tree = parse_kv(text)
    return DeviceDescription.from_tree(tree)


def save_device(desc: DeviceDescription, path) -> None:
    """Write a description; the format follows the file extension."""
    p = Path(path)
    tree = desc.as_tree()
    if p.suffix.lower() == ".json":
        p.write_text(json.dumps(tree, indent=1, sort_keys=True) + "\n",
                     encoding="utf-8")
    else:
        p.write_text(format_kv(tree), encoding="utf-8")


def bundled_config(name: str) -> Path:
    """Path of a reference config shipped with the package: device_a (four
    qubits, gate pair on q1-q2) or device_b (two qubits, readout chains)."""
    base = resources.files(__package__) / "configs"
    p = Path(str(base / f"{name}.cfg"))
    if not p.is_file():
        have = sorted(f.stem for f in Path(str(base)).glob("*.cfg"))
        raise ValidationError(f"no bundled config {name!r}; have {have}")
    return p
