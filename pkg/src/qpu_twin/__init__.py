"""qpu_twin: desk-scale simulation twin of a two-qubit transmon processor.

Subsystems
----------
spectrum      coupled transmon/resonator/filter Hamiltonians and labeling
fitting       recovery of circuit parameters from measured transitions
readout       dispersive transmission, single-shot clouds and assignment
fluxline      flux-pulse transfer functions, inversion and reconstruction
dynamics      time-domain two-qubit models, CZ calibration, relaxometry
cliffords     one- and two-qubit Clifford groups over the native gate set
rb            randomized-benchmarking sequences, decays and error rates
device        device description files and the bundled reference sets
cli           command-line entry points (`qpu-twin ...`)
"""

__version__ = "0.1.0"
