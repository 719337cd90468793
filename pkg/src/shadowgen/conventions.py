"""Global encoding conventions shared by every module.

Computational basis ordering: site 0 is the most significant bit of the
basis-state index, so for N qubits the state |b_0 b_1 ... b_{N-1}> has index
sum_i b_i * 2**(N-1-i).  Nothing else in the package may re-derive this.

Pauli labels are stored as small integer codes (X=0, Y=1, Z=2).  Measurement
outcomes are stored as signs (+1/-1); the computational bit 0 maps to +1.
"""

import numpy as np

PAULI_LABELS = ("X", "Y", "Z")
PAULI_CODE = {label: code for code, label in enumerate(PAULI_LABELS)}
X, Y, Z = 0, 1, 2


def bit_shift(site: int, n_qubits: int) -> int:
    """Shift of ``site`` inside a basis-state index."""
    if not 0 <= site < n_qubits:
        raise IndexError(f"site {site} out of range for {n_qubits} qubits")
    return n_qubits - 1 - site


def site_bits(n_qubits: int) -> np.ndarray:
    """(2**N, N) array of computational bits, column i = bit of site i."""
    idx = np.arange(2**n_qubits, dtype=np.int64)[:, None]
    shifts = n_qubits - 1 - np.arange(n_qubits)
    return ((idx >> shifts) & 1).astype(np.int8)


def bits_to_signs(bits):
    return (1 - 2 * np.asarray(bits)).astype(np.int8)
