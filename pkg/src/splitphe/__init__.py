"""Split neural-network training with additively homomorphic encryption.

A feature-owning party and a label-owning party jointly train a model
without sharing raw features, labels, or the classification head in the
clear.  Hidden activations cross the wire encrypted under the feature
owner's key; every plaintext the key owner sees is blinded; a noise ledger
makes the whole dance exactly invertible, so the jointly trained model is
bit-identical to one trained centrally in fixed-point arithmetic.
"""

from .audit import AuditReport, leakage_audit
from .bench import SweepReport, dimension_sweep
from .ciphertensor import (
    CipherMatrix,
    CipherVector,
    Ciphertext,
    ct_add_cipher,
    ct_add_plain_tensor,
    ct_matvec,
    ct_outer,
    decrypt_vector,
    encrypt_vector,
)
from .datasets import Dataset, load_csv, load_idx, synthetic_blobs, train_test_split
from .errors import (
    ConfigError,
    CryptoError,
    DataError,
    MagnitudeError,
    ProtocolError,
    ScaleError,
    SplitPheError,
    TransportError,
)
from .fixedpoint import FixedScale, dequantize, quantize, rescale
from .nn import FeatureExtractor, Hyperparams, grad_check, load_weights, save_weights
from .paillier import (
    KeyPair,
    OpCounter,
    PrivateKey,
    PublicKey,
    add_cipher,
    add_plain,
    count_ops,
    decrypt,
    encrypt,
    from_primes,
    keygen,
    load_private_key,
    load_public_key,
    mul_plain,
    rerandomize,
    save_private_key,
    save_public_key,
)
from .protocol import (
    ActiveParty,
    AuditRecorder,
    NoiseConfig,
    PassiveParty,
    Session,
    SessionConfig,
)
from .training import (
    CentralizedModel,
    RunReport,
    build_parties,
    derive_seed,
    run_local_protocol,
    train_centralized,
)

__version__ = "0.1.0"

__all__ = [
    "ActiveParty",
    "AuditRecorder",
    "AuditReport",
    "CentralizedModel",
    "CipherMatrix",
    "CipherVector",
    "Ciphertext",
    "ConfigError",
    "CryptoError",
    "DataError",
    "Dataset",
    "FeatureExtractor",
    "FixedScale",
    "Hyperparams",
    "KeyPair",
    "MagnitudeError",
    "NoiseConfig",
    "OpCounter",
    "PassiveParty",
    "PrivateKey",
    "ProtocolError",
    "PublicKey",
    "RunReport",
    "ScaleError",
    "Session",
    "SessionConfig",
    "SplitPheError",
    "SweepReport",
    "TransportError",
    "add_cipher",
    "add_plain",
    "build_parties",
    "count_ops",
    "ct_add_cipher",
    "ct_add_plain_tensor",
    "ct_matvec",
    "ct_outer",
    "decrypt",
    "decrypt_vector",
    "dequantize",
    "derive_seed",
    "dimension_sweep",
    "encrypt",
    "encrypt_vector",
    "from_primes",
    "grad_check",
    "keygen",
    "leakage_audit",
    "load_csv",
    "load_idx",
    "load_private_key",
    "load_public_key",
    "load_weights",
    "mul_plain",
    "quantize",
    "rerandomize",
    "rescale",
    "run_local_protocol",
    "save_private_key",
    "save_public_key",
    "save_weights",
    "synthetic_blobs",
    "train_centralized",
    "train_test_split",
]
