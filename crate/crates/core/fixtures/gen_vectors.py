"""Independent reference for the byte conventions in `crypto.rs`.

Uses the Python `cryptography` package and hashlib only; regenerate with
`python3 gen_vectors.py > test_vectors.json`.
"""

import hashlib
import json
import struct

from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

P = (1 << 61) - 1


def le32(x):
    return struct.pack("<I", x)


def le64(x):
    return struct.pack("<Q", x)


def secret_key(seed, pid):
    return X25519PrivateKey.from_private_bytes(hashlib.sha256(b"dsfl/keygen/v1" + le32(pid) + seed).digest())


def public_bytes(sk):
    return sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def pair_seed(sk, my_id, their_id, their_public):
    dh = sk.exchange(X25519PublicKey.from_public_bytes(their_public))
    lo, hi = min(my_id, their_id), max(my_id, their_id)
    return HKDF(SHA256(), 32, b"dsfl/pair/v1", le32(lo) + le32(hi)).derive(dh)


def prf(seed, context, dim):
    iv = hashlib.sha256(b"dsfl/prf/v1" + context).digest()[:16]
    enc = Cipher(algorithms.AES(seed), modes.CTR(iv)).encryptor()
    out = []
    while len(out) < dim:
        block = enc.update(bytes(64))
        for i in range(0, 64, 8):
            c = struct.unpack("<Q", block[i : i + 8])[0] & P
            if c == P:
                continue
            out.append(c)
            if len(out) == dim:
                break
    return out


def main():
    seed = bytes(range(32))
    a, b = 3, 7
    ska, skb = secret_key(seed, a), secret_key(seed, b)
    pa, pb = public_bytes(ska), public_bytes(skb)
    s_ab = pair_seed(ska, a, b, pb)
    assert s_ab == pair_seed(skb, b, a, pa)
    mask_ctx = b"mask" + le64(5) + le32(a) + le32(b)
    rho = b"fixture-rho-0123456789abcdef"
    ch_key = hashlib.sha256(b"dsfl/challenge-key/v1" + rho).digest()
    payload, nonce = b"hello dsfl", bytes([0xAA] * 16)
    vectors = {
        "key_seed": seed.hex(),
        "ids": [a, b],
        "public_keys": [pa.hex(), pb.hex()],
        "pair_seed": s_ab.hex(),
        "mask": {"round": 5, "dim": 8, "values": prf(s_ab, mask_ctx, 8)},
        "challenge": {"rho": rho.hex(), "round": 2, "dim": 6, "values": prf(ch_key, b"challenge" + le64(2), 6)},
        "commitment": {
            "payload": payload.hex(),
            "nonce": nonce.hex(),
            "digest": hashlib.sha256(payload + nonce).hexdigest(),
        },
    }
    print(json.dumps(vectors, indent=2))


if __name__ == "__main__":
    main()
