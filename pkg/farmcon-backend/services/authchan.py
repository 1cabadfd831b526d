"""
Authenticated Control Channel

Every control connection starts with a nonce challenge:

    server -> CHAL <base64 nonce> <server_id>
    client -> AUTH <principal> <base64 signature over nonce||principal||server_id>
    server -> OK <principal>  |  ERR <code> <message>

Nonces are single use and expire after 30 seconds. The signature scheme is
pluggable: Ed25519Scheme for real deployments, DigestTestScheme for
deterministic desk tests.
"""

import base64
import hashlib
import hmac
import logging
import secrets
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from errors import AuthFailed, ReplayedChallenge, StaleChallenge
from services.registry import Registry

logger = logging.getLogger(__name__)

NONCE_BYTES = 32
CHALLENGE_TTL = 30.0
MAX_OUTSTANDING = 1024


class SignatureScheme(Protocol):
    name: str

    def keypair(self, seed: bytes) -> Tuple[bytes, bytes]:
        """(private, public) derived from a 32-byte seed"""

    def sign(self, private: bytes, message: bytes) -> bytes:
        ...

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        ...


class Ed25519Scheme:
    name = "ed25519"

    def keypair(self, seed: bytes) -> Tuple[bytes, bytes]:
        private = Ed25519PrivateKey.from_private_bytes(seed)
        public = private.public_key().public_bytes(
            encoding=serialization.Encoding.Raw, format=serialization.PublicFormat.Raw
        )
        return seed, public

    def sign(self, private: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private).sign(message)

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
            return True
        except (InvalidSignature, ValueError):
            return False


class DigestTestScheme:
    """
    Deterministic stand-in for desk tests. The "public" key is a digest of
    the seed and the signature is an HMAC keyed with it, so anyone holding
    the public key can sign: never use it outside tests.
    """

    name = "digest-test"

    def keypair(self, seed: bytes) -> Tuple[bytes, bytes]:
        public = hashlib.sha256(b"farmcon-test-key" + seed).digest()
        return public, public

    def sign(self, private: bytes, message: bytes) -> bytes:
        return hmac.new(private, message, hashlib.sha256).digest()

    def verify(self, public: bytes, message: bytes, signature: bytes) -> bool:
        return hmac.compare_digest(self.sign(public, message), signature)


SCHEMES = {"ed25519": Ed25519Scheme, "digest-test": DigestTestScheme}


def scheme_by_name(name: str) -> SignatureScheme:
    try:
        return SCHEMES[name]()
    except KeyError:
        raise ValueError(f"unknown signature scheme {name!r} (choose from {', '.join(SCHEMES)})")


@dataclass(frozen=True)
class Challenge:
    nonce: bytes
    server_id: str
    issued_at: float

    def wire(self) -> str:
        return f"CHAL {base64.b64encode(self.nonce).decode()} {self.server_id}"


@dataclass(frozen=True)
class Credential:
    principal: str
    signature: bytes

    def wire(self) -> str:
        return f"AUTH {self.principal} {base64.b64encode(self.signature).decode()}"


def signed_message(nonce: bytes, principal: str, server_id: str) -> bytes:
    return nonce + principal.encode("utf-8") + server_id.encode("utf-8")


def make_credential(scheme: SignatureScheme, private: bytes, principal: str, nonce: bytes, server_id: str) -> Credential:
    return Credential(principal, scheme.sign(private, signed_message(nonce, principal, server_id)))


class ChallengeStore:
    """
    Outstanding challenges for one server.

    Check-and-consume is atomic under the store lock, so one nonce can be
    spent at most once even with concurrent authenticate calls.
    """

    def __init__(
        self,
        server_id: str,
        clock,
        scheme: SignatureScheme,
        ttl: float = CHALLENGE_TTL,
        capacity: int = MAX_OUTSTANDING,
        random_bytes: Callable[[int], bytes] = secrets.token_bytes,
    ):
        self.server_id = server_id
        self.clock = clock
        self.scheme = scheme
        self.ttl = ttl
        self.capacity = capacity
        self._random_bytes = random_bytes
        self._outstanding: "OrderedDict[bytes, Challenge]" = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._outstanding)

    def issue_challenge(self) -> Challenge:
        challenge = Challenge(self._random_bytes(NONCE_BYTES), self.server_id, self.clock.now())
        with self._lock:
            self._outstanding[challenge.nonce] = challenge
            while len(self._outstanding) > self.capacity:
                self._outstanding.popitem(last=False)
        return challenge

    def authenticate(self, ch: Challenge, cred: Credential, reg: Registry) -> str:
        """
        Returns the authenticated principal. The nonce is consumed whatever
        the outcome.

        Raises:
            ReplayedChallenge: nonce not outstanding (used, evicted, or never issued)
            StaleChallenge: nonce older than the TTL
            AuthFailed: unknown principal or bad signature
        """
        with self._lock:
            issued = self._outstanding.pop(ch.nonce, None)
        if issued is None or issued.server_id != ch.server_id:
            raise ReplayedChallenge("challenge is not outstanding")
        if self.clock.now() - issued.issued_at > self.ttl:
            raise StaleChallenge("challenge expired")
        key = reg.key_for(cred.principal)
        if key is None:
            logger.warning(f"Authentication for unknown principal {cred.principal!r}")
            raise AuthFailed("authentication failed")
        message = signed_message(issued.nonce, cred.principal, issued.server_id)
        if not self.scheme.verify(key.raw, message, cred.signature):
            logger.warning(f"Bad signature from {cred.principal!r} (key {key.key_id})")
            raise AuthFailed("authentication failed")
        return cred.principal


def issue_challenge(store: ChallengeStore) -> Challenge:
    return store.issue_challenge()


def authenticate(store: ChallengeStore, ch: Challenge, cred: Credential, reg: Registry) -> str:
    return store.authenticate(ch, cred, reg)


def parse_challenge(line: str, issued_at: float = 0.0) -> Challenge:
    parts = line.split()
    if len(parts) != 3 or parts[0] != "CHAL":
        raise ValueError(f"not a challenge: {line!r}")
    return Challenge(base64.b64decode(parts[1], validate=True), parts[2], issued_at)


def parse_credential(line: str) -> Optional[Credential]:
    parts = line.split()
    if len(parts) != 3 or parts[0] != "AUTH":
        return None
    try:
        return Credential(parts[1], base64.b64decode(parts[2], validate=True))
    except ValueError:
        return None
