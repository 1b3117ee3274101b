"""Tokens, policy decisions and request enforcement.

Token format (three base64url segments without padding)::

    header   {"alg":"HS256","typ":"token"}
    payload  {"sub":<clientId>,"roles":[...],"iat":<unix s>,"exp":<unix s>}
    sig      HMAC-SHA256(issuer key, header_b64 + "." + payload_b64)
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

from cogplant.errors import AuthError
from cogplant.model import glob_match

HEADER = b'{"alg":"HS256","typ":"token"}'
PERMIT = "Permit"
DENY = "Deny"
ACTIONS = ("read", "write", "admin")


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict decode: the segment must be the canonical encoding of its bytes."""
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError):
        raise AuthError("malformed-token", "bad base64url") from None
    if b64url(raw) != text:
        raise AuthError("malformed-token", "non-canonical base64url")
    return raw


@dataclass(frozen=True)
class ClientCredential:
    client_id: str
    secret: str
    roles: frozenset[str]


@dataclass(frozen=True)
class Claims:
    sub: str
    roles: frozenset[str]
    iat: int
    exp: int


class TokenIssuer:
    def __init__(self, key: bytes | str) -> None:
        self.key = key.encode("utf-8") if isinstance(key, str) else key
        self._clients: dict[str, ClientCredential] = {}
        self._lock = threading.Lock()

    def register(self, client_id: str, secret: str, roles: Iterable[str]) -> ClientCredential:
        if len(secret.encode("utf-8")) < 16:
            raise AuthError("weak-secret", "client secret must be at least 16 bytes")
        cred = ClientCredential(client_id, secret, frozenset(roles))
        with self._lock:
            if client_id in self._clients:
                raise AuthError("duplicate-client", client_id)
            self._clients[client_id] = cred
        return cred

    def _sign(self, signing_input: bytes) -> bytes:
        return hmac.new(self.key, signing_input, hashlib.sha256).digest()

    def encode(self, claims: Claims) -> str:
        payload = json.dumps(
            {"sub": claims.sub, "roles": sorted(claims.roles), "iat": claims.iat, "exp": claims.exp},
            separators=(",", ":"), ensure_ascii=False,
        ).encode("utf-8")
        signing_input = f"{b64url(HEADER)}.{b64url(payload)}".encode("ascii")
        return signing_input.decode("ascii") + "." + b64url(self._sign(signing_input))

    def issue_token(self, client_id: str, secret: str, ttl: int, now: int) -> str:
        cred = self._clients.get(client_id)
        expected = cred.secret if cred is not None else "\x00" * max(len(secret), 16)
        ok = hmac.compare_digest(expected.encode("utf-8"), secret.encode("utf-8"))
        if cred is None or not ok:
            raise AuthError("invalid-client", "invalid client credentials")
        if ttl < 0:
            raise AuthError("bad-ttl", "ttl must be >= 0")
        return self.encode(Claims(cred.client_id, cred.roles, int(now), int(now) + int(ttl)))

    def verify_token(self, token: str | bytes, now: int) -> Claims:
        if isinstance(token, bytes):
            try:
                token = token.decode("ascii")
            except UnicodeDecodeError:
                raise AuthError("malformed-token", "token is not ASCII") from None
        parts = token.split(".")
        if len(parts) != 3 or not all(parts):
            raise AuthError("malformed-token", "expected three segments")
        h, p, s = parts
        header = b64url_decode(h)
        payload_raw = b64url_decode(p)
        sig = b64url_decode(s)
        if not hmac.compare_digest(sig, self._sign(f"{h}.{p}".encode("ascii"))):
            raise AuthError("invalid-signature", "signature mismatch")
        if header != HEADER:
            raise AuthError("malformed-token", "unsupported header")
        try:
            payload = json.loads(payload_raw)
            claims = Claims(str(payload["sub"]), frozenset(payload["roles"]), int(payload["iat"]), int(payload["exp"]))
        except (ValueError, KeyError, TypeError):
            raise AuthError("malformed-token", "bad payload") from None
        if now >= claims.exp:
            raise AuthError("expired", "token expired")
        return claims


@dataclass(frozen=True)
class Policy:
    id: str
    effect: str
    subject_role: str
    resource_pattern: str
    action: str

    def __post_init__(self) -> None:
        if self.effect not in (PERMIT, DENY):
            raise AuthError("bad-policy", f"effect {self.effect!r}")
        if not self.resource_pattern:
            raise AuthError("bad-policy", "resourcePattern must be non-empty")
        if self.action not in (*ACTIONS, "*"):
            raise AuthError("bad-policy", f"action {self.action!r}")

    def matches(self, roles: frozenset[str] | set[str], resource: str, action: str) -> bool:
        return (
            (self.subject_role == "*" or self.subject_role in roles)
            and glob_match(self.resource_pattern, resource)
            and (self.action == "*" or self.action == action)
        )


@dataclass(frozen=True)
class AuthRequest:
    roles: frozenset[str]
    resource: str
    action: str


def pdp_decide(policies: Iterable[Policy], r: AuthRequest) -> str:
    """Deny-overrides, default-deny."""
    permitted = False
    for p in policies:
        if p.matches(r.roles, r.resource, r.action):
            if p.effect == DENY:
                return DENY
            permitted = True
    return PERMIT if permitted else DENY


def policy_from_dict(d: Mapping[str, Any]) -> Policy:
    return Policy(d["id"], d["effect"], d.get("subjectRole", "*"), d["resourcePattern"], d.get("action", "*"))


def policy_to_dict(p: Policy) -> dict[str, Any]:
    return {"id": p.id, "effect": p.effect, "subjectRole": p.subject_role,
            "resourcePattern": p.resource_pattern, "action": p.action}


class PolicyStore:
    def __init__(self, policies: Iterable[Policy] = ()) -> None:
        self._policies = list(policies)
        self._lock = threading.Lock()

    def add(self, p: Policy) -> None:
        with self._lock:
            if any(q.id == p.id for q in self._policies):
                raise AuthError("duplicate-policy", p.id)
            self._policies = [*self._policies, p]

    def snapshot(self) -> list[Policy]:
        return self._policies


def bearer(headers: Mapping[str, str]) -> str | None:
    for k, v in headers.items():
        if k.lower() == "authorization" and v.startswith("Bearer "):
            return v[len("Bearer "):].strip()
    return None


def pep_enforce(
    resource: str,
    action: str,
    token: str | None,
    issuer: TokenIssuer,
    policies: Iterable[Policy],
    now: int,
    handler: Callable[[Claims], Any],
) -> tuple[int, Any]:
    """Return ``(401, reason)``, ``(403, reason)`` or ``(200, handler(claims))``."""
    if not token:
        return 401, "missing-token"
    try:
        claims = issuer.verify_token(token, now)
    except AuthError as exc:
        return 401, exc.code
    if pdp_decide(policies, AuthRequest(claims.roles, resource, action)) != PERMIT:
        return 403, "forbidden"
    return 200, handler(claims)
