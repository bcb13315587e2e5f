"""Threshold coin tossing over a prime-order subgroup.

The dealer Shamir-shares a secret exponent ``x`` per participant set. For a
round ``r`` each member raises ``H1(set, r)`` to its share; any ``f + 1`` such
function shares combine (Lagrange in the exponent) to ``H1(set, r) ** x``,
which is hashed down to a configuration index. In Byzantine mode every
function share carries a Chaum-Pedersen proof that it used the same exponent
as the member's public verification key.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .core import (ConfigSpace, Configuration, MptcError, ParticipantSet,
                   ProcessId, SystemParams, config_index_from_bits)

CRASH = "crash"
BYZANTINE = "byzantine"


class GroupTooSmall(MptcError):
    pass


class UnknownShareOrigin(MptcError):
    pass


class DuplicateShare(MptcError):
    pass


class ShareRoundMismatch(MptcError):
    pass


class NotEnoughShares(MptcError):
    pass


@dataclass(frozen=True)
class GroupParams:
    p: int
    q: int
    g: int
    insecure_test_params: bool = False
    # test hook: H1 returns g itself (exponent 1); only with insecure params
    pin_h1: bool = False

    def __post_init__(self):
        if self.p != 2 * self.q + 1:
            raise ValueError("p must be a safe prime 2q + 1")
        if self.g in (0, 1) or pow(self.g, self.q, self.p) != 1:
            raise ValueError("g must generate the order-q subgroup")
        if self.pin_h1 and not self.insecure_test_params:
            raise ValueError("pin_h1 requires insecure_test_params")
        if self.p.bit_length() < 64 and not self.insecure_test_params:
            raise ValueError("tiny groups need insecure_test_params=True")

    @property
    def byte_len(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def in_subgroup(self, y: int) -> bool:
        return 0 < y < self.p and pow(y, self.q, self.p) == 1


# 256-bit safe prime; 4 = 2**2 is a quadratic residue, so it generates the
# subgroup of order q.
DEFAULT_GROUP = GroupParams(
    p=0x800000000000000000000000000000000000000000000000000000000002FF7F,
    q=0x4000000000000000000000000000000000000000000000000000000000017FBF,
    g=4,
)

TOY_GROUP = GroupParams(p=23, q=11, g=4, insecure_test_params=True)


def _int_bytes(v: int) -> bytes:
    return v.to_bytes(max(1, (v.bit_length() + 7) // 8), "big")


def _hash(tag: bytes, *parts) -> bytes:
    h = hashlib.sha256(tag)
    for part in parts:
        b = part if isinstance(part, bytes) else _int_bytes(part)
        h.update(len(b).to_bytes(4, "big"))
        h.update(b)
    return h.digest()


def _hash_to_zq(q: int, tag: bytes, *parts) -> int:
    # two digests give ample headroom over a 256-bit q before reduction
    return int.from_bytes(_hash(tag, 0, *parts) + _hash(tag, 1, *parts), "big") % q


def h1_exponent(group: GroupParams, set_index: int, round_: int) -> int:
    if group.pin_h1:
        return 1
    counter = 0
    while True:
        e = _hash_to_zq(group.q, b"MPTC-H1", set_index, round_, counter)
        if e:
            return e
        counter += 1


def h1(group: GroupParams, set_index: int, round_: int) -> int:
    """Hash (set, round) into the order-q subgroup."""
    return pow(group.g, h1_exponent(group, set_index, round_), group.p)


def h2_bits(sigma: int, b: int, draw: int) -> int:
    if b == 0:
        return 0
    digest = _hash(b"MPTC-H2", draw, sigma)
    return int.from_bytes(digest, "big") >> (256 - b)


@dataclass(frozen=True)
class SecretShare:
    owner: ProcessId
    set_index: int
    position: int
    x_i: int


@dataclass(frozen=True)
class VerificationKeys:
    vk_set: int
    vk_member: tuple[tuple[ProcessId, int], ...]

    def member_key(self, owner: ProcessId) -> int:
        for pid, key in self.vk_member:
            if pid == owner:
                return key
        raise UnknownShareOrigin(f"no verification key for process {owner}")


@dataclass(frozen=True)
class FunctionShare:
    owner: ProcessId
    set_index: int
    round: int
    sigma: int
    dleq_proof: Optional[tuple[int, int]] = None


@dataclass
class DealerOutput:
    c0: Configuration
    per_process: dict[ProcessId, dict[int, SecretShare]]
    per_set_keys: dict[int, VerificationKeys]
    group: GroupParams = field(default=DEFAULT_GROUP)

    def share_for(self, pid: ProcessId, set_index: int) -> Optional[SecretShare]:
        return self.per_process.get(pid, {}).get(set_index)


def poly_eval(coeffs: Sequence[int], z: int, q: int) -> int:
    acc = 0
    for c in reversed(coeffs):
        acc = (acc * z + c) % q
    return acc


def lagrange_at_zero(points: Sequence[int], i: int, q: int) -> int:
    num, den = 1, 1
    for j in points:
        if j != i:
            num = num * j % q
            den = den * (j - i) % q
    return num * pow(den, -1, q) % q


def interpolate_at_zero(shares: dict[int, int], q: int) -> int:
    pts = list(shares)
    return sum(y * lagrange_at_zero(pts, i, q) for i, y in shares.items()) % q


def split(group: GroupParams, members: ParticipantSet, f: int, rng: random.Random,
          secret: Optional[int] = None, coeffs: Optional[Sequence[int]] = None):
    """Shamir-share a fresh exponent among ``members`` with threshold ``f + 1``.

    Returns ``(shares, keys, secret)``. Callers that model the dealer must
    drop the secret once keys and shares are handed out.
    """
    p_f = len(members)
    if p_f < f + 1:
        raise ValueError(f"need at least f + 1 = {f + 1} members, got {p_f}")
    if group.q <= p_f:
        raise GroupTooSmall(f"subgroup order {group.q} must exceed p_f = {p_f}")
    q = group.q
    x = rng.randrange(q) if secret is None else secret % q
    if coeffs is None:
        coeffs = [rng.randrange(q) for _ in range(f)]
    if len(coeffs) != f:
        raise ValueError("need exactly f higher-order coefficients")
    poly = [x, *coeffs]
    shares = []
    vk_member = []
    for pos, pid in enumerate(members.members, start=1):
        x_i = poly_eval(poly, pos, q)
        shares.append(SecretShare(pid, members.set_index, pos, x_i))
        vk_member.append((pid, pow(group.g, x_i, group.p)))
    keys = VerificationKeys(pow(group.g, x, group.p), tuple(vk_member))
    return shares, keys, x


def _dleq_challenge(group, base, vk, sigma, a1, a2) -> int:
    return _hash_to_zq(group.q, b"MPTC-DLEQ", group.g, base, vk, sigma, a1, a2)


def gfs(share: SecretShare, round_: int, group: GroupParams, mode: str = CRASH) -> FunctionShare:
    """Function share of ``F_S(round)`` for the holder of ``share``."""
    base = h1(group, share.set_index, round_)
    sigma = pow(base, share.x_i, group.p)
    proof = None
    if mode == BYZANTINE:
        q, p = group.q, group.p
        # deterministic nonce keeps gfs a pure function of its inputs
        w = _hash_to_zq(q, b"MPTC-NONCE", share.x_i, share.set_index, round_)
        a1, a2 = pow(group.g, w, p), pow(base, w, p)
        vk = pow(group.g, share.x_i, p)
        c = _dleq_challenge(group, base, vk, sigma, a1, a2)
        proof = (c, (w + share.x_i * c) % q)
    return FunctionShare(share.owner, share.set_index, round_, sigma, proof)


def verify(round_: int, fshare: FunctionShare, keys: VerificationKeys,
           group: GroupParams, mode: str = CRASH) -> bool:
    vk = keys.member_key(fshare.owner)
    if mode != BYZANTINE:
        return True
    if fshare.round != round_ or fshare.dleq_proof is None:
        return False
    if not group.in_subgroup(fshare.sigma):
        return False
    c, z = fshare.dleq_proof
    if not (0 <= c < group.q and 0 <= z < group.q):
        return False
    p = group.p
    base = h1(group, fshare.set_index, round_)
    a1 = pow(group.g, z, p) * pow(vk, -c, p) % p
    a2 = pow(base, z, p) * pow(fshare.sigma, -c, p) % p
    return c == _dleq_challenge(group, base, vk, fshare.sigma, a1, a2)


def combine_element(fshares: Iterable[FunctionShare], round_: int, members: ParticipantSet,
                    group: GroupParams, threshold: Optional[int] = None) -> int:
    fshares = list(fshares)
    if threshold is not None and len(fshares) != threshold:
        raise NotEnoughShares(f"combine needs exactly {threshold} shares, got {len(fshares)}")
    owners = [fs.owner for fs in fshares]
    if len(set(owners)) != len(owners):
        raise DuplicateShare(f"duplicate share owners {owners}")
    for fs in fshares:
        if fs.round != round_:
            raise ShareRoundMismatch(f"share for round {fs.round}, expected {round_}")
        if fs.set_index != members.set_index:
            raise ShareRoundMismatch(f"share for set {fs.set_index}, expected {members.set_index}")
        if fs.owner not in members:
            raise UnknownShareOrigin(f"process {fs.owner} not in set")
    positions = [members.position(o) for o in owners]
    sigma = 1
    for fs, pos in zip(fshares, positions):
        lam = lagrange_at_zero(positions, pos, group.q)
        sigma = sigma * pow(fs.sigma, lam, group.p) % group.p
    return sigma


def config_from_element(sigma: int, space: ConfigSpace) -> Configuration:
    draws = iter(range(1, 10**9))
    first = h2_bits(sigma, space.b, 0)
    idx, _ = config_index_from_bits(first, space, lambda: h2_bits(sigma, space.b, next(draws)))
    return space[idx]


def combine(fshares: Iterable[FunctionShare], round_: int, space: ConfigSpace,
            group: GroupParams, members: ParticipantSet,
            threshold: Optional[int] = None) -> Configuration:
    """``F_S(round)`` from ``f + 1`` function shares of set ``members``."""
    return config_from_element(
        combine_element(fshares, round_, members, group, threshold), space)


def direct_evaluation(secret: int, set_index: int, round_: int, space: ConfigSpace,
                      group: GroupParams) -> Configuration:
    """Oracle path: evaluate ``F_S(round)`` straight from the shared exponent."""
    return config_from_element(pow(h1(group, set_index, round_), secret, group.p), space)


def dealer_init(params: SystemParams, space: ConfigSpace, group: GroupParams,
                seed: int) -> DealerOutput:
    rng = random.Random(seed)
    per_process: dict[ProcessId, dict[int, SecretShare]] = {}
    keys: dict[int, VerificationKeys] = {}
    for pset in sorted(space.participant_sets(), key=lambda s: s.set_index):
        shares, vks, _secret = split(group, pset, params.f, rng)
        del _secret
        keys[pset.set_index] = vks
        for sh in shares:
            per_process.setdefault(sh.owner, {})[pset.set_index] = sh
    c0 = space[rng.randrange(len(space))]
    return DealerOutput(c0, per_process, keys, group)


@dataclass(frozen=True)
class EmuCoin:
    """Emulated coin: a fixed, seed-derived (or explicit round-robin) schedule."""

    seed: int
    sequence: Optional[tuple[int, ...]] = None

    def index(self, round_: int, space: ConfigSpace) -> int:
        if self.sequence:
            return self.sequence[round_ % len(self.sequence)] % len(space)
        draws = iter(range(1, 10**9))

        def bits(draw: int) -> int:
            if space.b == 0:
                return 0
            digest = _hash(b"MPTC-EMU", self.seed, round_, draw)
            return int.from_bytes(digest, "big") >> (256 - space.b)

        idx, _ = config_index_from_bits(bits(0), space, lambda: bits(next(draws)))
        return idx


def emu_next_config(coin: EmuCoin, round_: int, space: ConfigSpace) -> Configuration:
    return space[coin.index(round_, space)]
