"""Scenario configs: parse and validate JSON, build a world, run it, judge the outcome."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import crypto
from .attestation import (
    Capabilities,
    DtcbPolicy,
    ManifestEntry,
    Requirement,
    create_manifest,
    issue_membership,
    manifest_entries_from_chain,
    measured_boot,
)
from .dice import LayerMeasurement, build_chain
from .gateway import (
    ChainParams,
    Directory,
    GatewayProfile,
    PeeringPolicy,
    Phase,
    Role,
    audit_edges,
)
from .ledger import ALLOWED_TRANSITIONS, AssetState, Ledger
from .sim import Link, Network
from .world import SimWorld

DEFAULT_TICK_LIMIT = 100_000


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _line_of(text: str, needle: str, occurrence: int = 1, after: str | None = None) -> int | None:
    pos = text.find(after) if after else -1
    for _ in range(occurrence):
        pos = text.find(needle, pos + 1)
        if pos < 0:
            return None
    return text.count("\n", 0, pos) + 1


def _hex(value: str, what: str, size: int | None = None) -> bytes:
    try:
        raw = bytes.fromhex(value)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{what}: malformed hex") from exc
    if size is not None and len(raw) != size:
        raise ConfigError(f"{what}: expected {size} bytes, got {len(raw)}")
    return raw


def parse_layers(items: list[dict], what: str = "layers") -> list[LayerMeasurement]:
    """Layer entries take ``code_digest`` (hex) or ``code`` (text, hashed)."""
    layers = []
    for i, item in enumerate(items):
        if "code_digest" in item:
            digest = _hex(item["code_digest"], f"{what}[{i}].code_digest", 32)
        elif "code" in item:
            digest = crypto.hash(str(item["code"]).encode())
        else:
            raise ConfigError(f"{what}[{i}]: needs code_digest or code")
        svn = int(item.get("svn", 0))
        if svn < 0:
            raise ConfigError(f"{what}[{i}]: svn must be >= 0")
        layers.append(
            LayerMeasurement(int(item.get("layer_index", i)), digest, str(item.get("product_id", "")), svn)
        )
    return layers


@dataclass
class ScenarioConfig:
    seed: int
    chains: list[dict]
    nodes: list[dict]
    policies: dict[str, dict]
    links: list[dict] = field(default_factory=list)
    script: list[dict] = field(default_factory=list)
    users: list[dict] = field(default_factory=list)
    assets: list[dict] = field(default_factory=list)
    authority: dict = field(default_factory=dict)
    default_link: dict = field(default_factory=dict)
    tick_limit: int = DEFAULT_TICK_LIMIT
    text: str = ""

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, exc.lineno) from exc
        if not isinstance(raw, dict):
            raise ConfigError("top level must be an object", 1)
        if "seed" not in raw:
            raise ConfigError("missing seed", 1)
        policies = raw.get("policies", [])
        if isinstance(policies, list):
            policies = {p.get("chain_id"): p for p in policies}
        cfg = cls(
            seed=int(raw["seed"]),
            chains=raw.get("chains", []),
            nodes=raw.get("nodes", []),
            policies=policies,
            links=raw.get("links", []),
            script=raw.get("script", []),
            users=raw.get("users", []),
            assets=raw.get("assets", []),
            authority=raw.get("authority", {}),
            default_link=raw.get("default_link", {}),
            tick_limit=int(raw.get("tick_limit", DEFAULT_TICK_LIMIT)),
            text=text,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_text(Path(path).read_text())

    def _err(
        self, message: str, needle: str | None = None, occurrence: int = 1, after: str | None = None
    ) -> ConfigError:
        line = _line_of(self.text, needle, occurrence, after) if needle else None
        return ConfigError(message, line)

    def validate(self) -> None:
        seen: dict[str, int] = {}
        for c in self.chains:
            cid = c.get("chain_id")
            if not cid:
                raise self._err("chain without chain_id", '"chains"')
            seen[cid] = seen.get(cid, 0) + 1
            if seen[cid] > 1:
                raise self._err(f"duplicate chain_id {cid}", f'"{cid}"', 2, after='"chains"')
            if int(c.get("block_interval", 5)) < 1:
                raise self._err(f"chain {cid}: block_interval must be >= 1", f'"{cid}"')
            if int(c.get("confirmation_depth", 1)) < 0:
                raise self._err(f"chain {cid}: confirmation_depth must be >= 0", f'"{cid}"')
        node_ids: set[str] = set()
        for n in self.nodes:
            nid = n.get("node_id")
            if not nid:
                raise self._err("node without node_id", '"nodes"')
            if nid in node_ids:
                raise self._err(f"duplicate node_id {nid}", f'"{nid}"', 2, after='"nodes"')
            node_ids.add(nid)
            if n.get("chain_id") not in seen:
                raise self._err(f"node {nid} references unknown chain {n.get('chain_id')}", f'"{nid}"')
            if "uds" not in n:
                raise self._err(f"node {nid}: missing uds", f'"{nid}"')
            try:
                _hex(n["uds"], f"node {nid} uds", 32)
                parse_layers(n.get("layers", []), f"node {nid} layers")
            except ConfigError as exc:
                raise self._err(str(exc), f'"{nid}"') from exc
        for n in self.nodes:
            if n.get("gateway") and n["chain_id"] not in self.policies:
                raise self._err(f"no policy for chain {n['chain_id']}", f'"{n["node_id"]}"')
        user_ids = {u.get("user_id") for u in self.users}
        for a in self.assets:
            aid = a.get("asset_id")
            if a.get("chain_id") not in seen:
                raise self._err(f"asset {aid} references unknown chain", f'"{aid}"')
            if a.get("owner") not in user_ids:
                raise self._err(f"asset {aid} references unknown owner", f'"{aid}"')
        for link in self.links:
            try:
                _link(link)
            except (KeyError, ValueError) as exc:
                raise self._err(f"bad link: {exc}", '"links"') from exc
        for i, action in enumerate(self.script):
            if "action" not in action:
                raise self._err(f"script[{i}] missing action", '"script"')


def _link(spec: dict) -> Link:
    lo = int(spec.get("delay_min", 1))
    return Link(
        lo,
        int(spec.get("delay_max", lo)),
        float(spec.get("drop_probability", 0.0)),
        float(spec.get("duplicate_probability", 0.0)),
    )


def _user_key(user: dict) -> crypto.KeyPair:
    if "seed" in user:
        return crypto.keypair_from_seed(_hex(user["seed"], f"user {user['user_id']} seed", 32))
    return crypto.keypair_from_seed(crypto.hash(f"user:{user['user_id']}".encode()))


def _policy(spec: dict, authority_key: bytes) -> PeeringPolicy:
    reqs = tuple(
        Requirement(
            r["name"],
            int(r.get("min_svn", 0)),
            _hex(r["digest"], f"requirement {r['name']} digest", 32) if r.get("digest") else None,
        )
        for r in spec.get("required_components", [])
    )
    dtcb = DtcbPolicy(reqs, int(spec.get("max_quote_age_ticks", 100)), authority_key)
    m = int(spec.get("quorum_m", 1))
    return PeeringPolicy(
        dtcb,
        quorum_m=m,
        quorum_n=int(spec.get("quorum_n", max(m, 1))),
        sensitive_threshold=int(spec.get("sensitive_threshold", 2**63)),
        grace_blocks=int(spec.get("grace_blocks", 10)),
        trust_timeout_ticks=int(spec.get("trust_timeout_ticks", 200)),
    )


def build_world(cfg: ScenarioConfig, seed: int | None = None) -> SimWorld:
    seed = cfg.seed if seed is None else seed
    setup_rng = random.Random(f"setup:{seed}")
    auth_seed = (
        _hex(cfg.authority["seed"], "authority seed", 32)
        if "seed" in cfg.authority
        else crypto.hash(b"group-authority")
    )
    authority = crypto.keypair_from_seed(auth_seed)
    group_id = cfg.authority.get("group_id", "gateways")

    directory = Directory()
    ledgers: dict[str, Ledger] = {}
    for c in cfg.chains:
        cid = c["chain_id"]
        params = ChainParams(int(c.get("block_interval", 5)), int(c.get("confirmation_depth", 1)))
        directory.chains[cid] = params
        ledgers[cid] = Ledger(
            cid,
            params.block_interval,
            params.confirmation_depth,
            outbound_lock_ticks=int(c.get("outbound_lock_ticks", 1000)),
        )

    users = {u["user_id"]: _user_key(u).public_key for u in cfg.users}
    gateways: dict[str, GatewayProfile] = {}
    for n in cfg.nodes:
        if not n.get("gateway"):
            continue
        nid, cid = n["node_id"], n["chain_id"]
        identity = build_chain(_hex(n["uds"], "uds", 32), parse_layers(n.get("layers", [])))
        if identity.top_alias is None:
            raise ConfigError(f"gateway {nid} needs at least two layers to hold an AliasID")
        components = manifest_entries_from_chain(identity) + [
            ManifestEntry(
                e["name"], str(e.get("version", e.get("svn", 0))), int(e.get("svn", 0)),
                _hex(e["digest"], "component digest", 32) if "digest" in e else crypto.hash(e["name"].encode()),
            )
            for e in n.get("components", [])
        ]
        pseudonym = crypto.keypair_from_seed(setup_rng.randbytes(32))
        credential = None
        if n.get("credential", True):
            credential = issue_membership(
                authority.secret_key, pseudonym.public_key, group_id, identity.device_id.public_key
            )
        caps = n.get("capabilities", {})
        gateways[nid] = GatewayProfile(
            node_id=nid,
            chain_id=cid,
            identity=identity,
            registers=measured_boot(identity),
            manifest=create_manifest(identity, components),
            policy=_policy(cfg.policies[cid], authority.public_key),
            credential=credential,
            pseudonym=pseudonym,
            capabilities=Capabilities(
                bool(caps.get("well_defined", True)), bool(caps.get("shielded", True))
            ),
        )
        directory.keys[nid] = identity.top_alias.public_key
        directory.chain_of[nid] = cid
        directory.delegate.setdefault(cid, nid)
        ledgers[cid].gateways.add(nid)
    for cid, spec in cfg.policies.items():
        if spec.get("delegate"):
            directory.delegate[cid] = spec["delegate"]

    for a in cfg.assets:
        pid = setup_rng.randbytes(32)
        ledgers[a["chain_id"]].add_asset(pid, users[a["owner"]], int(a.get("value", 0)), a["asset_id"])

    network = Network(
        {(l["from"], l["to"]): _link(l) for l in cfg.links},
        _link(cfg.default_link) if cfg.default_link else Link(),
    )
    return SimWorld(seed, ledgers, directory, gateways, network, users, cfg.script)


# -- reporting ------------------------------------------------------------------


@dataclass
class RunReport:
    seed: int
    ticks: int
    quiescent: bool
    final_assets: dict[str, dict[str, str]]
    verdicts: dict[str, dict[str, Any]]
    transfers: list[dict[str, Any]]
    hazards: list[dict[str, Any]]
    script_failures: list[str]
    event_log_digest: str

    @property
    def passed(self) -> bool:
        return all(v["pass"] for v in self.verdicts.values()) and not self.script_failures

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "ticks": self.ticks,
            "quiescent": self.quiescent,
            "passed": self.passed,
            "final_assets": self.final_assets,
            "verdicts": self.verdicts,
            "transfers": self.transfers,
            "hazards": self.hazards,
            "script_failures": self.script_failures,
            "event_log_digest": self.event_log_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return crypto.hash(self.to_json().encode()).hex()

    def rows(self) -> list[str]:
        """Tab-delimited verdict lines for terminals and diffing."""
        out = []
        for name, v in self.verdicts.items():
            tick = "-" if v["first_violation_tick"] is None else str(v["first_violation_tick"])
            out.append(f"verdict\t{name}\t{'PASS' if v['pass'] else 'FAIL'}\t{tick}")
        for h in self.hazards:
            out.append(f"hazard\t{h['asset']}\t{h['tick']}")
        for f in self.script_failures:
            out.append(f"script_failure\t{f}")
        out.append(f"digest\tevent_log\t{self.event_log_digest}")
        return out


def _verdict(violation_ticks: list[int]) -> dict[str, Any]:
    return {"pass": not violation_ticks, "first_violation_tick": min(violation_ticks, default=None)}


def _describe(rec) -> str:
    if rec.state is AssetState.INVALIDATED:
        return f"Invalidated->Redirect({rec.remote_chain},{rec.remote_public_id.hex()})"
    return rec.state.value


def _dest_session(world: SimWorld, chain: str, key: bytes | None):
    if key is None:
        return None
    for node in world.nodes.values():
        if node.profile.chain_id == chain and key in node.sessions:
            return node.sessions[key]
    return None


def _src_session(world: SimWorld, key: bytes | None):
    if key is None:
        return None
    for node in world.nodes.values():
        state = node.sessions.get(key)
        if state is not None and state.role is Role.SOURCE:
            return state
    return None


def build_report(world: SimWorld) -> RunReport:
    auditor = world.auditor
    final: dict[str, dict[str, str]] = {}
    for cid, ledger in world.ledgers.items():
        final[cid] = {}
        for rec in ledger.assets.values():
            label = auditor.label_of(world, rec) or "(unlinked)"
            final[cid][label] = _describe(rec)

    transfers = []
    no_loss, redirect = [], []
    for t in world.transfers:
        src = _src_session(world, t.session)
        dst = _dest_session(world, t.dest_chain, t.session)
        completed = bool(src and dst and src.phase is Phase.DONE and dst.phase is Phase.DONE)
        src_rec = world.ledgers[t.source_chain].assets.get(t.asset)
        linked = [
            r for r in world.ledgers[t.dest_chain].assets.values()
            if r.registered and auditor.label_of(world, r) == t.label
        ]
        if completed:
            txid1, txid2 = src.transfer.txid1, src.transfer.txid2
            q1 = world.ledgers[t.source_chain].query_asset(txid1)
            q2 = world.ledgers[t.dest_chain].query_asset(txid2)
            ok = (
                q1.status == "Redirect" and q1.chain == t.dest_chain and q1.remote_public_id == txid2
                and q2.status == "Active" and q2.owner == t.dest_owner
            )
            if not ok:
                redirect.append(world.now)
        else:
            ok = src_rec is not None and src_rec.state is AssetState.ACTIVE and not linked
            if not ok:
                no_loss.append(auditor.hazards.get(t.label, world.now))
        transfers.append({
            "asset": t.label,
            "source_chain": t.source_chain,
            "dest_chain": t.dest_chain,
            "completed": completed,
            "source_phase": src.phase.value if src else None,
            "dest_phase": dst.phase.value if dst else None,
            "txid1": src.transfer.txid1.hex() if src and src.transfer.txid1 else None,
            "txid2": src.transfer.txid2.hex() if src and src.transfer.txid2 else None,
        })

    trust_gate = []
    for tick, node_id, session in world.register_log:
        own = world.trust_log.get((node_id, session))
        peer = [
            tk for (n, s), tk in world.trust_log.items()
            if s == session and n != node_id
        ]
        if own is None or own > tick or not peer or min(peer) > tick:
            trust_gate.append(tick)

    phase_bad = [
        tick for tick, _, role, a, b in world.phase_log if audit_edges(role, [(a, b)])
    ]
    ledger_bad = [
        tr.tick
        for ledger in world.ledgers.values()
        for tr in ledger.transitions
        if (tr.before, tr.after, tr.cause) not in ALLOWED_TRANSITIONS
    ]
    verdicts = {
        "exclusivity": _verdict([t for t, _ in auditor.exclusivity_violations]),
        "no_loss": _verdict(no_loss),
        "redirect": _verdict(redirect),
        "trust_gate": _verdict(trust_gate),
        "phase_audit": _verdict(phase_bad),
        "ledger_transitions": _verdict(ledger_bad),
    }
    return RunReport(
        seed=world.seed,
        ticks=world.now,
        quiescent=world.quiescent(),
        final_assets=final,
        verdicts=verdicts,
        transfers=transfers,
        hazards=[{"asset": k, "tick": v} for k, v in sorted(auditor.hazards.items())],
        script_failures=list(world.script_failures),
        event_log_digest=world.log.digest(),
    )


def run_scenario(
    cfg: ScenarioConfig, seed: int | None = None, tick_limit: int | None = None
) -> tuple[RunReport, SimWorld]:
    world = build_world(cfg, seed)
    world.run(tick_limit if tick_limit is not None else cfg.tick_limit)
    return build_report(world), world


def bundled(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``bundled("s1_happy_path")``."""
    return Path(__file__).parent / "scenarios" / f"{name}.json"


def _outcome(report: RunReport) -> str:
    if report.hazards:
        return "hazard"
    return "completed" if report.transfers and all(t["completed"] for t in report.transfers) else "aborted"


def fault_sweep(
    cfg: ScenarioConfig, runs: int, seed: int = 0, max_drop: float = 0.3, tick_limit: int | None = None
) -> list[dict[str, Any]]:
    """Re-run ``cfg`` under random seeds and random lossy links between every gateway pair.

    Delays are drawn from [1, 3 * slowest block interval] and drop probabilities
    from [0, max_drop]. Returns one row per run.
    """
    rng = random.Random(f"sweep:{seed}")
    top = 3 * max(int(c.get("block_interval", 5)) for c in cfg.chains)
    gws = [n["node_id"] for n in cfg.nodes if n.get("gateway")]
    rows = []
    for i in range(runs):
        run_seed = rng.getrandbits(63)
        links = []
        for a in gws:
            for b in gws:
                if a == b:
                    continue
                lo = rng.randint(1, top)
                links.append({
                    "from": a, "to": b, "delay_min": lo, "delay_max": rng.randint(lo, top),
                    "drop_probability": rng.uniform(0.0, max_drop),
                })
        variant = ScenarioConfig(**{**cfg.__dict__, "links": links, "seed": run_seed})
        report, _ = run_scenario(variant, tick_limit=tick_limit)
        rows.append({
            "run": i,
            "seed": run_seed,
            "outcome": _outcome(report),
            "ticks": report.ticks,
            "exclusivity": report.verdicts["exclusivity"]["pass"],
            "hazards": len(report.hazards),
            "passed": report.passed,
            "final_assets": report.final_assets,
            "links": links,
        })
    return rows
