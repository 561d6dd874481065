"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

The lines are collected in RESULTS and echoed in the pytest terminal summary.
"""

import itertools
import random
import time


from dtcb import crypto
from dtcb.attestation import (
    Manifest,
    ManifestEntry,
    Quote,
    Registers,
    create_manifest,
    create_quote,
    measured_boot,
    verify_manifest,
    verify_quote,
)
from dtcb.dice import LayerMeasurement, SvnRecord, build_chain, check_svn, derive_alias_id, derive_cdi, derive_layer_secret
from dtcb.encoding import DecodeError
from dtcb.gateway import Phase, SignedAssertion, verify_quorum
from dtcb.ledger import AssetState, Register
from dtcb.scenario import ScenarioConfig, bundled, fault_sweep, run_scenario

import oracle

RESULTS = []


def record(number, name, ok, detail=""):
    line = f"criterion {number:>2}  {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
    RESULTS.append(line)
    print(line)
    assert ok, line


def random_layers(rng, depth):
    return [
        LayerMeasurement(i, rng.randbytes(32), f"comp-{rng.randrange(1000)}", rng.randrange(2**20))
        for i in range(depth)
    ]


def test_c01_derivation_matches_reference_oracle():
    rng = random.Random(101)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        uds = rng.randbytes(32)
        layers = random_layers(rng, 3)
        ident = build_chain(uds, layers)
        ref = oracle.derive(uds, [(m.layer_index, m.code_digest, m.product_id, m.svn) for m in layers])
        if ident.cdi != ref["cdi"] or list(ident.layer_secrets) != ref["secrets"]:
            mismatches += 1
    elapsed = time.perf_counter() - start
    record(1, "derivation oracle equivalence", mismatches == 0 and elapsed < 5.0,
           f"100 chains, mismatches={mismatches}, {elapsed:.2f}s (<5s)")


def _top_alias_raw(uds, layers):
    """Same derivation, step by step, without the positional index check."""
    cdi = derive_cdi(uds, layers[0].code_digest)
    secret = derive_layer_secret(cdi, layers[0])
    for m in layers[1:]:
        secret = derive_layer_secret(secret, m)
    return derive_alias_id(secret).public_key, secret


def _mutations(m):
    flipped = bytearray(m.code_digest)
    flipped[0] ^= 0x01
    yield LayerMeasurement(m.layer_index + 16, m.code_digest, m.product_id, m.svn)
    yield LayerMeasurement(m.layer_index, bytes(flipped), m.product_id, m.svn)
    yield LayerMeasurement(m.layer_index, m.code_digest, m.product_id + "x", m.svn)
    yield LayerMeasurement(m.layer_index, m.code_digest, m.product_id, m.svn + 1)


def test_c02_layer_sensitivity():
    rng = random.Random(202)
    start = time.perf_counter()
    failures = exceptions = checks = 0
    for _ in range(50):
        uds = rng.randbytes(32)
        layers = random_layers(rng, rng.randint(2, 6))
        try:
            base = build_chain(uds, layers)
            top = base.top_alias.public_key
            assert _top_alias_raw(uds, layers) == (top, base.layer_secrets[-1])
            for pos, m in enumerate(layers):
                for mutated in _mutations(m):
                    variant = list(layers)
                    variant[pos] = mutated
                    checks += 1
                    if _top_alias_raw(uds, variant)[0] == top:
                        failures += 1
            for i, j in itertools.combinations(range(len(layers)), 2):
                swapped = list(layers)
                a, b = layers[i], layers[j]
                swapped[i] = LayerMeasurement(a.layer_index, b.code_digest, a.product_id, a.svn)
                swapped[j] = LayerMeasurement(b.layer_index, a.code_digest, b.product_id, b.svn)
                checks += 1
                if build_chain(uds, swapped).layer_secrets[-1] == base.layer_secrets[-1]:
                    failures += 1
        except Exception:
            exceptions += 1
    elapsed = time.perf_counter() - start
    record(2, "layer sensitivity", failures == 0 and exceptions == 0 and elapsed < 30.0,
           f"{checks} mutations/swaps, unchanged={failures}, exceptions={exceptions}, {elapsed:.2f}s (<30s)")


def test_c03_svn_never_regresses():
    rng = random.Random(303)
    violations = 0
    for _ in range(1000):
        record_ = SvnRecord()
        accepted_max: dict[tuple[int, str], int] = {}
        for _ in range(rng.randint(0, 50)):
            key = (rng.randrange(3), rng.choice(["fw", "app"]))
            svn = rng.randrange(25)
            verdict = check_svn(record_, LayerMeasurement(key[0], bytes(32), key[1], svn))
            current = accepted_max.get(key)
            should_accept = current is None or svn >= current
            if bool(verdict) != should_accept:
                violations += 1
            if should_accept:
                accepted_max[key] = svn if current is None else max(current, svn)
            if dict(record_.items()) != accepted_max:
                violations += 1
    record(3, "svn anti-rollback", violations == 0, f"1000 sequences, violations={violations}")


def _flip(blob, bit):
    buf = bytearray(blob)
    buf[bit // 8] ^= 1 << (bit % 8)
    return bytes(buf)


def test_c04_tamper_suite():
    rng = random.Random(404)
    ident = build_chain(rng.randbytes(32), random_layers(rng, 3))
    key = ident.top_alias.public_key
    nonce = rng.randbytes(32)
    quote = create_quote(ident, measured_boot(ident), nonce).to_bytes()
    manifest = create_manifest(
        ident, [ManifestEntry(f"c{i}", "1.0", i, rng.randbytes(32)) for i in range(4)]
    ).to_bytes()
    assertion = SignedAssertion(
        "Invalidated", rng.randbytes(32), rng.randbytes(32), key, rng.randbytes(32)
    ).with_signature(ident.top_alias).to_bytes()

    def quote_ok(blob):
        return bool(verify_quote(Quote.from_bytes(blob), key, nonce))

    def manifest_ok(blob):
        return bool(verify_manifest(Manifest.from_bytes(blob), key))

    def assertion_ok(blob):
        a = SignedAssertion.from_bytes(blob)
        return a.asserter == key and a.verify()

    targets = [(quote, quote_ok), (manifest, manifest_ok), (assertion, assertion_ok)]
    assert all(check(blob) for blob, check in targets)
    start = time.perf_counter()
    false_accepts = 0
    for i in range(1000):
        blob, check = targets[i % 3]
        try:
            accepted = check(_flip(blob, rng.randrange(len(blob) * 8)))
        except DecodeError:
            accepted = False
        false_accepts += accepted
    elapsed = time.perf_counter() - start
    record(4, "attestation tamper suite", false_accepts == 0 and elapsed < 10.0,
           f"1000 bit flips, false accepts={false_accepts}, {elapsed:.2f}s (<10s)")


def _run(name):
    return run_scenario(ScenarioConfig.load(bundled(name)))


def test_c05_happy_path():
    report, world = _run("s1_happy_path")
    report2, world2 = _run("s1_happy_path")
    src = list(world.ledgers["BC1"].assets.values())
    dst = list(world.ledgers["BC2"].assets.values())
    state_ok = (
        len(src) == 1 and len(dst) == 1
        and src[0].state is AssetState.INVALIDATED
        and src[0].remote_chain == "BC2"
        and src[0].remote_public_id == dst[0].public_id
        and world.ledgers["BC1"].query_asset(src[0].local_public_id).status == "Redirect"
        and dst[0].state is AssetState.ACTIVE
        and dst[0].owner == world.users["U2"]
    )
    (reg_tick, _, session), = world.register_log
    trusted = sorted(t for (n, s), t in world.trust_log.items() if s == session)
    gate_ok = len(trusted) == 2 and trusted[-1] <= reg_tick and report.verdicts["trust_gate"]["pass"]
    replay_ok = world.log.digest() == world2.log.digest() and report.digest() == report2.digest()
    record(5, "scenario S1 happy path", state_ok and gate_ok and replay_ok and report.passed,
           f"final state ok={state_ok}, trust before Register ok={gate_ok}, replay identical={replay_ok}")


def test_c06_noncompliant_peer():
    report, world = _run("s2_noncompliant_peer")
    registers = world.register_log + [
        tx for b in world.ledgers["BC2"].blocks for _, tx, _ in b.txs if isinstance(tx, Register)
    ]
    rejected = any("noncompliant: svn regression component gw-firmware" in l for l in world.log.kinds("note"))
    source_trusted = any(node == "G1" for node, _ in world.trust_log)
    record(6, "scenario S2 noncompliant peer", rejected and not registers and not source_trusted,
           f"trust rejected={rejected}, source trusted peer={source_trusted}, "
           f"Register submissions in BC2={len(registers)}")


def test_c07_message_loss():
    report, world = _run("s3_message_loss")
    (state,) = world.nodes["G1"].sessions.values()
    abort_lines = [l for l in world.log.kinds("note") if "deadline reached; aborting" in l]
    src = list(world.ledgers["BC1"].assets.values())
    ok = (
        state.phase is Phase.ABORTED
        and len(abort_lines) == 1
        and int(abort_lines[0].split("\t")[0]) == state.deadline
        and len(src) == 1 and src[0].state is AssetState.ACTIVE
        and not world.ledgers["BC2"].assets
        and report.verdicts["no_loss"]["pass"]
    )
    record(7, "scenario S3 message loss", ok,
           f"source {state.phase.value} at tick {state.deadline}, BC1 {src[0].state.value}, BC2 empty")


def test_c08_fault_sweep():
    cfg = ScenarioConfig.load(bundled("s1_happy_path"))
    bi = max(c["block_interval"] for c in cfg.chains)
    start = time.perf_counter()
    rows = fault_sweep(cfg, 500, seed=808, max_drop=0.3)
    elapsed = time.perf_counter() - start
    bounds_ok = all(
        1 <= l["delay_min"] <= l["delay_max"] <= 3 * bi and 0.0 <= l["drop_probability"] <= 0.3
        for r in rows for l in r["links"]
    )
    seeds_distinct = len({r["seed"] for r in rows}) == 500
    exclusivity_failures = sum(not r["exclusivity"] for r in rows)
    hazards = sum(r["hazards"] for r in rows)
    outcomes = {k: sum(r["outcome"] == k for r in rows) for k in ("completed", "aborted", "hazard")}
    record(8, "randomized fault sweep",
           exclusivity_failures == 0 and bounds_ok and seeds_distinct and elapsed < 120.0,
           f"500 runs, exclusivity failures={exclusivity_failures}, hazards flagged={hazards}, "
           f"outcomes={outcomes}, {elapsed:.1f}s (<120s)")


ABSENT, HONEST, FORGED, DUPLICATE = range(4)


def _brute_force_quorum(states, m):
    genuine = [i for i, s in enumerate(states) if s in (HONEST, DUPLICATE)]
    best = 0
    for size in range(len(states) + 1):
        for subset in itertools.combinations(range(len(states)), size):
            if all(i in genuine for i in subset):
                best = max(best, size)
    return best >= m


def test_c09_quorum_exhaustive():
    payload = b"quorum payload"
    keys = [crypto.keypair_from_seed(bytes([i + 1]) * 32) for i in range(5)]
    outsider = crypto.keypair_from_seed(b"\xee" * 32)
    honest = [(k.public_key, k.sign(payload)) for k in keys]
    forged = [(k.public_key, outsider.sign(payload)) for k in keys]
    stranger = (outsider.public_key, outsider.sign(payload))
    cases = mismatches = 0
    for n in range(1, 6):
        authorized = [k.public_key for k in keys[:n]]
        for states in itertools.product(range(4), repeat=n):
            for with_outsider in (False, True):
                bundle = []
                for i, s in enumerate(states):
                    if s == HONEST:
                        bundle.append(honest[i])
                    elif s == FORGED:
                        bundle.append(forged[i])
                    elif s == DUPLICATE:
                        bundle += [honest[i], honest[i]]
                if with_outsider:
                    bundle.append(stranger)
                for m in range(0, n + 1):
                    cases += 1
                    if verify_quorum(payload, bundle, authorized, m) != _brute_force_quorum(states, m):
                        mismatches += 1
    record(9, "quorum exhaustive check", mismatches == 0, f"n<=5, {cases} cases, mismatches={mismatches}")


def test_c10_register_semantics():
    rng = random.Random(1010)
    digests = [rng.randbytes(32) for _ in range(3)]
    snapshots = set()
    for order in itertools.permutations(digests):
        regs = Registers()
        for d in order:
            regs = regs.extend(7, d)
        snapshots.add(regs.slots)
    rejected = 0
    for op in (lambda: Registers()[32], lambda: Registers().extend(32, digests[0])):
        try:
            op()
        except IndexError:
            rejected += 1
    record(10, "register extend semantics", len(snapshots) == 6 and rejected == 2,
           f"6 permutations -> {len(snapshots)} distinct snapshots, index 32 rejected={rejected == 2}")
