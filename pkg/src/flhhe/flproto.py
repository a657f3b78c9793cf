"""Three-entity round protocol over an in-process simulated network.

A message is "sent" by serializing it to bytes, counting those bytes in
the ledger, and handing the buffer to the peer, which parses it; no
sockets, full determinism.  Three modes share one round loop:

* plain: clients upload float32 weight vectors, the server averages in
  float64 and broadcasts the mean (float64 payload, full precision).
* he: clients quantize, pack lanes, and upload 16 fresh ciphertexts;
  the server sums them lane-wise and returns the encrypted sum.
* hhe: clients quantize and mask with the stream cipher; the server
  evaluates keystreams offline, transciphers online, sums, and returns
  the encrypted sum.

In he/hhe the server returns the SUM; clients divide by K*delta at
dequantization, which makes both modes decrypt to bit-identical
integers.  Local training is mode-independent by construction: every
(client, round) pair derives the same RNG stream in all modes, so
accuracy differences between modes come from quantization alone.

Trust boundaries: every client holds the shared HE secret key and its
own symmetric key; the server holds only public material, encrypted
keys, nonces, and byte counts.  The server object's reachable state is
what the threat-model test walks.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import lhe, quantizer, shallowstream as stream, tinymlp, transcipher
from .errors import NonceReuseError, ParameterError
from .ring import RingParams

MODES = ("plain", "he", "hhe")

TEST_SUBSETS = {
    "all": None,
    "labels_137": frozenset({1, 3, 7}),
    "labels_258": frozenset({2, 5, 8}),
    "labels_469": frozenset({4, 6, 9}),
}

PAPER_EXCLUSIONS = (frozenset({1, 3, 7}), frozenset({2, 5, 8}), frozenset({4, 6, 9}))

SETUP_ROUND = -1

# seed-derivation domains
_SEED_DEALER = 0
_SEED_TRAIN = 1
_SEED_ENCRYPT = 2
_SEED_INIT_MODEL = 3


# ---------------------------------------------------------------------------
# Ledger


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    mode: str
    entity: str
    direction: str  # send | recv | compute
    kind: str
    bytes: int
    millis: float


class CommLedger:
    """Append-only byte and timing account; bytes are exact file sizes."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def record(self, round_: int, mode: str, entity: str, direction: str,
               kind: str, nbytes: int, millis: float = 0.0):
        self.entries.append(LedgerEntry(round_, mode, entity, direction, kind, int(nbytes), millis))

    def extend(self, entries):
        self.entries.extend(entries)

    def total_bytes(self, mode=None, entity=None, direction=None, kind=None, round_=None) -> int:
        out = 0
        for e in self.entries:
            if mode is not None and e.mode != mode:
                continue
            if entity is not None and e.entity != entity:
                continue
            if direction is not None and e.direction != direction:
                continue
            if kind is not None and e.kind != kind:
                continue
            if round_ is not None and e.round != round_:
                continue
            out += e.bytes
        return out

    def csv_rows(self):
        yield "round,mode,entity,msg_kind,bytes,millis"
        for e in self.entries:
            yield f"{e.round},{e.mode},{e.entity},{e.kind},{e.bytes},{e.millis:.3f}"

    def deterministic_rows(self):
        """Ledger projection without wall-clock timings (for run-to-run equality)."""
        return [
            (e.round, e.mode, e.entity, e.direction, e.kind, e.bytes) for e in self.entries
        ]


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, (time.perf_counter() - t0) * 1000.0


# ---------------------------------------------------------------------------
# Roles


@dataclass(eq=False)
class Client:
    """Per-client secrets and data; models are passed through the driver."""

    index: int
    params: RingParams
    sk: lhe.SecretKey
    pk: lhe.PublicKey
    sym_key: stream.SymKey
    partition: tinymlp.DataPartition | None = None


class Server:
    """Aggregation server: public material and encrypted symmetric keys only."""

    def __init__(self, params: RingParams, pk: lhe.PublicKey, rlk: lhe.RelinKey,
                 enc_sym_keys: dict):
        self.params = params
        self.pk = pk
        self.rlk = rlk
        self.enc_sym_keys = enc_sym_keys
        self.seen_nonces: set = set()

    def offline_keystream(self, client_id: int, nonce: bytes) -> transcipher.EvalKeystream:
        """Evaluate a client's keystream; rejects (client, nonce) reuse."""
        tag = (client_id, bytes(nonce))
        if tag in self.seen_nonces:
            raise NonceReuseError(f"client {client_id} reused nonce {nonce.hex()}")
        self.seen_nonces.add(tag)
        return transcipher.eval_keystream(self.rlk, self.enc_sym_keys[client_id], nonce, self.params)

    def transcipher_online(self, upload: bytes, evk: transcipher.EvalKeystream):
        sym_ct = stream.sym_ciphertext_from_bytes(upload)
        return transcipher.decomp(sym_ct, evk, self.params)

    def aggregate_lanes(self, per_client_lanes) -> bytes:
        summed = transcipher.hhe_eval_sum(per_client_lanes, self.params)
        return transcipher.lane_bundle_to_bytes(summed, self.params)

    def he_parse_upload(self, upload: bytes):
        return transcipher.lane_bundle_from_bytes(upload, self.params)

    def aggregate_plain(self, uploads: list) -> bytes:
        vecs = [tinymlp.vector_from_bytes(u).astype(np.float64) for u in uploads]
        mean = np.mean(np.stack(vecs), axis=0)
        return tinymlp.vector_to_bytes(mean, dtype=np.float64)


def nonce_for(seed: int, client_id: int, round_: int) -> bytes:
    material = f"flhhe/nonce/v1|{seed}|{client_id}|{round_}".encode()
    return hashlib.sha256(material).digest()[:16]


def _rng(seed: int, domain: int, *rest: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, domain, *rest])))


# ---------------------------------------------------------------------------
# Dealer


def dealer_setup(params: RingParams, k_clients: int, seed: int,
                 ledger: CommLedger | None = None):
    """Generate and distribute all keys; returns (clients, server).

    Key-distribution traffic is ledgered once under the setup round.
    The dealer's transient copies go out of scope here; afterwards the
    server never holds a secret key or a symmetric key.
    """
    if k_clients < 1 or k_clients > params.k_max:
        raise ParameterError(f"client count must be in 1..{params.k_max}")
    rng = _rng(seed, _SEED_DEALER)
    sk, pk, rlk = lhe.keygen(params, rng)
    sym_keys = [stream.gen_sym_key(params.t, rng) for _ in range(k_clients)]
    if len({sk2.lanes for sk2 in sym_keys}) != k_clients:
        raise ParameterError("symmetric key collision; reseed the dealer")
    enc_keys = {i: transcipher.encrypt_sym_key(pk, sym_keys[i], rng) for i in range(k_clients)}

    clients = [Client(i, params, sk, pk, sym_keys[i]) for i in range(k_clients)]
    server = Server(params, pk, rlk, enc_keys)

    if ledger is not None:
        pk_b = len(lhe.public_key_to_bytes(pk, params))
        sk_b = len(lhe.secret_key_to_bytes(sk, params))
        rlk_b = len(lhe.relin_key_to_bytes(rlk, params))
        for i in range(k_clients):
            ledger.record(SETUP_ROUND, "setup", "dealer", "send", "setup_pk", pk_b)
            ledger.record(SETUP_ROUND, "setup", "dealer", "send", "setup_sk", sk_b)
            ledger.record(SETUP_ROUND, "setup", "dealer", "send", "setup_sym_key",
                          len(stream.sym_key_to_bytes(sym_keys[i])))
            ledger.record(SETUP_ROUND, "setup", f"client:{i}", "recv", "setup_keys",
                          pk_b + sk_b + len(stream.sym_key_to_bytes(sym_keys[i])))
        ek_b = {i: len(transcipher.enc_sym_key_to_bytes(enc_keys[i], params)) for i in enc_keys}
        ledger.record(SETUP_ROUND, "setup", "dealer", "send", "setup_pk", pk_b)
        ledger.record(SETUP_ROUND, "setup", "dealer", "send", "setup_rlk", rlk_b)
        for i in range(k_clients):
            ledger.record(SETUP_ROUND, "setup", "dealer", "send", "setup_enc_sym_key", ek_b[i])
        ledger.record(SETUP_ROUND, "setup", "server", "recv", "setup_keys",
                      pk_b + rlk_b + sum(ek_b.values()))
    return clients, server


# ---------------------------------------------------------------------------
# One round of one mode


@dataclass
class RoundResult:
    round_index: int
    models: dict = field(default_factory=dict)       # mode -> ModelWeights
    accuracies: dict = field(default_factory=dict)   # mode -> {subset: acc}
    ledger_slice: list = field(default_factory=list)  # this round's entries


def _client_train(client: Client, model: tinymlp.ModelWeights, seed: int, round_: int,
                  epochs: int, lr: float, batch: int):
    rng = _rng(seed, _SEED_TRAIN, client.index, round_)
    trained, millis = _timed(tinymlp.train_epochs, model, client.partition, lr, batch, epochs, rng)
    flat32 = trained.flatten().astype(np.float32)
    return flat32, millis


def run_round(clients: list, server: Server, model: tinymlp.ModelWeights, mode: str,
              round_: int, *, seed: int, epochs: int, lr: float, batch: int,
              ledger: CommLedger, parallel: bool = False) -> tinymlp.ModelWeights:
    """Advance one mode by one round; returns the new global model.

    Phase order mirrors the offline/online split: in hhe mode the server
    evaluates keystreams from announced nonces before any model exists.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    params = server.params
    k = len(clients)

    def phase(fn, items):
        # parallel fan-out needs a reentrant numba threading layer (omp/tbb)
        if parallel:
            with ThreadPoolExecutor(max_workers=min(8, len(items))) as pool:
                return list(pool.map(fn, items))
        return [fn(it) for it in items]

    evks = {}
    if mode == "hhe":
        # offline: nonce announcements, then keystream evaluation server-side
        announcements = []
        for c in clients:
            nonce = nonce_for(seed, c.index, round_)
            manifest = json.dumps(
                {"client": c.index, "round": round_, "nonce": nonce.hex(),
                 "lanes": stream.M_LANES, "count": tinymlp.FLAT_LEN}
            ).encode()
            announcements.append((c.index, nonce, manifest))
        for cid, nonce, manifest in announcements:
            ledger.record(round_, mode, f"client:{cid}", "send", "nonce_announce", len(manifest))
            ledger.record(round_, mode, "server", "recv", "nonce_announce", len(manifest))

        def offline(item):
            cid, nonce, _ = item
            return _timed(server.offline_keystream, cid, nonce)

        for (cid, nonce, _), (evk, millis) in zip(announcements, phase(offline, announcements)):
            evks[cid] = evk
            ledger.record(round_, mode, "server", "compute", "transcipher_offline", 0, millis)

    # local training (mode-independent RNG streams)
    train_out = phase(
        lambda c: _client_train(c, model, seed, round_, epochs, lr, batch), clients
    )
    for c, (_, millis) in zip(clients, train_out):
        ledger.record(round_, mode, f"client:{c.index}", "compute", "local_training", 0, millis)
    flats32 = [flat for flat, _ in train_out]

    if mode == "plain":
        uploads = [tinymlp.vector_to_bytes(f, dtype=np.float32) for f in flats32]
        for c, u in zip(clients, uploads):
            ledger.record(round_, mode, f"client:{c.index}", "send", "plain_upload", len(u))
            ledger.record(round_, mode, "server", "recv", "plain_upload", len(u))
        down, millis = _timed(server.aggregate_plain, uploads)
        ledger.record(round_, mode, "server", "compute", "aggregation", 0, millis)
        for c in clients:
            ledger.record(round_, mode, "server", "send", "plain_download", len(down))
            ledger.record(round_, mode, f"client:{c.index}", "recv", "plain_download", len(down))
        return tinymlp.ModelWeights.unflatten(tinymlp.vector_from_bytes(down))

    if mode == "he":
        def he_encrypt(item):
            c, flat32 = item
            erng = _rng(seed, _SEED_ENCRYPT, c.index, round_)
            t0 = time.perf_counter()
            quant = quantizer.quantize(flat32.astype(np.float64), params)
            lanes = transcipher.pack_lanes(quant.values, params)
            cts = [lhe.encrypt(c.pk, lanes[i], erng) for i in range(stream.M_LANES)]
            blob = transcipher.lane_bundle_to_bytes(cts, params)
            return blob, (time.perf_counter() - t0) * 1000.0

        uploads = phase(he_encrypt, list(zip(clients, flats32)))
        for c, (blob, millis) in zip(clients, uploads):
            ledger.record(round_, mode, f"client:{c.index}", "compute", "he_encrypt", 0, millis)
            ledger.record(round_, mode, f"client:{c.index}", "send", "he_upload", len(blob))
            ledger.record(round_, mode, "server", "recv", "he_upload", len(blob))
        parsed = [server.he_parse_upload(blob) for blob, _ in uploads]
        down, millis = _timed(server.aggregate_lanes, parsed)
        ledger.record(round_, mode, "server", "compute", "aggregation", 0, millis)
    else:  # hhe
        def hhe_encrypt(item):
            c, flat32 = item
            nonce = nonce_for(seed, c.index, round_)
            t0 = time.perf_counter()
            quant = quantizer.quantize(flat32.astype(np.float64), params)
            n_blocks = (quant.count + stream.M_LANES - 1) // stream.M_LANES
            z = stream.keystream_blocks(c.sym_key, nonce, n_blocks, params.t)
            t1 = time.perf_counter()
            sym_ct = stream.apply_keystream(z, quant.values, params)
            blob = stream.sym_ciphertext_to_bytes(sym_ct)
            t2 = time.perf_counter()
            return blob, (t1 - t0) * 1000.0, (t2 - t1) * 1000.0

        uploads = phase(hhe_encrypt, list(zip(clients, flats32)))
        for c, (blob, ks_ms, enc_ms) in zip(clients, uploads):
            ledger.record(round_, mode, f"client:{c.index}", "compute", "keystream_offline", 0, ks_ms)
            ledger.record(round_, mode, f"client:{c.index}", "compute", "sym_encrypt_online", 0, enc_ms)
            ledger.record(round_, mode, f"client:{c.index}", "send", "sym_upload", len(blob))
            ledger.record(round_, mode, "server", "recv", "sym_upload", len(blob))

        def online(item):
            c, blob = item
            return _timed(server.transcipher_online, blob, evks[c.index])

        online_out = phase(online, [(c, blob) for c, (blob, _, _) in zip(clients, uploads)])
        lanes = []
        for c, (lane_cts, millis) in zip(clients, online_out):
            ledger.record(round_, mode, "server", "compute", "transcipher_online", 0, millis)
            lanes.append(lane_cts)
        down, millis = _timed(server.aggregate_lanes, lanes)
        ledger.record(round_, mode, "server", "compute", "aggregation", 0, millis)

    # encrypted sum comes back; every client decrypts and dequantizes
    for c in clients:
        ledger.record(round_, mode, "server", "send", "agg_download", len(down))
        ledger.record(round_, mode, f"client:{c.index}", "recv", "agg_download", len(down))

    def client_decrypt(c):
        t0 = time.perf_counter()
        bundle = transcipher.lane_bundle_from_bytes(down, params)
        lane_slots = np.stack([lhe.decrypt(c.sk, ct) for ct in bundle])
        summed = transcipher.unpack_lanes(lane_slots, tinymlp.FLAT_LEN)
        flat = quantizer.dequantize_sum(summed, k, params)
        return tinymlp.ModelWeights.unflatten(flat), (time.perf_counter() - t0) * 1000.0

    decrypted = phase(client_decrypt, clients)
    for c, (_, millis) in zip(clients, decrypted):
        ledger.record(round_, mode, f"client:{c.index}", "compute", "decrypt_model", 0, millis)
    models = [m.flatten() for m, _ in decrypted]
    for other in models[1:]:
        if not np.array_equal(models[0], other):
            raise ParameterError("clients decrypted different global models")
    return decrypted[0][0]


# ---------------------------------------------------------------------------
# Experiment driver


def make_partitions(train: tinymlp.DataSplit, k: int) -> list:
    """K=3 uses the canonical label exclusions; otherwise round-robin."""
    if k == 3:
        return [tinymlp.partition_exclude(train, ex) for ex in PAPER_EXCLUSIONS]
    if k == 1:
        return [tinymlp.partition_exclude(train, set())]
    idx = np.arange(len(train.images))
    return [
        tinymlp.DataPartition(train.images[idx % k == j], train.labels[idx % k == j], frozenset())
        for j in range(k)
    ]


def evaluate_subsets(model: tinymlp.ModelWeights, test: tinymlp.DataSplit) -> dict:
    return {
        name: tinymlp.evaluate(model, test, labels)
        for name, labels in TEST_SUBSETS.items()
    }


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    rounds: list            # list[RoundResult]
    ledger: CommLedger
    final_models: dict      # mode -> ModelWeights

    def summary(self) -> dict:
        per_round = [
            {"round": r.round_index, "accuracies": r.accuracies} for r in self.rounds
        ]
        comm = {}
        n_rounds = len(self.rounds)
        modes = list(self.final_models)
        k = self.config["clients"]
        for mode in modes:
            sent = sum(
                e.bytes for e in self.ledger.entries
                if e.mode == mode and e.direction == "send" and e.entity.startswith("client:")
            )
            recv = sum(
                e.bytes for e in self.ledger.entries
                if e.mode == mode and e.direction == "recv" and e.entity.startswith("client:")
            )
            per_client_round = {
                "send_bytes": sent // (k * n_rounds) if n_rounds else 0,
                "recv_bytes": recv // (k * n_rounds) if n_rounds else 0,
            }
            per_client_round["total_bytes"] = (
                per_client_round["send_bytes"] + per_client_round["recv_bytes"]
            )
            comm[mode] = {
                "per_client_per_round": per_client_round,
                "total_client_bytes": sent + recv,
            }
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "rounds": per_round,
            "communication": comm,
        }


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def run_experiment(params: RingParams, *, modes, clients: int, rounds: int,
                   epochs: int, lr: float, batch: int, seed: int,
                   train: tinymlp.DataSplit, test: tinymlp.DataSplit,
                   parallel: bool = False, evaluate: bool = True) -> ExperimentReport:
    """Run the full multi-round comparison across the requested modes."""
    for m in modes:
        if m not in MODES:
            raise ParameterError(f"unknown mode {m!r}")
    if rounds < 1:
        raise ParameterError("rounds must be >= 1")

    cfg = {
        "modes": list(modes), "clients": clients, "rounds": rounds, "epochs": epochs,
        "lr": lr, "batch": batch, "delta": params.delta, "seed": seed,
        "n": params.n, "q_bits": params.q.bit_length(), "t": params.t,
    }
    ledger = CommLedger()
    client_objs, server = dealer_setup(params, clients, seed, ledger)
    partitions = make_partitions(train, clients)
    for c, p in zip(client_objs, partitions):
        c.partition = p

    init_model = tinymlp.init_weights(_rng(seed, _SEED_INIT_MODEL))
    init_bytes = tinymlp.vector_to_bytes(init_model.flatten(), dtype=np.float64)
    for c in client_objs:
        ledger.record(SETUP_ROUND, "setup", "server", "send", "init_model", len(init_bytes))
        ledger.record(SETUP_ROUND, "setup", f"client:{c.index}", "recv", "init_model", len(init_bytes))

    current = {mode: init_model.copy() for mode in modes}
    results = []
    for r in range(rounds):
        rr = RoundResult(r)
        for mode in modes:
            new_model = run_round(
                client_objs, server, current[mode], mode, r,
                seed=seed, epochs=epochs, lr=lr, batch=batch,
                ledger=ledger, parallel=parallel,
            )
            current[mode] = new_model
            rr.models[mode] = new_model
            if evaluate:
                acc, millis = _timed(evaluate_subsets, new_model, test)
                rr.accuracies[mode] = acc
                ledger.record(r, mode, "server", "compute", "evaluate", 0, millis)
        rr.ledger_slice = [e for e in ledger.entries if e.round == r]
        results.append(rr)

    return ExperimentReport(cfg, config_hash(cfg), results, ledger, dict(current))
