"""Command-line entry point: keygen, run, bench, report.

Exit codes: 0 ok, 2 configuration error, 3 cryptographic failure, 4 I/O
problem.  A JSON config file can supply any flag that was not given on
the command line.  Report and ledger file names embed the config hash
so mixed-up inputs are caught instead of silently combined.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flproto, lhe, quantizer, shallowstream as stream, tinymlp, transcipher
from .errors import ConfigError, CryptoError, FlhheError
from .ring import PRESETS, RingParams, preset

DEFAULTS = {
    "mode": "plain,he,hhe",
    "clients": 3,
    "rounds": 10,
    "epochs": 1,
    "lr": 0.1,
    "batch": 64,
    "delta": 1024,
    "seed": 1234,
    "data_dir": "data/mnist",
    "out": "runs",
    "preset": "default",
}


@dataclass
class RunConfig:
    """Validated run settings; flags > config file > defaults."""

    modes: tuple
    clients: int
    rounds: int
    epochs: int
    lr: float
    batch: int
    delta: int
    seed: int
    data_dir: str
    out: str
    preset: str

    def params(self) -> RingParams:
        base = PRESETS[self.preset]
        k_max = (base["t"] // 2 - 1) // self.delta
        return preset(self.preset, delta=self.delta, k_max=k_max)

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        for m in self.modes:
            if m not in flproto.MODES:
                raise ConfigError(f"unknown mode {m!r}; choose from {flproto.MODES}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        params = self.params()
        if not (1 <= self.clients <= params.k_max):
            raise ConfigError(
                f"clients must be in 1..{params.k_max} for delta={self.delta}"
            )
        return self


def _build_config(args) -> RunConfig:
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc

    def pick(name):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        if name in file_cfg:
            return file_cfg[name]
        return DEFAULTS[name]

    cfg = RunConfig(
        modes=tuple(m.strip() for m in str(pick("mode")).split(",") if m.strip()),
        clients=int(pick("clients")),
        rounds=int(pick("rounds")),
        epochs=int(pick("epochs")),
        lr=float(pick("lr")),
        batch=int(pick("batch")),
        delta=int(pick("delta")),
        seed=int(pick("seed")),
        data_dir=str(pick("data_dir")),
        out=str(pick("out")),
        preset=str(pick("preset")),
    )
    return cfg.validate()


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--mode", help="comma-separated subset of plain,he,hhe")
    p.add_argument("--clients", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--delta", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON file supplying flags not given explicitly")
    p.add_argument("--json", action="store_true", help="machine-readable output")


def _print_table(rows, headers):
    widths = [max(len(str(r[i])) for r in rows + [headers]) for i in range(len(headers))]
    line = "  ".join(str(h).ljust(w) for h, w in zip(headers, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


# ---------------------------------------------------------------------------
# keygen


def cmd_keygen(args) -> int:
    cfg = _build_config(args)
    params = cfg.params()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    clients, server = flproto.dealer_setup(params, cfg.clients, cfg.seed)

    files = {}
    files["pk.bin"] = lhe.public_key_to_bytes(clients[0].pk, params)
    files["sk.bin"] = lhe.secret_key_to_bytes(clients[0].sk, params)
    files["rlk.bin"] = lhe.relin_key_to_bytes(server.rlk, params)
    for c in clients:
        files[f"sym_key_{c.index}.bin"] = stream.sym_key_to_bytes(c.sym_key)
        files[f"enc_sym_key_{c.index}.bin"] = transcipher.enc_sym_key_to_bytes(
            server.enc_sym_keys[c.index], params
        )
    for name, blob in files.items():
        (out / name).write_bytes(blob)

    sizes = {name: len(blob) for name, blob in files.items()}
    if args.json:
        print(json.dumps({"out": str(out), "sizes": sizes, "total": sum(sizes.values())}))
    else:
        rows = [(name, f"{size:,}") for name, size in sizes.items()]
        rows.append(("TOTAL", f"{sum(sizes.values()):,}"))
        _print_table(rows, ("key file", "bytes"))
    return 0


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    cfg = _build_config(args)
    params = cfg.params()
    train, test = tinymlp.load_mnist(cfg.data_dir)
    report = flproto.run_experiment(
        params, modes=cfg.modes, clients=cfg.clients, rounds=cfg.rounds,
        epochs=cfg.epochs, lr=cfg.lr, batch=cfg.batch, seed=cfg.seed,
        train=train, test=test,
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tag = report.config_hash
    ledger_path = out / f"ledger_{tag}.csv"
    summary_path = out / f"summary_{tag}.json"
    ledger_path.write_text("\n".join(report.ledger.csv_rows()) + "\n")
    summary_path.write_text(json.dumps(report.summary(), indent=2) + "\n")

    # plaintext model export in both persistence formats
    if "plain" in report.final_models:
        flat = report.final_models["plain"].flatten()
        (out / f"model_plain_{tag}.bin").write_bytes(tinymlp.vector_to_bytes(flat, np.float64))
        (out / f"model_plain_{tag}.json").write_text(
            tinymlp.model_to_json(report.final_models["plain"])
        )

    if args.json:
        print(json.dumps(report.summary()))
    else:
        print(f"ledger:  {ledger_path}")
        print(f"summary: {summary_path}")
        last = report.rounds[-1]
        rows = [
            (mode, *(f"{last.accuracies[mode][s]*100:.2f}%" for s in flproto.TEST_SUBSETS))
            for mode in cfg.modes
        ]
        _print_table(rows, ("mode", *flproto.TEST_SUBSETS))
    return 0


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> int:
    cfg = _build_config(args)
    params = cfg.params()
    rng = np.random.default_rng(cfg.seed)

    rows = []

    def timeit(role, task, fn, repeat=1):
        t0 = time.perf_counter()
        out = None
        for _ in range(repeat):
            out = fn()
        dt = (time.perf_counter() - t0) / repeat
        rows.append((role, task, f"{dt:.4f}"))
        return out

    sk, pk, rlk = timeit("key dealer", "key generation (once)", lambda: lhe.keygen(params, rng))
    blobs = (
        lhe.secret_key_to_bytes(sk, params),
        lhe.public_key_to_bytes(pk, params),
        lhe.relin_key_to_bytes(rlk, params),
    )

    def load_keys():
        return (
            lhe.secret_key_from_bytes(blobs[0], params),
            lhe.public_key_from_bytes(blobs[1], params),
            lhe.relin_key_from_bytes(blobs[2], params),
        )

    timeit("key dealer", "load keys", load_keys)
    sym_key = stream.gen_sym_key(params.t, rng)
    enc_key = timeit("key dealer", "symmetric key encryption",
                     lambda: transcipher.encrypt_sym_key(pk, sym_key, rng))

    # synthetic partition keeps bench self-contained
    images = rng.random((2048, tinymlp.INPUT_DIM)) * 0.5
    labels = rng.integers(0, 10, 2048).astype(np.int64)
    part = tinymlp.DataSplit(images, labels)
    model = tinymlp.init_weights(rng)

    count = tinymlp.FLAT_LEN
    if count > stream.max_message_len(params):
        raise ConfigError(
            f"preset {cfg.preset!r} has too few slots for the {count}-weight model; "
            "use --preset default for pipeline benchmarks"
        )

    trained = timeit("client", "local training",
                     lambda: tinymlp.train_epochs(model, part, cfg.lr, cfg.batch, 1, rng))
    quant = quantizer.quantize(trained.flatten().astype(np.float32).astype(np.float64), params)
    nonce = flproto.nonce_for(cfg.seed, 0, 0)
    n_blocks = (count + stream.M_LANES - 1) // stream.M_LANES
    z = timeit("client", "keystream generation (offline)",
               lambda: stream.keystream_blocks(sym_key, nonce, n_blocks, params.t))
    sym_ct = timeit("client", "symmetric encryption (online)",
                    lambda: stream.apply_keystream(z, quant.values, params))

    evk = timeit("server (per client)", "evaluate keystream (offline)",
                 lambda: transcipher.eval_keystream(rlk, enc_key, nonce, params))
    lanes = timeit("server (per client)", "transcipher model (online)",
                   lambda: transcipher.decomp(sym_ct, evk, params))
    ct_sum = timeit("server (per client)", "he aggregation (online)",
                    lambda: transcipher.hhe_eval_sum([lanes, lanes, lanes], params))
    timeit("client", "decrypt global model",
           lambda: [lhe.decrypt(sk, ct) for ct in ct_sum])

    if args.json:
        print(json.dumps([{"role": r, "task": t, "seconds": float(s)} for r, t, s in rows]))
    else:
        _print_table(rows, ("role", "task", "seconds"))
    return 0


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    if not args.summaries:
        raise ConfigError("report needs at least one summary JSON file")
    summaries = []
    for path in args.summaries:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        recomputed = flproto.config_hash(doc["config"])
        if recomputed != doc["config_hash"]:
            raise ConfigError(
                f"{path}: config hash mismatch (file says {doc['config_hash']}, "
                f"recomputed {recomputed})"
            )
        summaries.append((path, doc))

    scaling_rows = ["clients,mode,rounds,total_bytes"]
    for path, doc in summaries:
        k = doc["config"]["clients"]
        rounds = doc["config"]["rounds"]
        print(f"== {path} (clients={k}, rounds={rounds}, seed={doc['config']['seed']})")
        rows = []
        for mode, comm in doc["communication"].items():
            pcr = comm["per_client_per_round"]
            rows.append(
                (mode, f"{pcr['send_bytes']:,}", f"{pcr['recv_bytes']:,}", f"{pcr['total_bytes']:,}")
            )
            scaling_rows.append(f"{k},{mode},{rounds},{pcr['total_bytes'] * k * rounds}")
        _print_table(rows, ("mode", "send B", "receive B", "total B (per client per round)"))
        if doc["rounds"] and doc["rounds"][-1]["accuracies"]:
            acc = doc["rounds"][-1]["accuracies"]
            rows = [
                (mode, *(f"{acc[mode][s]*100:.2f}%" for s in flproto.TEST_SUBSETS))
                for mode in acc
            ]
            _print_table(rows, ("mode", *flproto.TEST_SUBSETS))
        print()

    out_dir = Path(args.out or DEFAULTS["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    scaling_path = out_dir / "scaling_series.csv"
    scaling_path.write_text("\n".join(scaling_rows) + "\n")
    print(f"scaling series: {scaling_path}")
    if args.json:
        print(json.dumps({"scaling_csv": str(scaling_path), "runs": [p for p, _ in summaries]}))
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flhhe",
        description="federated learning with symmetric-to-homomorphic transciphering",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_keygen = sub.add_parser("keygen", help="generate and persist all keys with a size report")
    _add_common(p_keygen)
    p_keygen.set_defaults(fn=cmd_keygen)

    p_run = sub.add_parser("run", help="run the multi-round comparison experiment")
    _add_common(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_bench = sub.add_parser("bench", help="time each pipeline stage per role")
    _add_common(p_bench)
    p_bench.set_defaults(fn=cmd_bench)

    p_report = sub.add_parser("report", help="comparison tables + scaling CSV from summaries")
    p_report.add_argument("summaries", nargs="*", help="summary_*.json files from runs")
    p_report.add_argument("--out")
    p_report.add_argument("--json", action="store_true")
    p_report.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CryptoError as exc:
        print(f"crypto failure: {exc}", file=sys.stderr)
        return 3
    except FlhheError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
