import numpy as np
import pytest

from flhhe import flproto, lhe, tinymlp, transcipher
from flhhe.errors import NonceReuseError, ParameterError

from conftest import synthetic_split


class TestDealerSetup:
    def test_distinct_sym_keys(self, params_default):
        clients, _ = flproto.dealer_setup(params_default, 3, seed=1)
        keys = {c.sym_key.lanes for c in clients}
        assert len(keys) == 3

    def test_server_holds_no_secrets(self, params_default):
        _, server = flproto.dealer_setup(params_default, 2, seed=2)
        assert not hasattr(server, "sk")
        assert not hasattr(server, "sym_key")
        assert set(server.enc_sym_keys) == {0, 1}

    def test_enc_sym_key_decrypts_to_client_key(self, params_default):
        clients, server = flproto.dealer_setup(params_default, 2, seed=3)
        for c in clients:
            for i in range(16):
                dec = lhe.decrypt(c.sk, server.enc_sym_keys[c.index].lanes[i])
                assert np.all(dec == c.sym_key.lanes[i])

    def test_deterministic(self, params_default):
        a_clients, _ = flproto.dealer_setup(params_default, 2, seed=4)
        b_clients, _ = flproto.dealer_setup(params_default, 2, seed=4)
        for a, b in zip(a_clients, b_clients):
            assert a.sym_key == b.sym_key
            assert a.sk.s == b.sk.s

    def test_client_count_bounds(self, params_default):
        with pytest.raises(ParameterError):
            flproto.dealer_setup(params_default, 0, seed=5)
        with pytest.raises(ParameterError):
            flproto.dealer_setup(params_default, params_default.k_max + 1, seed=5)

    def test_setup_ledger_totals(self, params_default):
        ledger = flproto.CommLedger()
        flproto.dealer_setup(params_default, 2, seed=6, ledger=ledger)
        sent = ledger.total_bytes(entity="dealer", direction="send")
        received = ledger.total_bytes(direction="recv")
        assert sent == received > 0
        assert all(e.round == flproto.SETUP_ROUND for e in ledger.entries)


class TestNonceHandling:
    def test_reuse_rejected(self, params_default):
        _, server = flproto.dealer_setup(params_default, 1, seed=7)
        nonce = flproto.nonce_for(7, 0, 0)
        server.offline_keystream(0, nonce)
        with pytest.raises(NonceReuseError):
            server.offline_keystream(0, nonce)

    def test_nonces_unique_per_client_round(self):
        seen = set()
        for c in range(5):
            for r in range(5):
                seen.add(flproto.nonce_for(42, c, r))
        assert len(seen) == 25


class TestPartitions:
    def test_three_clients_use_paper_exclusions(self, mnist):
        train, _ = mnist
        parts = flproto.make_partitions(train, 3)
        assert [len(p.images) for p in parts] == [40_862, 42_770, 42_291]
        assert [p.excluded for p in parts] == list(flproto.PAPER_EXCLUSIONS)

    def test_round_robin_covers_everything(self):
        train = synthetic_split(101, seed=0)
        parts = flproto.make_partitions(train, 4)
        assert sum(len(p.images) for p in parts) == 101

    def test_single_client_gets_everything(self):
        train = synthetic_split(50, seed=1)
        parts = flproto.make_partitions(train, 1)
        assert len(parts) == 1 and len(parts[0].images) == 50


@pytest.fixture(scope="module")
def small_run(params_default, synth_data):
    train, test = synth_data
    return flproto.run_experiment(
        params_default, modes=("plain", "he", "hhe"), clients=2, rounds=1,
        epochs=1, lr=0.1, batch=32, seed=77, train=train, test=test,
    )


class TestRounds:

    def test_he_hhe_models_identical(self, small_run):
        r = small_run.rounds[0]
        assert np.array_equal(r.models["he"].flatten(), r.models["hhe"].flatten())

    def test_plain_within_quantization_bound(self, small_run, params_default):
        r = small_run.rounds[0]
        gap = np.abs(r.models["plain"].flatten() - r.models["hhe"].flatten()).max()
        assert gap <= 1 / (2 * params_default.delta)

    def test_upload_byte_ordering(self, small_run):
        L = small_run.ledger
        plain = L.total_bytes(mode="plain", direction="send", kind="plain_upload")
        hhe = L.total_bytes(mode="hhe", direction="send", kind="sym_upload") + L.total_bytes(
            mode="hhe", direction="send", kind="nonce_announce"
        )
        he = L.total_bytes(mode="he", direction="send", kind="he_upload")
        assert plain < hhe
        assert hhe <= he / 8
        total_hhe = L.total_bytes(mode="hhe", entity="client:0", direction="send") + L.total_bytes(
            mode="hhe", entity="client:0", direction="recv"
        )
        total_he = L.total_bytes(mode="he", entity="client:0", direction="send") + L.total_bytes(
            mode="he", entity="client:0", direction="recv"
        )
        assert total_hhe < total_he

    def test_accounting_identity(self, small_run):
        # per-client hhe round total equals the sum of its ledger messages
        L = small_run.ledger
        up = L.total_bytes(mode="hhe", entity="client:0", direction="send")
        down = L.total_bytes(mode="hhe", entity="client:0", direction="recv")
        parts = [
            L.total_bytes(mode="hhe", entity="client:0", direction="send", kind="nonce_announce"),
            L.total_bytes(mode="hhe", entity="client:0", direction="send", kind="sym_upload"),
        ]
        assert up == sum(parts)
        assert down == L.total_bytes(mode="hhe", entity="client:0", direction="recv", kind="agg_download")

    def test_client_recv_matches_server_send(self, small_run):
        L = small_run.ledger
        assert L.total_bytes(mode="hhe", entity="server", direction="send") == sum(
            L.total_bytes(mode="hhe", entity=f"client:{i}", direction="recv") for i in range(2)
        )

    def test_offline_precedes_upload_in_ledger(self, small_run):
        # the server's keystream evaluation is recorded before any sym upload
        entries = [e for e in small_run.ledger.entries if e.mode == "hhe"]
        first_offline = next(i for i, e in enumerate(entries) if e.kind == "transcipher_offline")
        first_upload = next(i for i, e in enumerate(entries) if e.kind == "sym_upload")
        assert first_offline < first_upload

    def test_accuracies_present(self, small_run):
        acc = small_run.rounds[0].accuracies
        for mode in ("plain", "he", "hhe"):
            assert set(acc[mode]) == set(flproto.TEST_SUBSETS)

    def test_round_result_carries_ledger_slice(self, small_run):
        rr = small_run.rounds[0]
        assert rr.ledger_slice and all(e.round == 0 for e in rr.ledger_slice)

    def test_single_client_round_returns_own_model(self, params_default):
        # K=1 aggregation is the identity up to quantization
        train = synthetic_split(80, seed=30)
        test = synthetic_split(40, seed=31)
        rep = flproto.run_experiment(
            params_default, modes=("hhe",), clients=1, rounds=1, epochs=1,
            lr=0.1, batch=32, seed=44, train=train, test=test, evaluate=False,
        )
        part = flproto.make_partitions(train, 1)[0]
        current = tinymlp.init_weights(flproto._rng(44, flproto._SEED_INIT_MODEL))
        local = tinymlp.train_epochs(current, part, 0.1, 32, 1,
                                     flproto._rng(44, flproto._SEED_TRAIN, 0, 0))
        w32 = local.flatten().astype(np.float32).astype(np.float64)
        gap = np.abs(rep.rounds[0].models["hhe"].flatten() - w32).max()
        assert gap <= 1 / (2 * params_default.delta)

    def test_unknown_mode_rejected(self, params_default, synth_data):
        train, test = synth_data
        with pytest.raises(ParameterError):
            flproto.run_experiment(
                params_default, modes=("cleartext",), clients=1, rounds=1, epochs=1,
                lr=0.1, batch=32, seed=1, train=train, test=test,
            )


class TestDeterminismSmall:
    def test_parallel_equals_serial_single_round(self, params_default, synth_data):
        train, test = synth_data
        kwargs = dict(
            modes=("hhe",), clients=2, rounds=1, epochs=1, lr=0.1, batch=32,
            seed=99, train=train, test=test, evaluate=False,
        )
        serial = flproto.run_experiment(params_default, parallel=False, **kwargs)
        threaded = flproto.run_experiment(params_default, parallel=True, **kwargs)
        assert np.array_equal(
            serial.rounds[0].models["hhe"].flatten(), threaded.rounds[0].models["hhe"].flatten()
        )
        assert serial.ledger.deterministic_rows() == threaded.ledger.deterministic_rows()


class TestSummary:
    def test_summary_shape(self, params_default, synth_data):
        train, test = synth_data
        rep = flproto.run_experiment(
            params_default, modes=("plain",), clients=2, rounds=2, epochs=1,
            lr=0.1, batch=32, seed=5, train=train, test=test,
        )
        s = rep.summary()
        assert s["config_hash"] == rep.config_hash
        assert len(s["rounds"]) == 2
        pcr = s["communication"]["plain"]["per_client_per_round"]
        assert pcr["total_bytes"] == pcr["send_bytes"] + pcr["recv_bytes"]
        assert pcr["send_bytes"] == tinymlp.vector_byte_size(tinymlp.FLAT_LEN, np.float32)
        assert pcr["recv_bytes"] == tinymlp.vector_byte_size(tinymlp.FLAT_LEN, np.float64)
