import numpy as np
import pytest

from flhhe import lhe, quantizer, ring, shallowstream as stream, transcipher as tc
from flhhe.errors import OverflowBudgetError, ParameterError


def make_client(params, pk, rng):
    key = stream.gen_sym_key(params.t, rng)
    nonce = bytes(rng.integers(0, 256, 16, dtype=np.uint8))
    return key, nonce, tc.encrypt_sym_key(pk, key, rng)


class TestEncSymKey:
    def test_lanes_decrypt_to_constants(self, params16, keys16):
        sk, pk, _ = keys16
        rng = np.random.default_rng(1)
        key, _, ek = make_client(params16, pk, rng)
        for i in range(stream.M_LANES):
            assert np.all(lhe.decrypt(sk, ek.lanes[i]) == key.lanes[i])

    def test_probabilistic_encryption(self, params16, keys16):
        sk, pk, _ = keys16
        rng = np.random.default_rng(2)
        key = stream.gen_sym_key(params16.t, rng)
        e1 = tc.encrypt_sym_key(pk, key, rng)
        e2 = tc.encrypt_sym_key(pk, key, rng)
        assert e1.lanes[0].c0 != e2.lanes[0].c0  # fresh randomness
        assert np.array_equal(lhe.decrypt(sk, e1.lanes[0]), lhe.decrypt(sk, e2.lanes[0]))

    def test_zero_key(self, params16, keys16):
        sk, pk, _ = keys16
        rng = np.random.default_rng(3)
        ek = tc.encrypt_sym_key(pk, stream.SymKey((0,) * 16), rng)
        for lane in ek.lanes:
            assert np.all(lhe.decrypt(sk, lane) == 0)

    def test_lane_count_checked(self, params16, keys16):
        with pytest.raises(ParameterError):
            tc.EncSymKey((None,) * 3)


class TestEvalKeystream:
    def test_matches_plaintext_oracle(self, params16, keys16):
        sk, pk, rlk = keys16
        rng = np.random.default_rng(4)
        for _ in range(5):
            key, nonce, ek = make_client(params16, pk, rng)
            evk = tc.eval_keystream(rlk, ek, nonce, params16)
            zs = stream.keystream_blocks(key, nonce, params16.n, params16.t)
            for i in range(stream.M_LANES):
                assert np.array_equal(lhe.decrypt(sk, evk.lanes[i]), zs[:, i])

    def test_deterministic(self, params16, keys16):
        _, pk, rlk = keys16
        rng = np.random.default_rng(5)
        key, nonce, ek = make_client(params16, pk, rng)
        a = tc.eval_keystream(rlk, ek, nonce, params16)
        b = tc.eval_keystream(rlk, ek, nonce, params16)
        for la, lb in zip(a.lanes, b.lanes):
            assert la.c0 == lb.c0 and la.c1 == lb.c1

    def test_identity_schedule_isolates_recurrence(self, params16, keys16):
        # with identity affine layers the circuit reduces to three rounds of
        # x <- x + x^2 applied to each key lane (scalar recurrence oracle)
        sk, pk, rlk = keys16
        rng = np.random.default_rng(55)
        key, nonce, ek = make_client(params16, pk, rng)
        n, t = params16.n, params16.t
        eye = np.broadcast_to(np.eye(stream.M_LANES, dtype=np.int64),
                              (stream.N_ROUNDS, n, stream.M_LANES, stream.M_LANES)).copy()
        zeros = np.zeros((stream.N_ROUNDS, n, stream.M_LANES), dtype=np.int64)
        evk = tc.eval_keystream(rlk, ek, nonce, params16, schedule_override=(eye, zeros))
        for i in range(stream.M_LANES):
            x = int(key.lanes[i])
            for _ in range(3):
                x = (x + x * x) % t
            assert np.all(lhe.decrypt(sk, evk.lanes[i]) == x), f"lane {i}"

    def test_message_independent_signature(self, params16, keys16):
        # offline phase takes only (rlk, enc_key, nonce, params): no message
        # can influence it, which the round driver also exercises by ordering
        _, pk, rlk = keys16
        rng = np.random.default_rng(6)
        _, nonce, ek = make_client(params16, pk, rng)
        evk = tc.eval_keystream(rlk, ek, nonce, params16)
        assert len(evk.lanes) == stream.M_LANES


class TestDecomp:
    def test_zero_message_cancels(self, params16, keys16):
        sk, pk, rlk = keys16
        rng = np.random.default_rng(7)
        key, nonce, ek = make_client(params16, pk, rng)
        msg = np.zeros(50, dtype=np.int64)
        sym_ct = stream.sym_encrypt(key, nonce, msg, params16)
        evk = tc.eval_keystream(rlk, ek, nonce, params16)
        lanes = tc.decomp(sym_ct, evk, params16)
        slots = np.stack([lhe.decrypt(sk, ct) for ct in lanes])
        assert np.all(tc.unpack_lanes(slots, 50) == 0)

    def test_random_message_exact(self, params16, keys16):
        sk, pk, rlk = keys16
        rng = np.random.default_rng(8)
        key, nonce, ek = make_client(params16, pk, rng)
        msg = rng.integers(0, params16.t, 100)
        sym_ct = stream.sym_encrypt(key, nonce, msg, params16)
        evk = tc.eval_keystream(rlk, ek, nonce, params16)
        lanes = tc.decomp(sym_ct, evk, params16)
        slots = np.stack([lhe.decrypt(sk, ct) for ct in lanes])
        assert np.array_equal(tc.unpack_lanes(slots, 100), msg)

    def test_additivity(self, params16, keys16):
        sk, pk, rlk = keys16
        rng = np.random.default_rng(9)
        out = []
        msgs = []
        for _ in range(2):
            key, nonce, ek = make_client(params16, pk, rng)
            msg = rng.integers(0, params16.t, 64)
            msgs.append(msg)
            sym_ct = stream.sym_encrypt(key, nonce, msg, params16)
            evk = tc.eval_keystream(rlk, ek, nonce, params16)
            out.append(tc.decomp(sym_ct, evk, params16))
        summed = [lhe.add_ct(a, b) for a, b in zip(out[0], out[1])]
        slots = np.stack([lhe.decrypt(sk, ct) for ct in summed])
        want = (msgs[0] + msgs[1]) % params16.t
        assert np.array_equal(tc.unpack_lanes(slots, 64), want)

    def test_lane_mismatch_structurally_refused(self, params16, keys16):
        _, pk, rlk = keys16
        rng = np.random.default_rng(10)
        key, nonce, ek = make_client(params16, pk, rng)
        sym_ct = stream.sym_encrypt(key, nonce, np.arange(20), params16)
        evk = tc.eval_keystream(rlk, ek, nonce, params16)
        lifted = tc.lift_upload(sym_ct, params16)
        with pytest.raises(ParameterError):
            tc.decomp_lane(lifted[0], evk.lane(1))
        # matching lanes are fine
        tc.decomp_lane(lifted[1], evk.lane(1))


class TestPackUnpack:
    @pytest.mark.parametrize("count", [1, 16, 17, 100, 256])
    def test_roundtrip(self, params16, count):
        rng = np.random.default_rng(count)
        v = rng.integers(0, params16.t, count)
        assert np.array_equal(tc.unpack_lanes(tc.pack_lanes(v, params16), count), v)

    def test_block_major_semantics(self, params16):
        v = np.arange(33)
        lanes = tc.pack_lanes(v, params16)
        # element j sits at (lane j % 16, slot j // 16)
        assert lanes[0, 0] == 0 and lanes[1, 0] == 1 and lanes[0, 1] == 16 and lanes[0, 2] == 32

    def test_too_long_refused(self, params16):
        with pytest.raises(ParameterError):
            tc.pack_lanes(np.zeros(16 * params16.n + 1, dtype=np.int64), params16)


class TestEvalSum:
    def _uploads(self, params, pk, rlk, rng, msgs):
        out = []
        for msg in msgs:
            key, nonce, ek = make_client(params, pk, rng)
            sym_ct = stream.sym_encrypt(key, nonce, msg, params)
            evk = tc.eval_keystream(rlk, ek, nonce, params)
            out.append(tc.decomp(sym_ct, evk, params))
        return out

    def test_single_client_identity(self, params16, keys16):
        sk, pk, rlk = keys16
        rng = np.random.default_rng(11)
        msg = rng.integers(0, params16.t, 80)
        lanes = tc.hhe_eval_sum(self._uploads(params16, pk, rlk, rng, [msg]), params16)
        slots = np.stack([lhe.decrypt(sk, ct) for ct in lanes])
        assert np.array_equal(tc.unpack_lanes(slots, 80), msg)

    def test_three_client_integer_oracle(self, params16, keys16):
        sk, pk, rlk = keys16
        rng = np.random.default_rng(12)
        msgs = [rng.integers(0, params16.t, 120) for _ in range(3)]
        lanes = tc.hhe_eval_sum(self._uploads(params16, pk, rlk, rng, msgs), params16)
        slots = np.stack([lhe.decrypt(sk, ct) for ct in lanes])
        want = (msgs[0].astype(object) + msgs[1] + msgs[2]) % params16.t
        assert np.array_equal(tc.unpack_lanes(slots, 120).astype(object), want)

    def test_budget_boundary_no_wraparound(self, params16, keys16):
        # k_max clients all uploading the constant delta: sum = k_max * delta
        sk, pk, rlk = keys16
        rng = np.random.default_rng(13)
        count = 32
        msgs = [np.full(count, params16.delta, dtype=np.int64)] * params16.k_max
        lanes = tc.hhe_eval_sum(self._uploads(params16, pk, rlk, rng, msgs), params16)
        slots = np.stack([lhe.decrypt(sk, ct) for ct in lanes])
        got = tc.unpack_lanes(slots, count)
        assert np.all(got == params16.k_max * params16.delta)
        assert params16.k_max * params16.delta < params16.t // 2  # stayed below wrap

    def test_over_budget_refused(self, params16, keys16):
        _, pk, rlk = keys16
        rng = np.random.default_rng(14)
        msg = np.zeros(4, dtype=np.int64)
        one = self._uploads(params16, pk, rlk, rng, [msg])[0]
        with pytest.raises(OverflowBudgetError):
            tc.hhe_eval_sum([one] * (params16.k_max + 1), params16)
        with pytest.raises(ParameterError):
            tc.hhe_eval_sum([], params16)

    def test_fold_order_invariance(self, params16, keys16):
        # exact modular addition: sequential fold == balanced tree, bit for bit
        _, pk, rlk = keys16
        rng = np.random.default_rng(15)
        msgs = [rng.integers(0, params16.t, 64) for _ in range(4)]
        ups = self._uploads(params16, pk, rlk, rng, msgs)
        seq = tc.hhe_eval_sum(ups, params16)
        left = tc.hhe_eval_sum(ups[:2], params16)
        right = tc.hhe_eval_sum(ups[2:], params16)
        tree = tc.hhe_eval_sum([left, right], params16)
        for a, b in zip(seq, tree):
            assert a.c0 == b.c0 and a.c1 == b.c1


class TestEndToEnd:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_full_pipeline_identity(self, params16, keys16, k):
        """decrypt(sum of transciphered uploads) == big-integer sum of the
        quantized vectors mod t, exactly."""
        sk, pk, rlk = keys16
        rng = np.random.default_rng(16 + k)
        count = 200
        uploads, quantized = [], []
        for _ in range(k):
            w = rng.uniform(-1, 1, count)
            q = quantizer.quantize(w, params16)
            quantized.append(q.values)
            key, nonce, ek = make_client(params16, pk, rng)
            sym_ct = stream.sym_encrypt(key, nonce, q.values, params16)
            evk = tc.eval_keystream(rlk, ek, nonce, params16)
            uploads.append(tc.decomp(sym_ct, evk, params16))
        lanes = tc.hhe_eval_sum(uploads, params16)
        slots = np.stack([lhe.decrypt(sk, ct) for ct in lanes])
        got = tc.unpack_lanes(slots, count)
        want = np.array([int(sum(int(q[i]) for q in quantized)) % params16.t for i in range(count)])
        assert np.array_equal(got, want)


class TestSerialization:
    def test_enc_sym_key_roundtrip(self, params16, keys16):
        _, pk, _ = keys16
        rng = np.random.default_rng(17)
        _, _, ek = make_client(params16, pk, rng)
        blob = tc.enc_sym_key_to_bytes(ek, params16)
        back = tc.enc_sym_key_from_bytes(blob, params16)
        assert tc.enc_sym_key_to_bytes(back, params16) == blob

    def test_lane_bundle_roundtrip(self, params16, keys16):
        _, pk, _ = keys16
        rng = np.random.default_rng(18)
        cts = [lhe.encrypt(pk, np.zeros(params16.n, dtype=np.int64), rng) for _ in range(16)]
        blob = tc.lane_bundle_to_bytes(cts, params16)
        assert len(blob) == tc.lane_bundle_byte_size(params16)
        back = tc.lane_bundle_from_bytes(blob, params16)
        assert tc.lane_bundle_to_bytes(back, params16) == blob
