import numpy as np
import pytest

from flhhe import ring
from flhhe.errors import ParameterError, SerializationError


def schoolbook_negacyclic(a, b, m):
    """O(N^2) oracle: plain convolution with X^N = -1 wraparound."""
    n = len(a)
    out = [0] * n
    for i in range(n):
        ai = int(a[i])
        for j in range(n):
            k = i + j
            v = ai * int(b[j])
            if k >= n:
                out[k - n] -= v
            else:
                out[k] += v
    return [x % m for x in out]


class TestRingParams:
    def test_presets_valid(self):
        ring.preset("default")
        ring.preset("toy")

    def test_unknown_preset(self):
        with pytest.raises(ParameterError):
            ring.preset("huge")

    def test_degree_must_be_power_of_two(self):
        with pytest.raises(ParameterError):
            ring.RingParams(n=24, q=ring.Q_TOY, t=65537, delta=1024, sigma=3.2, k_max=31)

    def test_ntt_compatibility_checked(self):
        # 2N must divide q-1 and t-1
        with pytest.raises(ParameterError):
            ring.RingParams(n=16, q=101, t=65537, delta=4, sigma=3.2, k_max=3)
        with pytest.raises(ParameterError):
            ring.RingParams(n=16, q=ring.Q_TOY, t=13, delta=1, sigma=3.2, k_max=3)

    def test_overflow_budget(self):
        # 32 * 1024 = 32768 is not < t//2 = 32768
        with pytest.raises(ParameterError):
            ring.RingParams(n=16, q=ring.Q_TOY, t=65537, delta=1024, sigma=3.2, k_max=32)
        p = ring.RingParams(n=16, q=ring.Q_TOY, t=65537, delta=1024, sigma=3.2, k_max=31)
        assert p.k_max * p.delta < p.t // 2

    def test_moduli_are_ntt_friendly_primes(self):
        # Miller-Rabin with fixed bases; q and t are frozen constants
        def is_probable_prime(x):
            for base in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
                if x % base == 0:
                    return x == base
                d, r = x - 1, 0
                while d % 2 == 0:
                    d //= 2
                    r += 1
                y = pow(base, d, x)
                if y in (1, x - 1):
                    continue
                for _ in range(r - 1):
                    y = y * y % x
                    if y == x - 1:
                        break
                else:
                    return False
            return True

        assert is_probable_prime(ring.Q_DEFAULT)
        assert is_probable_prime(ring.Q_TOY)
        assert is_probable_prime(ring.T_DEFAULT)
        assert (ring.Q_DEFAULT - 1) % 4096 == 0
        assert (ring.Q_TOY - 1) % 512 == 0
        for p in ring.CRT_PRIMES:
            assert is_probable_prime(p)
            assert (p - 1) % 8192 == 0
            assert p.bit_length() <= 29


class TestNtt:
    @pytest.mark.parametrize("n", [16, 32, 64])
    @pytest.mark.parametrize("which", ["q", "t"])
    def test_roundtrip(self, n, which):
        m = ring.Q_TOY if which == "q" else 65537
        rng = np.random.default_rng(n)
        for _ in range(5):
            p = ring.sample_uniform(n, m, rng)
            assert ring.ntt_inverse(ring.ntt_forward(p)) == p

    def test_roundtrip_default_degree(self):
        rng = np.random.default_rng(0)
        p = ring.sample_uniform(2048, 65537, rng)
        assert ring.ntt_inverse(ring.ntt_forward(p)) == p
        q = ring.sample_uniform(2048, ring.Q_DEFAULT, rng)
        assert ring.ntt_inverse(ring.ntt_forward(q)) == q

    def test_zero_maps_to_zero(self):
        z = ring.Poly.zero(16, ring.Q_TOY)
        assert ring.ntt_forward(z) == ring.Poly.make([0] * 16, ring.Q_TOY, ntt=True)

    def test_domain_tags_enforced(self):
        p = ring.Poly.zero(16, 65537)
        with pytest.raises(ParameterError):
            ring.ntt_inverse(p)
        f = ring.ntt_forward(p)
        with pytest.raises(ParameterError):
            ring.ntt_forward(f)

    def test_missing_root_rejected(self):
        # 7681 = 512*15 + 1 supports N up to 256, not 512
        with pytest.raises(ParameterError):
            ring.ntt_forward(ring.Poly.zero(512, 7681))

    @pytest.mark.parametrize("which", ["q", "t"])
    def test_pointwise_mul_matches_schoolbook(self, which):
        m = ring.Q_TOY if which == "q" else 65537
        rng = np.random.default_rng(7)
        for _ in range(50):
            a = ring.sample_uniform(16, m, rng)
            b = ring.sample_uniform(16, m, rng)
            via_ntt = ring.ntt_inverse(
                ring.poly_pointwise(ring.ntt_forward(a), ring.ntt_forward(b))
            )
            assert list(via_ntt.coeffs) == schoolbook_negacyclic(a.coeffs, b.coeffs, m)


class TestPolyArithmetic:
    def test_mul_identity(self, params16):
        rng = np.random.default_rng(1)
        a = ring.sample_uniform(16, params16.q, rng)
        one = ring.Poly.make([1] + [0] * 15, params16.q)
        assert ring.poly_mul(a, one) == a

    def test_negacyclic_identity(self, params16):
        # X * X^(N-1) = X^N = -1
        q = params16.q
        x = ring.Poly.make([0, 1] + [0] * 14, q)
        xn1 = ring.Poly.make([0] * 15 + [1], q)
        prod = ring.poly_mul(x, xn1)
        want = ring.Poly.make([-1] + [0] * 15, q)
        assert prod == want

    @pytest.mark.parametrize("n", [16, 32])
    def test_mul_matches_schoolbook(self, n):
        rng = np.random.default_rng(n)
        for m in (65537, ring.Q_TOY):
            for _ in range(10):
                a = ring.sample_uniform(n, m, rng)
                b = ring.sample_uniform(n, m, rng)
                assert list(ring.poly_mul(a, b).coeffs) == schoolbook_negacyclic(
                    a.coeffs, b.coeffs, m
                )

    def test_ring_axioms(self, params16):
        rng = np.random.default_rng(3)
        q = params16.q
        for _ in range(10):
            a = ring.sample_uniform(16, q, rng)
            b = ring.sample_uniform(16, q, rng)
            c = ring.sample_uniform(16, q, rng)
            assert ring.poly_mul(ring.poly_mul(a, b), c) == ring.poly_mul(a, ring.poly_mul(b, c))
            left = ring.poly_mul(a, ring.poly_add(b, c))
            right = ring.poly_add(ring.poly_mul(a, b), ring.poly_mul(a, c))
            assert left == right
            assert ring.poly_add(a, ring.poly_neg(a)) == ring.Poly.zero(16, q)

    def test_modulus_mismatch(self, params16):
        a = ring.Poly.zero(16, params16.q)
        b = ring.Poly.zero(16, params16.t)
        with pytest.raises(ParameterError):
            ring.poly_add(a, b)
        with pytest.raises(ParameterError):
            ring.poly_mul(a, b)

    def test_centered_representatives(self):
        t = 65537
        p = ring.Poly.make([0, 1, t - 1, t // 2, t // 2 + 1], t)
        assert list(p.centered()) == [0, 1, -1, t // 2, -(t // 2)]


class TestSampling:
    def test_determinism(self, params16):
        a = ring.sample_uniform(16, params16.q, np.random.default_rng(5))
        b = ring.sample_uniform(16, params16.q, np.random.default_rng(5))
        assert a == b
        g1 = ring.sample_gaussian(16, params16.q, 3.2, np.random.default_rng(5))
        g2 = ring.sample_gaussian(16, params16.q, 3.2, np.random.default_rng(5))
        assert g1 == g2

    def test_ternary_support(self, params16):
        q = params16.q
        s = ring.sample_ternary(256, q, np.random.default_rng(6))
        assert set(int(x) for x in s.centered()) <= {-1, 0, 1}

    def test_uniform_range(self, params16):
        s = ring.sample_uniform(256, params16.q, np.random.default_rng(7))
        assert all(0 <= int(x) < params16.q for x in s.coeffs)

    def test_gaussian_mean(self):
        # statistical oracle: mean of 10^4 draws within 5*sigma/100 of zero
        sigma = 3.2
        draws = ring.sample_gaussian(10_000, ring.Q_TOY, sigma, np.random.default_rng(8))
        mean = float(np.mean(draws.centered().astype(np.float64)))
        assert abs(mean) < 5 * sigma / 100


class TestSerialization:
    def test_roundtrip_is_byte_identical(self, params16):
        rng = np.random.default_rng(9)
        for m in (params16.q, params16.t):
            p = ring.sample_uniform(16, m, rng)
            blob = ring.poly_to_bytes(p, params16)
            assert len(blob) == ring.poly_byte_size(params16, m)
            back = ring.poly_from_bytes(blob, params16)
            assert back == p
            assert ring.poly_to_bytes(back, params16) == blob

    def test_word_width_is_power_of_two(self):
        assert ring.word_bytes(65537) == 4
        assert ring.word_bytes(ring.Q_DEFAULT) == 32
        assert ring.word_bytes(ring.Q_TOY) == 32

    def test_ntt_domain_refused(self, params16):
        p = ring.ntt_forward(ring.Poly.zero(16, params16.t))
        with pytest.raises(SerializationError):
            ring.poly_to_bytes(p, params16)

    def test_bad_magic_rejected(self, params16):
        p = ring.Poly.zero(16, params16.t)
        blob = bytearray(ring.poly_to_bytes(p, params16))
        blob[0] ^= 0xFF
        with pytest.raises(SerializationError):
            ring.poly_from_bytes(bytes(blob), params16)

    def test_truncation_rejected(self, params16):
        p = ring.Poly.zero(16, params16.t)
        blob = ring.poly_to_bytes(p, params16)
        with pytest.raises(SerializationError):
            ring.poly_from_bytes(blob[:-1], params16)
