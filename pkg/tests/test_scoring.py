import numpy as np
import pytest
from scipy.stats import multivariate_normal

from unregscore import gmm, vae
from unregscore.errors import ConfigError, DataError
from unregscore.scoring import (
    ScoreBreakdown,
    ScoreKind,
    read_scores_csv,
    score_ae,
    score_gmm,
    score_vae,
    select,
    write_scores_csv,
)


def random_spd(rng, d):
    a = rng.standard_normal((d, d))
    return a @ a.T + 0.5 * np.eye(d)


class TestSelect:
    def test_components(self):
        br = ScoreBreakdown(1.0, 2.0, 3.0, 6.0)
        assert select(br, ScoreKind.M) == 3.0
        assert select(br, "L") == br.D + br.A + br.M
        assert [select(br, k) for k in ScoreKind] == [6.0, 1.0, 2.0, 3.0]

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            select(ScoreBreakdown(1.0, 2.0, 3.0, 6.0), "Q")

    def test_single_class_gmm_d_is_zero(self):
        model = gmm.GmmModel([1.0], [[0.0, 0.0]], [np.eye(2)])
        assert select(score_gmm(model, np.array([0.3, 0.1])), ScoreKind.D) == 0.0


class TestScoreGmm:
    def test_single_class_at_mean(self):
        rng = np.random.default_rng(0)
        cov = random_spd(rng, 4)
        mu = rng.standard_normal(4)
        br = score_gmm(gmm.GmmModel([1.0], [mu], [cov]), mu)
        assert br.D == 0.0 and br.M == 0.0
        ref = 0.5 * np.log((2 * np.pi) ** 4 * np.linalg.det(cov))
        assert br.A == pytest.approx(ref, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_half_mahalanobis_via_solve(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 7))
        cov, mu = random_spd(rng, d), rng.standard_normal(d)
        model = gmm.GmmModel([1.0], [mu], [cov])
        for x in rng.standard_normal((10, d)) * 3:
            y = np.linalg.solve(cov, x - mu)
            assert abs(score_gmm(model, x).M - 0.5 * (x - mu) @ y) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_total_matches_scipy(self, seed):
        rng = np.random.default_rng(seed)
        k, d = 3, 3
        model = gmm.GmmModel(rng.dirichlet(np.ones(k)), rng.standard_normal((k, d)), [random_spd(rng, d) for _ in range(k)])
        x = rng.standard_normal((20, d)) * 2
        br = score_gmm(model, x)
        log_joint = np.stack(
            [np.log(model.weights[j]) + multivariate_normal(model.means[j], model.covs[j]).logpdf(x) for j in range(k)], axis=1
        )
        kmap = np.argmax(log_joint, axis=1)
        np.testing.assert_allclose(br.L, -log_joint[np.arange(20), kmap], rtol=0, atol=1e-8)
        np.testing.assert_allclose(br.D, -np.log(model.weights[kmap]), rtol=0, atol=1e-12)
        assert np.all(np.abs(br.residual()) < 1e-9)

    def test_mixture_nll_bounded_by_total(self):
        rng = np.random.default_rng(7)
        model = gmm.GmmModel([0.2, 0.8], rng.standard_normal((2, 2)), [random_spd(rng, 2) for _ in range(2)])
        x = rng.standard_normal((100, 2)) * 4
        assert np.all(gmm.nll(model, x) <= score_gmm(model, x).L + 1e-8)

    def test_symmetric_tie(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        model = gmm.GmmModel([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.0]], [cov, cov])
        flipped = gmm.GmmModel([0.5, 0.5], [[1.0, 0.0], [-1.0, 0.0]], [cov, cov])
        x = np.array([0.0, 0.0])
        a, b = score_gmm(model, x), score_gmm(flipped, x)
        for f in "DAML":
            assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(8)
        model = gmm.GmmModel(rng.dirichlet(np.ones(4)), rng.standard_normal((4, 3)), [random_spd(rng, 3) for _ in range(4)])
        x = rng.standard_normal((30, 3))
        perm = model.permuted([2, 0, 3, 1])
        np.testing.assert_allclose(score_gmm(model, x).L, score_gmm(perm, x).L, atol=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(9)
        model = gmm.GmmModel([0.3, 0.7], rng.standard_normal((2, 2)), [random_spd(rng, 2) for _ in range(2)])
        x = rng.standard_normal((5, 2))
        batch = score_gmm(model, x)
        assert isinstance(score_gmm(model, x[3]).M, float)
        assert score_gmm(model, x[3]).M == pytest.approx(batch.M[3], abs=1e-12)


class TestScoreVae:
    def model(self, **kw):
        return vae.build_model(vae.VaeConfig(n_size=8, n_z=2, arch="dense", hidden=(8,), **kw), np.random.default_rng(0))

    def test_deterministic(self):
        m = self.model()
        x = np.random.default_rng(1).random((8, 8))
        a, b = score_vae(m, x), score_vae(m, x)
        assert a == b
        assert isinstance(a.L, float)

    def test_perfect_reconstruction(self):
        m = self.model()
        last = max(i for i, d in enumerate(m.dec_params.layers) if "W" in d)
        m.dec_params.layers[last]["W"][:] = 0.0
        m.dec_params.layers[last]["b"][:] = 0.0
        m.dec_params.layers[last]["b"][:64] = 0.25
        br = score_vae(m, np.full((8, 8), 0.25))
        assert br.M == 0.0
        assert br.L == pytest.approx(br.D + br.A, abs=1e-12)

    def test_batches_agree(self):
        m = self.model()
        x = np.random.default_rng(2).random((13, 8, 8))
        full = score_vae(m, x)
        chunked = score_vae(m, x, batch_size=4)
        np.testing.assert_allclose(full.L, chunked.L, rtol=0, atol=1e-10)
        assert len(full) == 13

    def test_uses_map_latent(self):
        m = self.model()
        x = np.random.default_rng(3).random((2, 8, 8))
        enc = vae.encode(m, x)
        ref = vae.negative_elbo(vae.as_batch(m, x), enc, vae.decode(m, enc.mu_z))
        np.testing.assert_array_equal(score_vae(m, x).M, ref.M)

    def test_mode_checks(self):
        with pytest.raises(ConfigError):
            score_vae(self.model(mode="ae"), np.zeros((8, 8)))
        br = score_ae(self.model(mode="ae"), np.random.default_rng(4).random((3, 8, 8)))
        assert np.all(br.D == 0) and np.all(br.L > 0)


class TestScoreCsv:
    def test_round_trip(self, tmp_path):
        rows = [
            dict(sample_id="a", patch_row=0, patch_col=1, D=0.1, A=-2.5, M=1 / 3, L=0.1 - 2.5 + 1 / 3, label=1, cluster_id=0),
            dict(sample_id="b", patch_row=2, patch_col=0, D=0.0, A=1e-300, M=5.0, L=5.0, label=0, cluster_id=1),
        ]
        write_scores_csv(tmp_path / "s.csv", rows)
        cols = read_scores_csv(tmp_path / "s.csv")
        assert list(cols["sample_id"]) == ["a", "b"]
        assert cols["M"][0] == 1 / 3 and cols["A"][1] == 1e-300
        np.testing.assert_array_equal(cols["label"], [1, 0])

    def test_missing_columns(self, tmp_path):
        (tmp_path / "s.csv").write_text("sample_id,D\nx,1\n")
        with pytest.raises(DataError):
            read_scores_csv(tmp_path / "s.csv")
